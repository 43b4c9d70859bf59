"""Build interception by PATH substitution.

For every intercepted binary name a small recorder script is written into a
private directory that is put first on the build's PATH. When the build calls
the tool, the recorder appends ``{"tool", "argv", "cwd", "timestamp"}`` to a
JSON-lines journal and then runs the configured action with ``sh -c``, passing
the original arguments as ``"$@"``. Actions write analysis artifacts into
``$VERIFARM_ARTIFACTS``.
"""

from __future__ import annotations

import json
import os
import stat
import sys
from dataclasses import dataclass
from pathlib import Path

JOURNAL_ENV = "VERIFARM_INTERCEPT_JOURNAL"
ARTIFACTS_ENV = "VERIFARM_ARTIFACTS"

_RECORDER = """#!{python}
import json, os, subprocess, sys, time
tool = {tool!r}
rec = {{"tool": tool, "argv": sys.argv[1:], "cwd": os.getcwd(), "timestamp": time.time()}}
with open(os.environ[{journal_env!r}], "a") as fh:
    fh.write(json.dumps(rec) + "\\n")
sys.exit(subprocess.call(["/bin/sh", "-c", {action!r}, tool] + sys.argv[1:]))
"""


@dataclass(frozen=True)
class Invocation:
    tool: str
    argv: tuple[str, ...]
    cwd: str
    timestamp: float


def write_recorders(bin_dir: Path, intercept: dict[str, str]) -> None:
    bin_dir.mkdir(parents=True, exist_ok=True)
    for tool, action in intercept.items():
        if "/" in tool or not tool:
            raise ValueError(f"intercepted name must be a bare binary name, got {tool!r}")
        path = bin_dir / tool
        path.write_text(_RECORDER.format(
            python=sys.executable, tool=tool, action=action, journal_env=JOURNAL_ENV))
        path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)


def read_journal(path: Path) -> list[Invocation]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(Invocation(d["tool"], tuple(d["argv"]), d["cwd"], float(d["timestamp"])))
    return out


def search_path(*front: os.PathLike | str) -> str:
    parts = [str(p) for p in front if p]
    parts.append(os.environ.get("PATH", os.defpath))
    return os.pathsep.join(parts)
