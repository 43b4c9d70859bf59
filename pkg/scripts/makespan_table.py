"""Makespan table: local baseline against capped cloud pools for each config.

Usage: python scripts/makespan_table.py [--caps 20,100,200] [--out results/makespan.csv] [--seed N]
"""

import argparse
import json
from pathlib import Path

from verifarm.sim import SimConfig, hhmm, run_experiment_table, table_csv

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--configs", nargs="+", default=["sdv_bugbash", "fail_driver1"])
    ap.add_argument("--caps", default="20,100,200")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", type=Path, default=ROOT / "results" / "makespan.csv")
    args = ap.parse_args()
    caps = [int(c) for c in args.caps.split(",")]

    lines: list[str] = []
    for name in args.configs:
        cfg = SimConfig.from_json(json.loads((ROOT / "configs" / f"{name}.json").read_text()))
        if args.seed is not None:
            cfg = SimConfig(**{**cfg.__dict__, "seed": args.seed})
        rows = run_experiment_table(cfg, caps)
        csv = table_csv(cfg, rows).splitlines()
        lines += csv if not lines else csv[1:]
        print(f"{name}: " + "  ".join(f"{r.label} {hhmm(r.makespan)} ({r.speedup:.2f}x)" for r in rows))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
