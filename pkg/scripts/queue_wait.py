"""Queue-wait statistics for the pre-warmed pool config.

Usage: python scripts/queue_wait.py [--seeds 42] [--out results/queue_wait.json]
"""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from verifarm.sim import SimConfig, simulate

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "queue_wait.json")
    ap.add_argument("--seeds", default="42")
    ap.add_argument("--out", type=Path, default=ROOT / "results" / "queue_wait.json")
    args = ap.parse_args()
    base = SimConfig.from_json(json.loads(args.config.read_text()))

    out = {}
    for seed in (int(s) for s in args.seeds.split(",")):
        r = simulate(SimConfig(**{**base.__dict__, "seed": seed}))
        s = r.wait_stats
        out[seed] = asdict(s)
        print(f"seed {seed}: n={s.count} mean {s.mean:.2f}s median {s.median:.2f}s "
              f"std {s.std:.2f}s min {s.min:.2f}s max {s.max:.2f}s")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(out, indent=2) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
