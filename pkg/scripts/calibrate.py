"""Grid search over service-time parameters for a config.

Reports the Azure20 speedup and the diminishing-returns check for each
(median, sigma) pair so the shipped config can be re-derived.

Usage: python scripts/calibrate.py --config configs/sdv_bugbash.json \
           --medians 15,22,30 --sigmas 1.2,1.6,2.0
"""

import argparse
import json
from pathlib import Path

from verifarm.sim import Dist, SimConfig, run_experiment_table


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path, required=True)
    ap.add_argument("--medians", default="15,22,30")
    ap.add_argument("--sigmas", default="1.2,1.6,2.0")
    ap.add_argument("--caps", default="20,100,200")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    base = SimConfig.from_json(json.loads(args.config.read_text()))
    caps = [int(c) for c in args.caps.split(",")]
    cap_s = base.service_time.cap

    results = []
    for median in (float(x) for x in args.medians.split(",")):
        for sigma in (float(x) for x in args.sigmas.split(",")):
            cfg = SimConfig(**{**base.__dict__, "service_time": Dist.lognormal(median, sigma, cap_s)})
            rows = run_experiment_table(cfg, caps)
            speedups = [r.speedup for r in rows[1:]]
            results.append({"median": median, "sigma": sigma, "local": rows[0].makespan,
                            "speedups": dict(zip((r.label for r in rows[1:]), speedups))})
            print(f"median={median:<6} sigma={sigma:<4} local={rows[0].makespan / 3600:7.2f}h "
                  + " ".join(f"{s:6.2f}x" for s in speedups))
    if args.out:
        args.out.write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
