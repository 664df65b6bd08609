"""Full desk-scale plate experiment: screening, adaptive MLMC and MC at every target.

Writes the CLI CSV set to the output directory and prints a cost summary.

    python scripts/desk_experiment.py --out results/desk --seed 0
"""

import argparse
import csv
from pathlib import Path

from simlmc import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="INI experiment file (defaults: desk-scale plate)")
    parser.add_argument("--out", default="results/desk")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()
    argv = ["run", "--out", args.out, "--seed", str(args.seed), "--threads", str(args.threads)]
    if args.config:
        argv += ["--config", args.config]
    code = cli.main(argv)
    if code != 0:
        return code
    with open(Path(args.out) / "cost.csv") as fh:
        rows = list(csv.DictReader(fh))
    costs = {(r["method"], r["estimand"], r["target"]): float(r["cost_seconds"]) for r in rows}
    print(f"{'estimand':<10}{'target':>10}{'MLMC s':>10}{'MC s':>10}{'speedup':>9}")
    for (method, estimand, target), cost in sorted(costs.items()):
        if method != "MLMC":
            continue
        mc = costs.get(("MC", estimand, target))
        speedup = f"{mc / cost:9.1f}" if mc else f"{'-':>9}"
        mc_text = f"{mc:10.1f}" if mc else f"{'-':>10}"
        print(f"{estimand:<10}{float(target):>10.1e}{cost:10.1f}{mc_text}{speedup}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
