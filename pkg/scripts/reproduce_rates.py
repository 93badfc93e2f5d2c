"""Desk-scale MSE-vs-cost sweep and rate fit for one or more models.

Example:
    python scripts/reproduce_rates.py --model gbm --out runs/rates --reps 20
"""

import argparse
import json
from pathlib import Path

from ubfilter.harness import main as cli


def run_model(model, out, reps, n, epsilons, width):
    base = ["--out", str(out), "--set", f"model={model}", "--set", f"n={n}", "--set", f"reps={reps}",
            "--set", f"epsilons={json.dumps(epsilons)}", "--parallel-width", str(width)]
    for step in ("simulate-data", "oracle", "sweep"):
        code = cli([step] + base)
        if code:
            raise SystemExit(code)
    return cli(["rates", str(out / "sweep.csv"), "--model", model, "--svg"])


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", action="append", choices=["gbm", "clark-cameron", "nlm"],
                    help="repeatable; defaults to all three")
    ap.add_argument("--out", default="runs/rates")
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--n", type=int, default=100, help="number of observations")
    ap.add_argument("--epsilons", type=float, nargs="+", default=[0.2, 0.1, 0.05, 0.025])
    ap.add_argument("--parallel-width", type=int, default=1)
    return ap.parse_args(argv)


if __name__ == "__main__":
    args = parse_args()
    for model in args.model or ["gbm", "clark-cameron", "nlm"]:
        print(f"== {model}")
        run_model(model, Path(args.out) / model, args.reps, args.n, args.epsilons, args.parallel_width)
