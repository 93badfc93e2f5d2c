"""Level-wise second moments of the coupled increment estimator, with and without antithetics.

Prints log2 second moments per level and the fitted slopes. Defaults follow the
Clark-Cameron probe: k=10, N=2000, levels 3..7, 200 replicates per level.

Example:
    python scripts/variance_rates.py --reps 50 --levels 3 4 5
"""

import argparse
import json
import time

import numpy as np

from ubfilter.estimators import fit_slope, variance_probe
from ubfilter.models import TestFunction, build_model, simulate_dataset


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="clark-cameron", choices=["gbm", "clark-cameron", "nlm"])
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--n0", type=int, default=2000)
    ap.add_argument("--p", type=int, default=0)
    ap.add_argument("--levels", type=int, nargs="+", default=[3, 4, 5, 6, 7])
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--phi", default="x1")
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--json", help="write results to this file")
    return ap.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    model = build_model(args.model)
    data = simulate_dataset(model, args.k, data_level=10, rng=np.random.default_rng(args.data_seed))
    phi = TestFunction.parse(args.phi)
    out = {}
    for anti in (True, False):
        name = "antithetic" if anti else "plain"
        t0 = time.perf_counter()
        probes = [variance_probe(model, data, args.k, l, args.p, phi, args.reps, anti, args.n0, args.seed)
                  for l in args.levels]
        m2 = [pr.second_moment for pr in probes]
        slope, se = fit_slope(args.levels, np.log2(m2))
        out[name] = {"levels": args.levels, "second_moment": m2, "stderr": [pr.stderr for pr in probes],
                     "slope": slope, "slope_stderr": se}
        print(f"{name:10s} log2 m2 {np.round(np.log2(m2), 3).tolist()} slope {slope:+.3f} +/- {se:.3f}"
              f"  ({time.perf_counter() - t0:.0f}s)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
