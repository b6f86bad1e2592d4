"""Monte Carlo value of the PDE-extracted bid policy for the butterfly as the
number of simulation steps grows. The PDE bid is fixed; the gap measures the
bias of holding a bang-bang feedback control constant over each step.

    python3 scripts/policy_step_refinement.py --paths 100000 --steps 250 1000 4000
"""

import argparse
import csv
import sys

from gexpect.acceptance import BUTTERFLY, butterfly_bid
from gexpect.montecarlo import PolicySpec, mc_policy_value
from gexpect.pde import bsb_price


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--steps", type=int, nargs="+", default=[250, 1000, 4000])
    ap.add_argument("--seed", type=int, default=2025)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    spec = butterfly_bid()
    pde = bsb_price(spec)
    policy = PolicySpec.lookup(pde.policy)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["steps", "bid", "mc_mean", "stderr", "gap", "allowance"])
    for n in args.steps:
        est = mc_policy_value(spec, policy, BUTTERFLY, args.paths, n, args.seed, chunk=2000, threads=args.threads)
        allow = 3 * est.stderr + 0.01 * abs(pde.price)
        w.writerow([n, "%.6g" % pde.price, "%.6g" % est.mean, "%.3g" % est.stderr, "%.4g" % (est.mean - pde.price), "%.4g" % allow])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
