"""Offer and bid prices of a payoff under a volatility band across spatial grids.

    python3 scripts/bsb_grid_convergence.py --payoff "max(x-90,0)-2*max(x-100,0)+max(x-110,0)"
"""

import argparse
import csv
import sys
import time

from gexpect.pde import BSBSpec, bsb_price


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--payoff", default="max(x-90,0)-2*max(x-100,0)+max(x-110,0)")
    ap.add_argument("--r", type=float, default=0.0)
    ap.add_argument("--band", type=float, nargs=2, default=[0.1, 0.3])
    ap.add_argument("--spot", type=float, default=100.0)
    ap.add_argument("--T", type=float, default=1.0)
    ap.add_argument("--Nx", type=int, nargs="+", default=[100, 200, 400, 800])
    args = ap.parse_args()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["Nx", "Nt", "offer", "bid", "seconds"])
    for Nx in args.Nx:
        t0 = time.perf_counter()
        out = {}
        for side in ("offer", "bid"):
            res = bsb_price(BSBSpec(args.payoff, args.r, *args.band, args.spot, args.T, side, Nx=Nx))
            out[side] = res
        w.writerow([Nx, out["bid"].surface.grid.Nt, "%.10g" % out["offer"].price, "%.10g" % out["bid"].price, "%.2f" % (time.perf_counter() - t0)])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
