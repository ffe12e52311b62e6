"""Sweep Euler steps and CFG scale on a finished run; prints a CSV of EF adherence."""
import argparse
import csv
import sys

from echolab import pipeline as pl
from echolab.config import load_config
from echolab.numerics import configure_torch


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", required=True, help="run directory produced by `echolab e2e`")
    ap.add_argument("--steps", default="5,10,25,50,100")
    ap.add_argument("--scales", default="0,1,2,3")
    ap.add_argument("--negatives", default="none,anatomy-only")
    ap.add_argument("--n", type=int, default=64)
    args = ap.parse_args()
    configure_torch(1)
    run = pl.RunDir(args.out, load_config(args.config))
    rows = pl.sampler_ablation(run, [int(s) for s in args.steps.split(",")],
                               [float(s) for s in args.scales.split(",")], args.negatives.split(","), args.n)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)


if __name__ == "__main__":
    main()
