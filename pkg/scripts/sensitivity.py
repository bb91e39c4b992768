#!/usr/bin/env python3
"""Sensitivity experiments on the VGG-style desk model.

Writes three plot-ready CSV tables: agreement/latency across window margins,
and accuracy under spike jitter and under frozen slope perturbations.
"""

import argparse
import csv
from pathlib import Path

from spikemap import zoo
from spikemap.convert import convert
from spikemap.preprocess import Hyper, calibrate, preprocess
from spikemap.verify import sweep_alpha_noise, sweep_jitter, sweep_zeta


def write_csv(path, rows):
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows)")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--outdir", default="out/sensitivity")
    ap.add_argument("--n-eval", type=int, default=400)
    ap.add_argument("--trials", type=int, default=16)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    net = zoo.make_vgg()
    scaled = preprocess(net, Hyper())
    calib = zoo.make_dataset(net, 512, seed=301, labeled=False)
    calibrate(scaled, scaled.normalize_input(calib.images))
    data = zoo.make_dataset(net, args.n_eval, seed=302, labeled=True)
    snn = convert(scaled, "fixed_alpha")

    zetas = [0.5, 0.3, 0.1, 0.0, -0.1, -0.3, -0.5]
    write_csv(outdir / "zeta.csv", sweep_zeta(net, scaled, data, zetas))

    sds = [0.0, 0.0001, 0.001, 0.01, 0.1]
    trials, summary = sweep_jitter(net, scaled, snn, data, sds,
                                   trials=args.trials, seed=args.seed)
    write_csv(outdir / "jitter_trials.csv", trials)
    write_csv(outdir / "jitter.csv", summary)

    trials, summary = sweep_alpha_noise(net, scaled, snn, data, sds,
                                        trials=args.trials, seed=args.seed)
    write_csv(outdir / "alpha_trials.csv", trials)
    write_csv(outdir / "alpha.csv", summary)


if __name__ == "__main__":
    main()
