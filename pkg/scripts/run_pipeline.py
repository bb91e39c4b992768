#!/usr/bin/env python3
"""End-to-end run over the desk model zoo.

Generates each model, converts it, and prints the headline metrics: ReLU and
spiking accuracy against the generated labels, sample-by-sample agreement,
and the fraction of neurons that actually spike.
"""

import argparse

from spikemap import zoo
from spikemap.convert import convert
from spikemap.preprocess import Hyper, calibrate, preprocess
from spikemap.verify import run_agreement


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-eval", type=int, default=1000)
    ap.add_argument("--n-calib", type=int, default=512)
    ap.add_argument("--variant", default="fixed_alpha")
    ap.add_argument("--sparse", action="store_true")
    args = ap.parse_args()

    print(f"{'model':<14}{'acc ReLU':>10}{'acc SNN':>10}{'agreement':>11}"
          f"{'spikes %':>10}{'t_last':>9}")
    for kind in ("mlp", "lenet", "vgg", "trained-mlp"):
        net = zoo.make_model(kind)
        scaled = preprocess(net, Hyper())
        calib = zoo.make_dataset(net, args.n_calib, seed=101, labeled=False)
        calibrate(scaled, scaled.normalize_input(calib.images))
        data = zoo.make_dataset(net, args.n_eval, seed=202, labeled=True)
        snn = convert(scaled, args.variant)
        rep = run_agreement(net, scaled, snn, data, sparse=args.sparse)
        print(f"{kind:<14}{rep.ann_accuracy_pct:>9.2f}%{rep.snn_accuracy_pct:>9.2f}%"
              f"{rep.agreement_pct:>10.2f}%{rep.spike_fraction_pct:>9.2f}%"
              f"{snn.t_last:>9.3f}")


if __name__ == "__main__":
    main()
