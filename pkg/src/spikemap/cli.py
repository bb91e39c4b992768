"""Command line driver for the conversion pipeline.

Subcommands: gen-model, convert, verify, sweep, trace. Settings resolve as
CLI flags over config-file entries over defaults, and every report starts
with the effective configuration so runs can be reproduced byte for byte.

Exit codes: 0 success, 1 verification failure (noise-free agreement below
100 percent), 2 usage error, 3 data or file error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import modelio, verify, zoo
from .convert import VARIANTS, ConversionError, convert
from .layers import StructureError
from .network import predict_batch
from .preprocess import Hyper, calibrate, incoming_weight_sums, preprocess
from .simulate import NoiseSpec, simulate_event
from .tensor import TensorError

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_DATA = 3

DATA_ERRORS = (modelio.ModelIOError, StructureError, TensorError,
               ConversionError, FileNotFoundError, ValueError)


@dataclass
class RunConfig:
    """Effective settings of one CLI invocation."""
    subcommand: str
    model: str | None = None
    scaled: str | None = None
    snn: str | None = None
    data: str | None = None
    calib: str | None = None
    outdir: str = "out"
    kind: str = "mlp"
    n_calib: int = 512
    n_eval: int = 1024
    seed: int = 0
    delta: float = 0.01
    b_low: float = 10.0
    zeta: float = 0.5
    window_floor: float = 1e-6
    variant: str = "fixed_alpha"
    sparse: bool = False
    jitter_sd: float = 0.0
    alpha_sd: float = 0.0
    threshold_mode: str = "constant"
    which: str = "zeta"
    values: list[float] = field(default_factory=list)
    trials: int = 16
    index: int = 0
    dt_oracle: float = 1e-4

    def header(self) -> str:
        # outdir only names the destination; leaving it out keeps reports
        # byte-identical across runs that differ only in where they write
        pairs = sorted((k, v) for k, v in self.__dict__.items() if k != "outdir")
        return "\n".join(f"# {k} = {v}" for k, v in pairs)


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> RunConfig:
    """Apply precedence: explicit flags > config file > dataclass defaults."""
    cfg = RunConfig(subcommand=args.subcommand)
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file: {exc}")
    for key, value in file_values.items():
        if not hasattr(cfg, key):
            parser.error(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    for key, value in vars(args).items():
        if key in ("config", "subcommand") or value is None:
            continue
        if hasattr(cfg, key):
            setattr(cfg, key, value)
    try:
        Hyper(delta=cfg.delta, b_low=cfg.b_low, zeta=cfg.zeta,
              window_floor=cfg.window_floor)
    except ValueError as exc:
        parser.error(str(exc))
    if cfg.variant not in VARIANTS:
        parser.error(f"unknown variant {cfg.variant!r}")
    return cfg


def _paths(base: str) -> tuple[str, str]:
    return base + ".json", base + ".bin"


def _load_bundle(cfg: RunConfig):
    net = modelio.load_model(*_paths(cfg.model))
    scaled = modelio.load_scaled(*_paths(cfg.scaled))
    snn = modelio.load_snn(*_paths(cfg.snn))
    data = modelio.load_dataset(*_paths(cfg.data))
    return net, scaled, snn, data


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, rows: list[dict]):
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in cols])


def cmd_gen_model(cfg: RunConfig) -> int:
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    net = zoo.make_model(cfg.kind, cfg.seed)
    modelio.save_model(net, *_paths(str(outdir / "model")))
    calib = zoo.make_dataset(net, cfg.n_calib, cfg.seed + 1, labeled=False)
    modelio.save_dataset(calib, *_paths(str(outdir / "calib")))
    eval_ds = zoo.make_dataset(net, cfg.n_eval, cfg.seed + 2, labeled=True)
    modelio.save_dataset(eval_ds, *_paths(str(outdir / "eval")))
    print(f"wrote {cfg.kind} model + {cfg.n_calib} calibration "
          f"+ {cfg.n_eval} evaluation samples to {outdir}")
    return EXIT_OK


def cmd_convert(cfg: RunConfig) -> int:
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    net = modelio.load_model(*_paths(cfg.model))
    calib = modelio.load_dataset(*_paths(cfg.calib))
    hyper = Hyper(delta=cfg.delta, b_low=cfg.b_low, zeta=cfg.zeta,
                  window_floor=cfg.window_floor)
    scaled = preprocess(net, hyper)
    calibrate(scaled, scaled.normalize_input(calib.images))
    snn = convert(scaled, cfg.variant)
    modelio.save_scaled(scaled, *_paths(str(outdir / "scaled")))
    modelio.save_snn(snn, *_paths(str(outdir / "snn")))
    lines = [cfg.header(), "#", "# layer  X_max      t_min      t_max"]
    for n, lay in enumerate(snn.hidden_layers(), start=1):
        lines.append(f"{n:7d}  {scaled.layer_max[n - 1]:<9.6g}  "
                     f"{lay.t_min:<9.6g}  {lay.t_max:<9.6g}")
    lines.append(f"# readout integrates until t = {snn.t_last!r}")
    for n, idx in enumerate(scaled.net.hidden_param_indices(), start=1):
        sums = incoming_weight_sums(scaled.net, idx).reshape(-1)
        hist, edges = np.histogram(sums, bins=8)
        lines.append(f"# layer {n} weight-sum histogram "
                     + " ".join(f"[{edges[i]:.2f},{edges[i+1]:.2f}):{hist[i]}"
                                for i in range(len(hist))))
    summary = "\n".join(lines) + "\n"
    (outdir / "convert_summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    net, scaled, snn, data = _load_bundle(cfg)
    noise = None
    if cfg.jitter_sd or cfg.alpha_sd:
        noise = NoiseSpec(jitter_sd=cfg.jitter_sd, alpha_sd=cfg.alpha_sd, seed=cfg.seed)
    report = verify.run_agreement(net, scaled, snn, data, noise=noise,
                                  sparse=cfg.sparse,
                                  threshold_mode=cfg.threshold_mode)
    rows = [{
        "n_samples": report.n_samples,
        "n_agree": report.n_agree,
        "agreement_pct": report.agreement_pct,
        "ann_accuracy_pct": report.ann_accuracy_pct,
        "snn_accuracy_pct": report.snn_accuracy_pct,
        "spike_fraction_pct": report.spike_fraction_pct,
        "early_crossings": report.early_crossings,
    }]
    _write_csv(outdir / "agreement.csv", rows)
    lines = [cfg.header(), "#"]
    for key, value in rows[0].items():
        lines.append(f"{key} = {_fmt(value)}")
    for idx, ann_cls, snn_cls in report.mismatches:
        lines.append(f"mismatch sample={idx} ann={ann_cls} snn={snn_cls}")
    (outdir / "agreement.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    noise_free = noise is None or noise.silent
    if noise_free and report.agreement_pct < 100.0:
        return EXIT_VERIFY
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    net, scaled, snn, data = _load_bundle(cfg)
    header = cfg.header() + "\n"
    if cfg.which == "zeta":
        values = cfg.values or [0.5, 0.1, 0.0, -0.5]
        rows = verify.sweep_zeta(net, scaled, data, values, cfg.variant)
        _write_csv(outdir / "sweep_zeta.csv", rows)
        (outdir / "sweep_zeta.txt").write_text(
            header + "\n".join(str(r) for r in rows) + "\n")
    elif cfg.which == "jitter":
        values = cfg.values or [0.0, 0.001, 0.01, 0.1]
        trials_rows, summary = verify.sweep_jitter(
            net, scaled, snn, data, values, trials=cfg.trials, seed=cfg.seed)
        _write_csv(outdir / "sweep_jitter_trials.csv", trials_rows)
        _write_csv(outdir / "sweep_jitter.csv", summary)
        (outdir / "sweep_jitter.txt").write_text(
            header + "\n".join(str(r) for r in summary) + "\n")
    elif cfg.which == "alpha":
        values = cfg.values or [0.0, 0.0001, 0.001, 0.01]
        trials_rows, summary = verify.sweep_alpha_noise(
            net, scaled, snn, data, values, trials=cfg.trials, seed=cfg.seed)
        _write_csv(outdir / "sweep_alpha_trials.csv", trials_rows)
        _write_csv(outdir / "sweep_alpha.csv", summary)
        (outdir / "sweep_alpha.txt").write_text(
            header + "\n".join(str(r) for r in summary) + "\n")
    else:
        raise ValueError(f"unknown sweep {cfg.which!r}")
    print(f"sweep {cfg.which} written to {outdir}")
    return EXIT_OK


def cmd_trace(cfg: RunConfig) -> int:
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    net, scaled, snn, data = _load_bundle(cfg)
    if not 0 <= cfg.index < len(data):
        raise ValueError(f"sample index {cfg.index} outside dataset of {len(data)}")
    x = scaled.normalize_input(data.images[cfg.index])
    trace = simulate_event(snn, x, sparse=cfg.sparse,
                           threshold_mode=cfg.threshold_mode)
    ann = int(predict_batch(net, data.images[cfg.index][None])[0])
    lines = [cfg.header(), "#",
             f"# input sample {cfg.index}; spikes: time [forced]",
             "layer input t_min 0 t_max 1"]
    for i, t in enumerate(trace.input_times.reshape(-1)):
        lines.append(f"  0 {i} {float(t)!r}")
    for k, (rec, lay) in enumerate(zip(trace.layers, snn.layers), start=1):
        if not rec.counts_spikes:
            continue
        kind = type(lay).__name__.removeprefix("Snn").lower()
        lines.append(f"layer {k} {kind} t_min {rec.t_min!r} t_max {rec.t_max!r}")
        flat_t = rec.times.reshape(-1)
        flat_f = rec.forced.reshape(-1)
        for i in range(flat_t.size):
            mark = " forced" if flat_f[i] else ""
            lines.append(f"  {k} {i} {float(flat_t[i])!r}{mark}")
    lines.append("readout potentials "
                 + " ".join(repr(float(v)) for v in trace.readout_potentials))
    lines.append(f"prediction snn {int(np.argmax(trace.readout_potentials))} ann {ann}")
    lines.append(f"spikes emitted {trace.spike_count} "
                 f"hidden natural {trace.hidden_natural} of {trace.hidden_total}")
    (outdir / "trace.txt").write_text("\n".join(lines) + "\n")
    print(f"trace written to {outdir / 'trace.txt'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikemap",
        description="Convert ReLU networks to single-spike networks and verify agreement",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with RunConfig defaults")
        p.add_argument("--outdir")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-model", help="generate a desk model plus datasets")
    common(p)
    p.add_argument("--kind", choices=zoo.MODEL_KINDS)
    p.add_argument("--n-calib", dest="n_calib", type=int)
    p.add_argument("--n-eval", dest="n_eval", type=int)

    p = sub.add_parser("convert", help="preprocess, calibrate, and convert a model")
    common(p)
    p.add_argument("--model", help="path prefix of the model manifest/blob")
    p.add_argument("--calib", help="path prefix of the calibration dataset")
    p.add_argument("--delta", type=float)
    p.add_argument("--b-low", dest="b_low", type=float)
    p.add_argument("--zeta", type=float)
    p.add_argument("--variant", choices=VARIANTS)

    p = sub.add_parser("verify", help="agreement report between ReLU and spiking nets")
    common(p)
    for flag in ("--model", "--scaled", "--snn", "--data"):
        p.add_argument(flag)
    p.add_argument("--sparse", action="store_true", default=None)
    p.add_argument("--jitter-sd", dest="jitter_sd", type=float)
    p.add_argument("--alpha-sd", dest="alpha_sd", type=float)
    p.add_argument("--threshold-mode", dest="threshold_mode",
                   choices=("constant", "strict"))

    p = sub.add_parser("sweep", help="sensitivity sweeps producing CSV tables")
    common(p)
    for flag in ("--model", "--scaled", "--snn", "--data"):
        p.add_argument(flag)
    p.add_argument("--which", choices=("zeta", "jitter", "alpha"))
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--trials", type=int)
    p.add_argument("--variant", choices=VARIANTS)

    p = sub.add_parser("trace", help="dump per-layer spike times for one input")
    common(p)
    for flag in ("--model", "--scaled", "--snn", "--data"):
        p.add_argument(flag)
    p.add_argument("--index", type=int)
    p.add_argument("--sparse", action="store_true", default=None)
    p.add_argument("--threshold-mode", dest="threshold_mode",
                   choices=("constant", "strict"))
    return parser


COMMANDS = {
    "gen-model": cmd_gen_model,
    "convert": cmd_convert,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "trace": cmd_trace,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = _merge_config(args, parser)
    try:
        return COMMANDS[cfg.subcommand](cfg)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
