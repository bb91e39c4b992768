"""Agreement metrics between the ReLU network and its spiking twin, plus the
parameter-sensitivity sweeps (window margin, spike jitter, slope noise)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convert import SnnNetwork, convert
from .modelio import Dataset
from .network import ReluNetwork, predict_batch
from .preprocess import ScaledNetwork
from .simulate import NoiseSpec, _alpha_offsets, simulate_event


@dataclass
class AgreementReport:
    n_samples: int
    n_agree: int
    agreement_pct: float
    snn_accuracy_pct: float | None
    ann_accuracy_pct: float | None
    spike_fraction_pct: float
    mismatches: list[tuple[int, int, int]]   # (sample index, ann class, snn class)
    early_crossings: int
    invalid_slope_trial: bool = False

    def __post_init__(self):
        assert self.n_agree <= self.n_samples


def run_agreement(relu_net: ReluNetwork, scaled: ScaledNetwork, snn: SnnNetwork,
                  dataset: Dataset, noise: NoiseSpec | None = None,
                  sparse: bool = False, threshold_mode: str = "constant",
                  rng: np.random.Generator | None = None,
                  alpha_offsets: list[np.ndarray] | None = None) -> AgreementReport:
    """Sample-by-sample comparison of ReLU and spiking predictions.

    The spike fraction counts non-forced spikes over hidden neurons, i.e.
    the fraction of active ReLUs when the run is noise-free.
    """
    ann = predict_batch(relu_net, dataset.images)
    if noise is not None and not noise.silent and rng is None:
        rng = np.random.default_rng(noise.seed)
    if alpha_offsets is None and noise is not None:
        alpha_offsets = _alpha_offsets(snn, noise)
    inputs = scaled.normalize_input(dataset.images)
    snn_pred = np.empty(len(dataset), dtype=np.int64)
    natural = 0
    total = 0
    early = 0
    invalid = False
    for i in range(len(dataset)):
        trace = simulate_event(snn, inputs[i], noise=noise, sparse=sparse,
                               threshold_mode=threshold_mode, rng=rng,
                               alpha_offsets=alpha_offsets)
        snn_pred[i] = int(np.argmax(trace.readout_potentials))
        natural += trace.hidden_natural
        total += trace.hidden_total
        early += trace.early_crossings
        invalid |= trace.invalid_slope
    agree = snn_pred == ann
    mismatches = [(int(i), int(ann[i]), int(snn_pred[i]))
                  for i in np.nonzero(~agree)[0]]
    snn_acc = ann_acc = None
    if dataset.labels is not None:
        snn_acc = 100.0 * float(np.mean(snn_pred == dataset.labels))
        ann_acc = 100.0 * float(np.mean(ann == dataset.labels))
    return AgreementReport(
        n_samples=len(dataset),
        n_agree=int(agree.sum()),
        agreement_pct=100.0 * float(agree.mean()),
        snn_accuracy_pct=snn_acc,
        ann_accuracy_pct=ann_acc,
        spike_fraction_pct=100.0 * natural / total if total else 0.0,
        mismatches=mismatches,
        early_crossings=early,
        invalid_slope_trial=invalid,
    )


def sweep_zeta(relu_net: ReluNetwork, scaled: ScaledNetwork, dataset: Dataset,
               zeta_list: list[float], variant: str = "fixed_alpha") -> list[dict]:
    """Reconvert per window margin and measure agreement, accuracy, latency.

    Calibration maxima are fixed; only the conversion windows change, so the
    scaled network is reused as-is. The calibration set must be disjoint
    from `dataset`.
    """
    rows = []
    base_zeta = scaled.hyper.zeta
    try:
        for zeta in zeta_list:
            scaled.hyper.zeta = float(zeta)
            snn = convert(scaled, variant)
            rep = run_agreement(relu_net, scaled, snn, dataset)
            rows.append({
                "zeta": float(zeta),
                "agreement_pct": rep.agreement_pct,
                "snn_accuracy_pct": rep.snn_accuracy_pct,
                "t_last": snn.t_last,
                "early_crossings": rep.early_crossings,
            })
    finally:
        scaled.hyper.zeta = base_zeta
    return rows


def sweep_jitter(relu_net: ReluNetwork, scaled: ScaledNetwork, snn: SnnNetwork,
                 dataset: Dataset, sd_list: list[float], trials: int = 16,
                 seed: int = 0) -> tuple[list[dict], list[dict]]:
    """Accuracy under per-spike Gaussian time jitter, several trials per SD.

    Returns (per-trial rows, per-SD summary rows with mean and SD of accuracy).
    """
    if dataset.labels is None:
        raise ValueError("jitter sweep needs a labeled dataset")
    trial_rows = []
    summary = []
    for sd in sd_list:
        accs = []
        for trial in range(trials):
            noise = NoiseSpec(jitter_sd=float(sd), seed=seed + 1000 * trial)
            rep = run_agreement(relu_net, scaled, snn, dataset, noise=noise)
            accs.append(rep.snn_accuracy_pct)
            trial_rows.append({"jitter_sd": float(sd), "trial": trial,
                               "snn_accuracy_pct": rep.snn_accuracy_pct})
        summary.append({
            "jitter_sd": float(sd),
            "mean_accuracy_pct": float(np.mean(accs)),
            "sd_accuracy_pct": float(np.std(accs, ddof=1)) if trials > 1 else 0.0,
            "trials": trials,
        })
    return trial_rows, summary


def sweep_alpha_noise(relu_net: ReluNetwork, scaled: ScaledNetwork, snn: SnnNetwork,
                      dataset: Dataset, sd_list: list[float], trials: int = 16,
                      seed: int = 0) -> tuple[list[dict], list[dict]]:
    """Accuracy under frozen per-neuron slope offsets, several trials per SD.

    A trial whose offsets push some neuron's post-arrival slope to zero or
    below is flagged invalid and excluded from the summary statistics, but
    stays in the per-trial rows.
    """
    if dataset.labels is None:
        raise ValueError("slope-noise sweep needs a labeled dataset")
    if snn.variant != "fixed_alpha":
        raise ValueError("slope-noise sweep expects the fixed-slope conversion")
    trial_rows = []
    summary = []
    for sd in sd_list:
        accs = []
        n_invalid = 0
        for trial in range(trials):
            noise = NoiseSpec(alpha_sd=float(sd), seed=seed + 1000 * trial)
            rep = run_agreement(relu_net, scaled, snn, dataset, noise=noise)
            if rep.invalid_slope_trial:
                n_invalid += 1
            else:
                accs.append(rep.snn_accuracy_pct)
            trial_rows.append({
                "alpha_sd": float(sd), "trial": trial,
                "snn_accuracy_pct": rep.snn_accuracy_pct,
                "invalid": rep.invalid_slope_trial,
            })
        summary.append({
            "alpha_sd": float(sd),
            "mean_accuracy_pct": float(np.mean(accs)) if accs else float("nan"),
            "sd_accuracy_pct": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
            "trials": trials,
            "invalid_trials": n_invalid,
        })
    return trial_rows, summary
