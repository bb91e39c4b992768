"""Event-driven execution of the spiking network.

Between spike arrivals every membrane potential is linear in time, so each
layer is solved in closed form: arrivals are sorted, slopes and potential
values are accumulated per segment, and the threshold crossing is located in
the first segment that contains one. No time discretization is involved;
the independent time-stepped engine lives in `stepped` and serves as the
brute-force cross-check.

Neurons whose potential has not reached the threshold by the end of their
layer's window fire a forced spike at exactly t_max (the external pulse of
the construction); their decoded value is zero, matching an inactive ReLU.
In sparse mode those units emit nothing and downstream units instead switch
to their full slope at the stored window boundary, which is the same
arithmetic with fewer physical spikes, so dense and sparse runs produce
identical potentials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convert import (
    SnnConv,
    SnnDense,
    SnnFlatten,
    SnnNetwork,
    SnnPool,
)
from .layers import POOL_MIN
from .network import im2col, pad_input

INPUT_CLAMP = 1.0 - 1e-12


class EncodingError(ValueError):
    """Input values outside the encodable [0, 1] range."""


@dataclass
class NoiseSpec:
    """Inference-time imperfections: spike-time jitter and slope offsets.

    `jitter_sd` perturbs every emitted spike time independently; `alpha_sd`
    draws one offset per hidden neuron, frozen per trial, so every sample
    of a trial sees the same hardware.
    """
    jitter_sd: float = 0.0
    alpha_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.jitter_sd < 0 or self.alpha_sd < 0:
            raise ValueError("noise standard deviations must be non-negative")

    @property
    def silent(self) -> bool:
        return self.jitter_sd == 0.0 and self.alpha_sd == 0.0


@dataclass
class LayerTrace:
    times: np.ndarray              # spike time per unit, layer output shape
    forced: np.ndarray             # True where the t_max pulse fired the unit
    t_min: float
    t_max: float
    counts_spikes: bool = True     # False for flatten pass-through records


@dataclass
class SpikeTrace:
    layers: list[LayerTrace]
    input_times: np.ndarray
    readout_potentials: np.ndarray
    sparse: bool
    spike_count: int = 0           # emitted spikes, sparse-mode aware
    hidden_natural: int = 0        # non-forced spikes in hidden Dense/Conv layers
    hidden_total: int = 0
    early_crossings: int = 0       # crossings before the layer window opened
    invalid_slope: bool = False    # an alpha perturbation killed a slope


def encode_input(x: np.ndarray) -> np.ndarray:
    """Times of the input spikes: t = 1 - x with x in [0, 1].

    Values of exactly 1 (allowing float dust) are clamped just below one so
    the spike stays inside the window.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.min() < -1e-12 or x.max() > 1.0 + 1e-12:
        raise EncodingError(
            f"input values in [{x.min():.6g}, {x.max():.6g}] exceed the [0, 1] range"
        )
    return 1.0 - np.clip(x, 0.0, INPUT_CLAMP)


def decode(trace: SpikeTrace, snn: SnnNetwork, layer: int) -> np.ndarray:
    """Values t_max - t for hidden layer `layer` (1-based); forced units are 0."""
    hidden = [rec for rec, lay in zip(trace.layers, snn.layers)
              if isinstance(lay, (SnnDense, SnnConv))]
    if not 1 <= layer <= len(hidden):
        raise IndexError(f"unknown hidden layer ordinal {layer}")
    rec = hidden[layer - 1]
    out = rec.t_max - rec.times
    out[rec.forced] = 0.0
    return out


def _crossings_sorted(s: np.ndarray, j: np.ndarray, theta: np.ndarray,
                      scan_start: float, t_max: float):
    """Earliest crossing for potentials with pre-sorted event times.

    s [R, E] event times (ascending per row), j [R, E] slope increments,
    theta [R]. A row's potential is sum_m j_m * max(0, t - s_m); the scan
    runs over t >= scan_start. Rows that never cross by t_max fire a forced
    spike at exactly t_max.
    """
    rows, nev = s.shape
    slope = np.cumsum(j, axis=1)
    moment = np.cumsum(j * s, axis=1)
    start_seg = np.maximum((s <= scan_start).sum(axis=1) - 1, 0)
    idx = start_seg[:, None]
    v_start = (np.take_along_axis(slope, idx, axis=1)[:, 0] * scan_start
               - np.take_along_axis(moment, idx, axis=1)[:, 0])
    v_start = np.where(s[:, 0] > scan_start, 0.0, v_start)   # nothing active yet
    with np.errstate(divide="ignore", invalid="ignore"):
        cand = (theta[:, None] + moment) / slope
    nxt = np.concatenate([s[:, 1:], np.full((rows, 1), np.inf)], axis=1)
    in_scan = np.arange(nev)[None, :] >= idx
    valid = (slope > 0) & in_scan & (cand >= s) & (cand >= scan_start) & (cand <= nxt)
    has = valid.any(axis=1)
    first = np.argmax(valid, axis=1)
    fire = np.where(has, np.take_along_axis(cand, first[:, None], axis=1)[:, 0], np.inf)
    fire = np.where(v_start >= theta, scan_start, fire)
    natural = fire <= t_max
    return np.where(natural, fire, t_max), natural


def first_crossings(times: np.ndarray, incr: np.ndarray, theta: np.ndarray,
                    scan_start: float, t_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Crossing scan; times may be shared [E] or per-row [R, E]."""
    incr = np.atleast_2d(incr)
    rows = incr.shape[0]
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if times.ndim == 1:
        order = np.argsort(times, kind="stable")
        s = np.broadcast_to(times[order], (rows, times.size))
        j = incr[:, order]
    else:
        order = np.argsort(times, axis=1, kind="stable")
        s = np.take_along_axis(times, order, axis=1)
        j = np.take_along_axis(incr, order, axis=1)
    return _crossings_sorted(s, j, theta, scan_start, t_max)


def _alpha_offsets(snn: SnnNetwork, noise: NoiseSpec | None) -> list[np.ndarray] | None:
    if noise is None or noise.alpha_sd == 0.0:
        return None
    rng = np.random.default_rng(noise.seed)
    return [rng.normal(0.0, noise.alpha_sd, lay.alpha.shape)
            for lay in snn.hidden_layers()]


def simulate_event(snn: SnnNetwork, x: np.ndarray, noise: NoiseSpec | None = None,
                   sparse: bool = False, threshold_mode: str = "constant",
                   rng: np.random.Generator | None = None,
                   alpha_offsets: list[np.ndarray] | None = None) -> SpikeTrace:
    """Closed-form simulation of one input through the spiking network.

    threshold_mode "constant" uses the converted thresholds at all times and
    counts crossings before the window opens as diagnostics; "strict" keeps
    the threshold unreachable before t_min, so firing starts at window open.
    An external `rng` lets a caller string several samples into one noise
    trial; `alpha_offsets` overrides the per-trial slope perturbations.
    """
    if threshold_mode not in ("constant", "strict"):
        raise ValueError(f"unknown threshold mode {threshold_mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != snn.input_shape:
        raise EncodingError(f"input shape {x.shape} != expected {snn.input_shape}")
    jitter_sd = 0.0 if noise is None else noise.jitter_sd
    if jitter_sd > 0.0 and rng is None:
        rng = np.random.default_rng(noise.seed)
    if alpha_offsets is None:
        alpha_offsets = _alpha_offsets(snn, noise)

    def emit_jitter(times: np.ndarray, forced: np.ndarray) -> np.ndarray:
        if jitter_sd == 0.0:
            return times
        jit = rng.normal(0.0, jitter_sd, times.shape)
        if sparse:
            # forced units emit nothing; their reference time stays exact
            jit = np.where(forced, 0.0, jit)
        return times + jit

    in_times = encode_input(x)
    in_forced = np.zeros_like(in_times, dtype=bool)
    in_times = emit_jitter(in_times, in_forced)

    records: list[LayerTrace] = []
    cur_times = in_times
    cur_forced = in_forced
    window = snn.t_input
    early = 0
    invalid = False
    hidden_idx = 0
    for lay in snn.layers[:-1]:
        if isinstance(lay, SnnFlatten):
            cur_times = cur_times.reshape(-1)
            cur_forced = cur_forced.reshape(-1)
            records.append(LayerTrace(cur_times, cur_forced, window[0], window[1],
                                      counts_spikes=False))
            continue
        if isinstance(lay, SnnPool):
            cur_times, cur_forced = _pool_times(lay, cur_times, cur_forced)
            cur_times = emit_jitter(cur_times, cur_forced)
            records.append(LayerTrace(cur_times, cur_forced, lay.t_min, lay.t_max))
            continue
        alpha = lay.alpha
        if alpha_offsets is not None:
            alpha = alpha + alpha_offsets[hidden_idx]
            if np.any(alpha + lay.weight_sums() <= 0.0):
                invalid = True
        scan_start = lay.t_start if threshold_mode == "constant" else lay.t_min
        if isinstance(lay, SnnDense):
            times = np.concatenate([[lay.t_start], cur_times.reshape(-1)])
            incr = np.concatenate([alpha[:, None], lay.weights], axis=1)
            fire, natural = first_crossings(times, incr, lay.theta,
                                            scan_start, lay.t_max)
        else:
            fire, natural = _conv_crossings(lay, alpha, cur_times, scan_start)
        fire = fire.reshape(lay.theta.shape)
        natural = natural.reshape(lay.theta.shape)
        early += int(np.sum(natural & (fire < lay.t_min)))
        forced = ~natural
        fire = emit_jitter(fire, forced)
        records.append(LayerTrace(fire, forced, lay.t_min, lay.t_max))
        cur_times, cur_forced = fire, forced
        window = (lay.t_min, lay.t_max)
        hidden_idx += 1

    readout = snn.readout
    contrib = readout.t_max - cur_times.reshape(-1)
    if sparse:
        contrib = np.where(cur_forced.reshape(-1), 0.0, contrib)
    contrib = np.maximum(contrib, 0.0)   # late jittered arrivals contribute nothing
    potentials = (readout.alpha * (readout.t_max - readout.t_min)
                  + readout.weights @ contrib)

    trace = SpikeTrace(
        layers=records,
        input_times=in_times,
        readout_potentials=potentials,
        sparse=sparse,
        early_crossings=early,
        invalid_slope=invalid,
    )
    _count_spikes(trace, snn)
    return trace


def _pool_times(lay: SnnPool, times: np.ndarray, forced: np.ndarray):
    """Pooling-unit firing: first input spike for max pool, last for min pool."""
    c, h, w = times.shape
    k = lay.window
    win_t = times.reshape(c, h // k, k, w // k, k)
    first = win_t.min(axis=(2, 4))
    last = win_t.max(axis=(2, 4))
    is_min = (lay.modes == POOL_MIN)[:, None, None]
    out_t = np.where(is_min, last, first)
    win_f = forced.reshape(c, h // k, k, w // k, k)
    out_f = np.where(is_min, win_f.any(axis=(2, 4)), win_f.all(axis=(2, 4)))
    return out_t, out_f


def simulate_mmp_unit(times: np.ndarray, k: float, theta: float = 1.0) -> float:
    """Event simulation of a single pooling unit: charge k per input spike.

    The unit fires at the input spike that lifts the accumulated charge over
    the threshold.
    """
    order = np.sort(np.asarray(times, dtype=np.float64))
    charge = 0.0
    for t in order:
        charge += k
        if charge >= theta:
            return float(t)
    raise ArithmeticError("pooling unit never reached threshold")


def _conv_crossings(lay: SnnConv, alpha: np.ndarray, in_times: np.ndarray,
                    scan_start: float):
    """Crossing solve for a conv layer, vectorized over output locations.

    Padded taps stay in the patch matrix with a zero increment, which leaves
    every sum untouched; sorting happens once per location and is shared by
    the output channels.
    """
    kh, kw = lay.kernel.shape[2], lay.kernel.shape[3]
    tmap = pad_input(in_times[None], lay.padding)
    patches = im2col(tmap, (kh, kw), lay.stride)[0]           # [L, K]
    mask_img = np.ones((lay.kernel.shape[1],) + lay.in_hw)
    mask = im2col(pad_input(mask_img[None], lay.padding), (kh, kw), lay.stride)[0]
    out_ch = lay.kernel.shape[0]
    n_loc = patches.shape[0]
    kflat = lay.kernel.reshape(out_ch, -1)
    times = np.concatenate([np.full((n_loc, 1), lay.t_start), patches], axis=1)
    order = np.argsort(times, axis=1, kind="stable")
    s = np.take_along_axis(times, order, axis=1)
    alpha = np.broadcast_to(alpha, lay.theta.shape)
    fires = np.empty((out_ch, n_loc))
    naturals = np.empty((out_ch, n_loc), dtype=bool)
    for c in range(out_ch):
        jrow = (kflat[c][None, :] * mask) * lay.jscale[c].reshape(-1, 1)
        incr = np.concatenate([alpha[c].reshape(-1, 1), jrow], axis=1)
        j = np.take_along_axis(incr, order, axis=1)
        fires[c], naturals[c] = _crossings_sorted(
            s, j, lay.theta[c].reshape(-1), scan_start, lay.t_max)
    oh, ow = lay.theta.shape[1], lay.theta.shape[2]
    return fires.reshape(out_ch, oh, ow), naturals.reshape(out_ch, oh, ow)


def _count_spikes(trace: SpikeTrace, snn: SnnNetwork):
    hidden_natural = 0
    hidden_total = 0
    emitted = 0
    for rec, lay in zip(trace.layers, snn.layers):
        if isinstance(lay, (SnnDense, SnnConv)):
            hidden_natural += int(np.sum(~rec.forced))
            hidden_total += rec.forced.size
        if not rec.counts_spikes:
            continue
        if trace.sparse:
            emitted += int(np.sum(~rec.forced))
        else:
            emitted += rec.forced.size
    trace.hidden_natural = hidden_natural
    trace.hidden_total = hidden_total
    trace.spike_count = emitted + trace.input_times.size


def snn_predict(snn: SnnNetwork, x: np.ndarray, noise: NoiseSpec | None = None,
                sparse: bool = False, **kw) -> int:
    """Class with the largest readout potential; ties go to the lowest index."""
    trace = simulate_event(snn, x, noise=noise, sparse=sparse, **kw)
    return int(np.argmax(trace.readout_potentials))
