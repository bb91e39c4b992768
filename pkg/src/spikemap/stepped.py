"""Brute-force time-stepped simulator, the cross-check for the event engine.

Forward Euler on a fixed global grid t_k = k * dt: each unit's potential
accumulates dt times the current slope, each arrival takes effect from the
grid point nearest to it, and the threshold crossing is read off the grid by
linear interpolation inside the first cell whose endpoint reaches the
threshold. The constant drive term, known in closed form, integrates
exactly. Discretization error is therefore first order in dt with no
systematic per-layer lag; reporting crossings at the raw grid point instead
would bias every layer a full step late and the accumulated discrepancy
could not stay within one dt of the event engine. Nothing here shares code
with the closed-form engine beyond the network definition itself.
"""

from __future__ import annotations

import math

import numpy as np

from .convert import SnnConv, SnnDense, SnnFlatten, SnnNetwork, SnnPool
from .layers import POOL_MIN
from .network import im2col, pad_input
from .simulate import LayerTrace, SpikeTrace, _count_spikes, encode_input


def _euler_crossings(arrivals: np.ndarray, weights: np.ndarray, alpha: np.ndarray,
                     theta: np.ndarray, t_start: float, t_max: float,
                     dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Grid-resolved threshold crossings for a bank of integrate-and-fire units.

    arrivals [R, K] or [K] shared, weights [R, K], alpha/theta [R]. The grid
    covers [t_start, t_max] plus one step; step currents switch on at the
    grid point nearest their arrival, the drive integrates exactly, and the
    crossing is interpolated inside the bracketing cell. Units that never
    cross by t_max fire a forced spike at exactly t_max.
    """
    weights = np.atleast_2d(weights)
    rows = weights.shape[0]
    if arrivals.ndim == 1:
        arrivals = np.broadcast_to(arrivals, (rows, arrivals.size))
    k_lo = math.floor(t_start / dt)
    nsteps = math.floor(t_max / dt) + 2 - k_lo
    grid = (k_lo + np.arange(nsteps)) * dt
    # step-current slope per grid cell, assembled via a difference array
    dslope = np.zeros((rows, nsteps))
    idx = np.rint(arrivals / dt).astype(np.int64) - k_lo
    inside = (idx > 0) & (idx < nsteps)
    np.add.at(dslope, (np.broadcast_to(np.arange(rows)[:, None], idx.shape)[inside],
                       idx[inside]), weights[inside])
    before = idx <= 0                                    # already on at grid start
    if np.any(before):
        dslope[:, 0] += np.where(before, weights, 0.0).sum(axis=1)
    slope = np.cumsum(dslope, axis=1)
    v = np.zeros((rows, nsteps))
    v[:, 1:] = np.cumsum(slope[:, :-1], axis=1) * dt     # V(t_{k+1}) = V(t_k)+dt*f(t_k)
    v += alpha[:, None] * np.maximum(grid - t_start, 0.0)[None, :]
    crossed = v >= theta[:, None]
    has = crossed.any(axis=1)
    first = np.argmax(crossed, axis=1)
    lo = np.maximum(first - 1, 0)
    v_lo = np.take_along_axis(v, lo[:, None], axis=1)[:, 0]
    v_hi = np.take_along_axis(v, first[:, None], axis=1)[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = (theta - v_lo) / (v_hi - v_lo)
    frac = np.clip(np.where(np.isfinite(frac), frac, 0.0), 0.0, 1.0)
    fire = np.where(has, grid[lo] + frac * dt, np.inf)
    natural = has & (fire <= t_max)
    return np.where(natural, fire, t_max), natural


def simulate_stepped(snn: SnnNetwork, x: np.ndarray, dt: float) -> SpikeTrace:
    """Run one input through the network on a fixed time grid."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    in_times = encode_input(np.asarray(x, dtype=np.float64))
    cur_times = in_times
    cur_forced = np.zeros_like(in_times, dtype=bool)
    records: list[LayerTrace] = []
    window = snn.t_input
    for lay in snn.layers[:-1]:
        if isinstance(lay, SnnFlatten):
            cur_times = cur_times.reshape(-1)
            cur_forced = cur_forced.reshape(-1)
            records.append(LayerTrace(cur_times, cur_forced, window[0], window[1],
                                      counts_spikes=False))
            continue
        if isinstance(lay, SnnPool):
            cur_times, cur_forced = _stepped_pool(lay, cur_times, cur_forced, dt)
            records.append(LayerTrace(cur_times, cur_forced, lay.t_min, lay.t_max))
            continue
        if isinstance(lay, SnnDense):
            fire, natural = _euler_crossings(
                cur_times.reshape(-1), lay.weights, lay.alpha, lay.theta,
                lay.t_start, lay.t_max, dt)
        else:
            fire, natural = _stepped_conv(lay, cur_times, dt)
        fire = fire.reshape(lay.theta.shape)
        forced = ~natural.reshape(lay.theta.shape)
        records.append(LayerTrace(fire, forced, lay.t_min, lay.t_max))
        cur_times, cur_forced = fire, forced
        window = (lay.t_min, lay.t_max)

    readout = snn.readout
    k_lo = math.floor(readout.t_min / dt)
    k_hi = math.floor(readout.t_max / dt)
    grid = np.arange(k_lo, k_hi + 1) * dt
    flat = cur_times.reshape(-1)
    # step currents via Euler over the window, plus the partial final step;
    # the constant drive integrates without discretization ambiguity
    steps = dt * (grid[:-1][None, :] > flat[:, None]).sum(axis=1)
    tail = readout.t_max - grid[-1]
    if tail > 0:
        steps = steps + tail * (grid[-1] > flat)
    potentials = (readout.alpha * (readout.t_max - readout.t_min)
                  + readout.weights @ steps)

    trace = SpikeTrace(
        layers=records,
        input_times=in_times,
        readout_potentials=potentials,
        sparse=False,
        early_crossings=0,
    )
    _count_spikes(trace, snn)
    return trace


def _stepped_pool(lay: SnnPool, times: np.ndarray, forced: np.ndarray, dt: float):
    """Charge-per-spike pooling units on the grid.

    A unit fires at the first grid time by which the accumulated charge
    reaches the threshold; all-forced windows fall back to exactly t_max.
    """
    c, h, w = times.shape
    k = lay.window
    win_t = times.reshape(c, h // k, k, w // k, k)
    win_f = forced.reshape(c, h // k, k, w // k, k)
    needed = np.where(lay.modes == POOL_MIN,
                      np.ceil(lay.theta / lay.k).astype(np.int64),
                      1)
    out_t = np.empty((c, h // k, w // k))
    out_f = np.empty((c, h // k, w // k), dtype=bool)
    for ch in range(c):
        flat_t = win_t[ch].transpose(0, 2, 1, 3).reshape(-1, k * k)
        flat_f = win_f[ch].transpose(0, 2, 1, 3).reshape(-1, k * k)
        srt = np.sort(flat_t, axis=1)
        nth = srt[:, needed[ch] - 1]
        fire = np.rint(nth / dt) * dt                     # charge lands on nearest grid point
        fire = np.minimum(fire, lay.t_max)
        if lay.modes[ch] == POOL_MIN:
            fallback = flat_f.any(axis=1)
        else:
            fallback = flat_f.all(axis=1)
        fire = np.where(fallback, lay.t_max, fire)
        out_t[ch] = fire.reshape(h // k, w // k)
        out_f[ch] = fallback.reshape(h // k, w // k)
    return out_t, out_f


def _stepped_conv(lay: SnnConv, in_times: np.ndarray, dt: float):
    kh, kw = lay.kernel.shape[2], lay.kernel.shape[3]
    tmap = pad_input(in_times[None], lay.padding)
    patches = im2col(tmap, (kh, kw), lay.stride)[0]
    mask_img = np.ones((lay.kernel.shape[1],) + lay.in_hw)
    mask = im2col(pad_input(mask_img[None], lay.padding), (kh, kw), lay.stride)[0]
    out_ch = lay.kernel.shape[0]
    oh, ow = lay.theta.shape[1], lay.theta.shape[2]
    alpha = np.broadcast_to(lay.alpha, lay.theta.shape)
    fires = np.empty((out_ch, oh * ow))
    naturals = np.empty((out_ch, oh * ow), dtype=bool)
    for c in range(out_ch):
        jrow = (lay.kernel[c].reshape(-1)[None, :] * mask) * lay.jscale[c].reshape(-1, 1)
        fires[c], naturals[c] = _euler_crossings(
            patches, jrow, alpha[c].reshape(-1), lay.theta[c].reshape(-1),
            lay.t_start, lay.t_max, dt)
    return fires.reshape(out_ch, oh, ow), naturals.reshape(out_ch, oh, ow)
