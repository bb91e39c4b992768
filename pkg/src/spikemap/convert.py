"""Mapping of a scaled ReLU network to spiking parameters, and back.

Every hidden neuron becomes a non-leaky integrate-and-fire unit driven by a
constant slope alpha from the start of the previous layer's firing window and
by step currents J for each presynaptic spike. The firing window of layer n
is (t_min, t_max] with t_min equal to the previous layer's t_max and width
(1 + zeta) * X, where X is the calibrated maximum output of the layer. The
weight map

    J_ij = alpha_i * w_ij / (1 - sum_j w_ij)

together with the threshold

    theta_i = alpha_i * (t_max - t_start) + B * sum_j J_ij
              - (alpha_i + sum_j J_ij) * b_i

makes the firing time encode the ReLU output as t_max - t. Three choices of
the free slope are provided: a fixed slope of one, a per-neuron slope that
keeps the spiking weights identical to the ReLU weights, and a per-layer
slope large enough that trajectories never dip even before the window opens.

Zero-padded convolutions get per-location parameters: border neurons see
fewer inputs, so their weight sums, thresholds, and J scales differ from the
interior ones. Pooling stages become units that fire on their first (max
pool) or last (min pool) input spike via intra-layer pulse couplings K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    POOL_MIN,
    Conv2d,
    Dense,
    Flatten,
    Pool2d,
    StructureError,
)
from .preprocess import ScaledNetwork, incoming_weight_sums

VARIANTS = ("fixed_alpha", "identical_weights", "positive_slope")

POOL_THETA = 1.0            # pooling-unit threshold; only the K/theta ratio matters
POOL_K_MARGIN = 1e-6        # relative excess of K over theta for max-pool units
ALPHA_MARGIN = 0.1          # slack in the always-positive-slope condition


class ConversionError(ValueError):
    """A precondition of the spiking conversion is violated."""


@dataclass
class SnnDense:
    weights: np.ndarray      # J, [out, in]
    theta: np.ndarray        # [out]
    alpha: np.ndarray        # [out]
    t_start: float           # integration onset = previous window's t_min
    t_min: float
    t_max: float

    def weight_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1)


@dataclass
class SnnConv:
    kernel: np.ndarray       # scaled ReLU kernel, [out_ch, in_ch, kh, kw]
    jscale: np.ndarray       # per-location J multiplier, [out_ch, oh, ow]
    theta: np.ndarray        # [out_ch, oh, ow]
    alpha: np.ndarray        # [out_ch, oh, ow]
    stride: int
    padding: tuple[int, int, int, int]
    in_hw: tuple[int, int]
    t_start: float
    t_min: float
    t_max: float
    wsum: np.ndarray = None  # per-location scaled weight sums, [out_ch, oh, ow]

    def weight_sums(self) -> np.ndarray:
        """Per-location sum of J over connected taps."""
        return self.jscale * self.wsum


@dataclass
class SnnPool:
    window: int
    stride: int
    modes: np.ndarray        # per channel POOL_MAX / POOL_MIN
    k: np.ndarray            # per-channel pulse charge
    theta: float
    t_min: float             # window shared with the source layer
    t_max: float


@dataclass
class SnnFlatten:
    pass


@dataclass
class SnnReadout:
    weights: np.ndarray      # scaled ReLU readout weights, [out, in]
    alpha: np.ndarray        # bias / window length, [out]
    t_min: float
    t_max: float


SnnLayer = SnnDense | SnnConv | SnnPool | SnnFlatten | SnnReadout


@dataclass
class SnnNetwork:
    layers: list[SnnLayer]
    input_shape: tuple[int, ...]
    variant: str
    t_input: tuple[float, float] = (0.0, 1.0)

    def hidden_layers(self) -> list[SnnDense | SnnConv]:
        return [l for l in self.layers[:-1] if isinstance(l, (SnnDense, SnnConv))]

    @property
    def readout(self) -> SnnReadout:
        return self.layers[-1]

    @property
    def t_last(self) -> float:
        """End of the readout integration, the total processing time."""
        return self.readout.t_max

    def n_hidden_neurons(self) -> int:
        total = 0
        for lay in self.hidden_layers():
            total += lay.theta.size
        return total


def _exact_complement(c: np.ndarray) -> np.ndarray:
    """alpha = 1 - c adjusted so that alpha + c rounds to exactly 1.0.

    Plain 1 - c can leave the sum an ulp off; a residual correction plus a
    one-ulp search settles every c > -1 (the identical-weights variant
    advertises a trajectory slope of exactly one). For c <= -1 the sum
    alpha + c is computed exactly (Sterbenz), so no double alpha can land on
    1.0 unless 1 + |c| happens to be representable; the nearest value wins.
    """
    alpha = 1.0 - c
    for _ in range(4):
        s = alpha + c
        off = s != 1.0
        if not np.any(off):
            return alpha
        alpha[off] -= s[off] - 1.0
    flat_a = alpha.reshape(-1)
    flat_c = c.reshape(-1)
    for i in np.nonzero((flat_a + flat_c) != 1.0)[0]:
        down = up = flat_a[i]
        for _ in range(4):
            down = np.nextafter(down, -np.inf)
            up = np.nextafter(up, np.inf)
            if down + flat_c[i] == 1.0:
                flat_a[i] = down
                break
            if up + flat_c[i] == 1.0:
                flat_a[i] = up
                break
    return alpha


def convert_pooling(pool: Pool2d, q: int, channels: int) -> tuple[np.ndarray, float]:
    """Pulse charges K per channel for a pooling stage with q inputs per unit.

    Max pool: K slightly above threshold, the first input spike fires the
    unit. Min pool: theta/q < K < theta/(q-1), the q-th (last) spike fires
    it; K sits at the midpoint of that open interval. A min pool over a
    single input degenerates to a max pool.
    """
    if q < 1:
        raise ConversionError(f"pooling unit needs at least one input, got {q}")
    k_max = POOL_THETA * (1.0 + POOL_K_MARGIN)
    if q == 1:
        k_min = k_max
    else:
        k_min = POOL_THETA * (2 * q - 1) / (2 * q * (q - 1))
    modes = pool.modes_for(channels)
    k = np.where(modes == POOL_MIN, k_min, k_max)
    return k, POOL_THETA


def _hidden_alpha(variant: str, wsum: np.ndarray, neg_ref: np.ndarray) -> np.ndarray:
    """Per-neuron slope for one hidden layer.

    `wsum` are the scaled incoming weight sums; `neg_ref` are the per-neuron
    sums of negative J under the reference slope of one.
    """
    if variant == "fixed_alpha":
        return np.ones_like(wsum)
    if variant == "identical_weights":
        return _exact_complement(np.array(wsum, dtype=np.float64, copy=True))
    if variant == "positive_slope":
        # scale-invariant condition: enforce it at the reference normalization
        layer_alpha = max(1.0, ALPHA_MARGIN - float(neg_ref.min()))
        return np.full_like(wsum, layer_alpha)
    raise ConversionError(f"unknown variant {variant!r}")


def convert(scaled: ScaledNetwork, variant: str = "fixed_alpha") -> SnnNetwork:
    """Compute the spiking network for a calibrated scaled ReLU network."""
    if variant not in VARIANTS:
        raise ConversionError(f"unknown variant {variant!r}; pick one of {VARIANTS}")
    if scaled.layer_max is None:
        raise ConversionError("scaled network is not calibrated; run calibrate() first")
    net = scaled.net
    hyper = scaled.hyper
    shapes = [net.input_shape] + net.layer_shapes()
    out: list[SnnLayer] = []
    t_min_prev, t_max_prev = 0.0, 1.0
    ordinal = 0
    for index, lay in enumerate(net.layers[:-1]):
        if isinstance(lay, Flatten):
            out.append(SnnFlatten())
            continue
        if isinstance(lay, Pool2d):
            channels = shapes[index][0]
            q = lay.window * lay.window
            k, theta = convert_pooling(lay, q, channels)
            out.append(SnnPool(
                window=lay.window, stride=lay.stride,
                modes=lay.modes_for(channels).copy(), k=k, theta=theta,
                t_min=t_min_prev, t_max=t_max_prev,
            ))
            continue
        # hidden Dense/Conv2d
        x_max = scaled.layer_max[ordinal]
        ordinal += 1
        window = max((1.0 + hyper.zeta) * x_max, hyper.window_floor)
        t_start = t_min_prev
        t_min = t_max_prev
        t_max = t_min + window
        wsum = incoming_weight_sums(net, index)
        if wsum.max() >= 1.0:
            where = int(np.argmax(wsum.reshape(-1)))
            raise ConversionError(
                f"layer {index}: neuron {where} has incoming weight sum "
                f"{wsum.reshape(-1)[where]:.6g} >= 1; rescale the network first"
            )
        if isinstance(lay, Dense):
            neg_ref = np.minimum(lay.weights, 0.0).sum(axis=1) / (1.0 - wsum)
            alpha = _hidden_alpha(variant, wsum, neg_ref)
            if variant == "identical_weights":
                weights = lay.weights.copy()
            else:
                weights = lay.weights * (alpha / (1.0 - wsum))[:, None]
            jsum = weights.sum(axis=1)
            theta = (alpha * (t_max - t_start) + window * jsum
                     - (alpha + jsum) * lay.bias)
            out.append(SnnDense(weights=weights, theta=theta, alpha=alpha,
                                t_start=t_start, t_min=t_min, t_max=t_max))
        else:
            in_hw = shapes[index][1:]
            neg = _negative_tap_sums(lay, in_hw)
            neg_ref = (neg / (1.0 - wsum)).reshape(-1)
            alpha = _hidden_alpha(variant, wsum, neg_ref)
            if variant == "identical_weights":
                jscale = np.ones_like(wsum)
            else:
                jscale = alpha / (1.0 - wsum)
            jsum = jscale * wsum
            bias = lay.bias if lay.bias.ndim == 3 else lay.bias[:, None, None]
            theta = (alpha * (t_max - t_start) + window * jsum
                     - (alpha + jsum) * bias)
            out.append(SnnConv(
                kernel=lay.weights.copy(), jscale=jscale, theta=theta, alpha=alpha,
                stride=lay.stride, padding=lay.padding, in_hw=tuple(in_hw),
                t_start=t_start, t_min=t_min, t_max=t_max, wsum=wsum,
            ))
        t_min_prev, t_max_prev = t_min, t_max
    readout = net.readout
    out.append(SnnReadout(
        weights=readout.weights.copy(),
        alpha=readout.bias / (t_max_prev - t_min_prev),
        t_min=t_min_prev,
        t_max=t_max_prev,
    ))
    return SnnNetwork(layers=out, input_shape=net.input_shape, variant=variant)


def _negative_tap_sums(lay: Conv2d, in_hw: tuple[int, int]) -> np.ndarray:
    """Per-location sums of negative kernel weights over connected taps."""
    probe = Conv2d(
        weights=np.minimum(lay.weights, 0.0),
        bias=np.zeros(lay.out_channels),
        stride=lay.stride,
        padding=lay.padding,
        relu=False,
    )
    from .preprocess import _conv_shift_bias
    return _conv_shift_bias(probe, in_hw, np.ones(lay.in_channels))


def inverse_weights(snn: SnnNetwork, layer: int) -> np.ndarray:
    """Recover scaled ReLU weights from hidden layer `layer` (1-based ordinal).

    w_ij = J_ij / (alpha_i + sum_j J_ij); the denominator is the trajectory
    slope once all inputs have arrived and must be positive.
    """
    hidden = snn.hidden_layers()
    if not 1 <= layer <= len(hidden):
        raise IndexError(f"unknown hidden layer ordinal {layer}")
    lay = hidden[layer - 1]
    slope = lay.alpha + lay.weight_sums()
    if np.any(slope <= 0.0):
        raise ConversionError(f"layer {layer}: non-positive slope after all arrivals")
    if isinstance(lay, SnnDense):
        return lay.weights / slope[:, None]
    # conv: every location recovers the same kernel; use the first location
    scale = (lay.jscale / slope).reshape(lay.jscale.shape[0], -1)[:, 0]
    return lay.kernel * scale[:, None, None, None]


def dynamical_threshold_view(snn: SnnNetwork, layer: int, neuron: int, t: float) -> float:
    """Threshold reinterpretation: theta_i - alpha_i * (t - t_start).

    A zero-slope unit compared against this decreasing threshold fires at
    the same times as the converted unit with its constant threshold.
    """
    hidden = snn.hidden_layers()
    if not 1 <= layer <= len(hidden):
        raise IndexError(f"unknown hidden layer ordinal {layer}")
    lay = hidden[layer - 1]
    theta = lay.theta.reshape(-1)[neuron]
    alpha = lay.alpha.reshape(-1)[neuron] if lay.alpha.size > 1 else float(lay.alpha)
    return float(theta - alpha * (t - lay.t_start))
