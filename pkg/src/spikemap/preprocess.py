"""Lossless network preprocessing ahead of the spiking conversion.

Four rewrites, all preserving the network function exactly:

  1. batchnorm placed before the ReLU is folded into the preceding layer;
  2. batchnorm placed after the ReLU is folded into the next parameterized
     layer, with two convolutional corner cases: zero padding turns the bias
     into a per-location tensor (padded taps must not receive the BN shift),
     and a pooling stage in between flips max to min pooling on channels
     whose BN scale is negative;
  3. inputs in an arbitrary range [p, q] are renormalized to [0, 1] by
     absorbing the affine change into the first layer;
  4. per-neuron ReLU rescaling: exploiting relu(a) = C * relu(a / C) for
     C > 0, incoming weight sums are brought into [-b_low, 1 - delta] so the
     spiking trajectories later have usable slopes.

The rescaling factors are recorded so layer outputs of the scaled network can
be mapped back to the unscaled ones, and a calibration pass records the
maximum output per hidden layer, which later sizes the spiking time windows.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .layers import (
    BN_AFTER_RELU,
    BN_BEFORE_RELU,
    POOL_MAX,
    POOL_MIN,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    Pool2d,
    StructureError,
)
from .network import ReluNetwork, conv2d_fast, forward_batch


@dataclass
class Hyper:
    """Pipeline hyperparameters, all overridable from the CLI."""
    delta: float = 0.01
    b_low: float = 10.0
    zeta: float = 0.5
    window_floor: float = 1e-6   # lower clamp for the spiking window of a dead layer

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.b_low <= 0.0:
            raise ValueError(f"b_low must be positive, got {self.b_low}")
        if self.zeta <= -1.0:
            raise ValueError(f"zeta must be > -1, got {self.zeta}")
        if self.window_floor <= 0.0:
            raise ValueError(f"window_floor must be positive, got {self.window_floor}")


@dataclass
class ScaledNetwork:
    """BN-free, input-normalized, weight-rescaled network plus calibration."""
    net: ReluNetwork
    scale_factors: list[np.ndarray]          # per hidden layer, per neuron/channel
    hyper: Hyper
    source_range: tuple[float, float]        # input range of the original network
    layer_max: list[float] | None = None     # per hidden layer, from calibrate()

    def normalize_input(self, x: np.ndarray) -> np.ndarray:
        p, q = self.source_range
        return (np.asarray(x, dtype=np.float64) - p) / (q - p)


def _conv_shift_bias(lay: Conv2d, in_hw: tuple[int, int], shift: np.ndarray) -> np.ndarray:
    """Per-location sum of shift[c] * w over non-padded taps, [out_ch, oh, ow].

    Implemented as the response of a bias-free copy of the layer to an input
    that is constant per channel; zero padding then excludes exactly the
    padded taps from each location's sum.
    """
    img = np.broadcast_to(shift[:, None, None], (lay.in_channels,) + tuple(in_hw))
    probe = Conv2d(
        weights=lay.weights,
        bias=np.zeros(lay.out_channels),
        stride=lay.stride,
        padding=lay.padding,
        relu=False,
    )
    return conv2d_fast(np.ascontiguousarray(img)[None], probe)[0]


def _add_conv_bias(lay: Conv2d, correction: np.ndarray):
    """Add a per-location correction to a conv bias, widening it if needed."""
    if np.all(correction == correction[:, :1, :1]):
        flat = correction[:, 0, 0]
        if lay.bias.ndim == 1:
            lay.bias = lay.bias + flat
        else:
            lay.bias = lay.bias + flat[:, None, None]
        return
    if lay.bias.ndim == 1:
        lay.bias = lay.bias[:, None, None] + correction
    else:
        lay.bias = lay.bias + correction


def _input_shapes(net: ReluNetwork) -> list[tuple[int, ...]]:
    """Input shape of every layer (index i = what layer i consumes)."""
    return [net.input_shape] + net.layer_shapes()[:-1]


def fuse_bn_before_relu(net: ReluNetwork) -> ReluNetwork:
    """Fold every batchnorm that precedes its ReLU into the layer before it."""
    net = copy.deepcopy(net)
    layers = []
    i = 0
    while i < len(net.layers):
        lay = net.layers[i]
        nxt = net.layers[i + 1] if i + 1 < len(net.layers) else None
        if isinstance(nxt, BatchNorm) and nxt.position == BN_BEFORE_RELU:
            if not isinstance(lay, (Dense, Conv2d)):
                raise StructureError(
                    f"layer {i + 1}: batchnorm before ReLU must follow Dense/Conv2d"
                )
            kap = nxt.kappa()
            if isinstance(lay, Dense):
                lay.bias = kap * (lay.bias - nxt.mu) + nxt.beta
                lay.weights = lay.weights * kap[:, None]
            else:
                if lay.bias.ndim == 1:
                    lay.bias = kap * (lay.bias - nxt.mu) + nxt.beta
                else:
                    lay.bias = (kap[:, None, None] * (lay.bias - nxt.mu[:, None, None])
                                + nxt.beta[:, None, None])
                lay.weights = lay.weights * kap[:, None, None, None]
            layers.append(lay)
            i += 2
            continue
        layers.append(lay)
        i += 1
    return ReluNetwork(layers, net.input_shape, net.input_range)


def fuse_bn_after_relu(net: ReluNetwork) -> ReluNetwork:
    """Fold every batchnorm that follows its ReLU into the next layer.

    The walk from the batchnorm may cross pooling and flatten stages; pooling
    channels with a negative BN scale switch between max and min pooling.
    The bias must be corrected before the weights are scaled.
    """
    net = copy.deepcopy(net)
    shapes = _input_shapes(net)   # BN layers preserve shapes, still valid after removal
    layers = list(net.layers)
    keep = [True] * len(layers)
    for i, lay in enumerate(layers):
        if not (isinstance(lay, BatchNorm) and lay.position == BN_AFTER_RELU):
            continue
        kap = lay.kappa()
        shift = lay.beta - kap * lay.mu
        j = i + 1
        while j < len(layers) and isinstance(layers[j], (Pool2d, Flatten)):
            if isinstance(layers[j], Pool2d):
                modes = layers[j].modes_for(lay.channels).copy()
                flip = kap < 0
                modes[flip] = np.where(modes[flip] == POOL_MAX, POOL_MIN, POOL_MAX)
                layers[j].modes = modes
            j += 1
        if j >= len(layers) or not isinstance(layers[j], (Dense, Conv2d)):
            raise StructureError(
                f"layer {i}: batchnorm after ReLU has no following Dense/Conv2d to fuse into"
            )
        target = layers[j]
        if isinstance(target, Dense):
            reps, rem = divmod(target.in_features, lay.channels)
            if rem:
                raise StructureError(
                    f"layer {j}: dense width {target.in_features} not a multiple of "
                    f"{lay.channels} bn channels"
                )
            kap_flat = np.repeat(kap, reps)
            shift_flat = np.repeat(shift, reps)
            target.bias = target.bias + target.weights @ shift_flat
            target.weights = target.weights * kap_flat[None, :]
        else:
            in_hw = shapes[j][1:]
            correction = _conv_shift_bias(target, in_hw, shift)
            _add_conv_bias(target, correction)
            target.weights = target.weights * kap[None, :, None, None]
        keep[i] = False
    kept = [l for l, k in zip(layers, keep) if k]
    return ReluNetwork(kept, net.input_shape, net.input_range)


def normalize_input_range(net: ReluNetwork) -> ReluNetwork:
    """Rewrite the first layer so the network expects inputs in [0, 1].

    The transformed network applied to (x - p)/(q - p) computes exactly what
    the original computes on x; for a zero-padded first convolution the bias
    offset is restricted to non-padded taps, per location.
    """
    p, q = net.input_range
    if q <= p:
        raise StructureError(f"degenerate input range [{p}, {q}]")
    if (p, q) == (0.0, 1.0):
        return copy.deepcopy(net)
    net = copy.deepcopy(net)
    first = net.layers[0]
    if isinstance(first, Dense):
        first.bias = first.bias + p * first.weights.sum(axis=1)
        first.weights = first.weights * (q - p)
    elif isinstance(first, Conv2d):
        shift = np.full(first.in_channels, float(p))
        correction = _conv_shift_bias(first, net.input_shape[1:], shift)
        _add_conv_bias(first, correction)
        first.weights = first.weights * (q - p)
    else:
        raise StructureError("first layer must be Dense/Conv2d for input normalization")
    return ReluNetwork(net.layers, net.input_shape, (0.0, 1.0))


def incoming_weight_sums(net: ReluNetwork, index: int) -> np.ndarray:
    """Sum of incoming weights per neuron of a parameterized layer.

    Dense: per-neuron row sums, shape [out].
    Conv:  per-location sums over non-padded taps, shape [out_ch, oh, ow];
           interior locations all equal the plain kernel sum.
    """
    lay = net.layers[index]
    if isinstance(lay, Dense):
        return lay.weights.sum(axis=1)
    if isinstance(lay, Conv2d):
        in_hw = _input_shapes(net)[index][1:]
        return _conv_shift_bias(lay, in_hw, np.ones(lay.in_channels))
    raise StructureError(f"layer {index} has no weights")


def _next_param_index(net: ReluNetwork, index: int) -> int:
    j = index + 1
    while j < len(net.layers) and isinstance(net.layers[j], (Pool2d, Flatten)):
        j += 1
    if j >= len(net.layers) or not isinstance(net.layers[j], (Dense, Conv2d)):
        raise StructureError(f"no parameterized layer downstream of layer {index}")
    return j


def _scale_outgoing(net: ReluNetwork, index: int, inv_factor: np.ndarray):
    """Multiply the downstream layer's weights per input channel/neuron."""
    target = net.layers[_next_param_index(net, index)]
    if isinstance(target, Dense):
        reps = target.in_features // inv_factor.shape[0]
        col = np.repeat(inv_factor, reps)
        target.weights = target.weights * col[None, :]
    else:
        target.weights = target.weights * inv_factor[None, :, None, None]


def rescale_weights(net: ReluNetwork, delta: float,
                    b_low: float) -> tuple[ReluNetwork, list[np.ndarray]]:
    """Bring every hidden neuron's incoming weight sum into [-b_low, 1 - delta].

    Layer by layer from input to output: a violating neuron's incoming
    weights and bias shrink by a positive factor and its outgoing weights
    grow by the inverse, so the network function is unchanged. For a conv
    channel the factor is shared by all spatial locations (pooling windows
    mix locations, so a per-location factor could not be compensated
    downstream); the binding location sets it. The readout layer is exempt.

    Returns the rewritten network and the per-layer scale factors, i.e. the
    factor by which each neuron's outputs shrank relative to the input net.
    """
    net = copy.deepcopy(net)
    if any(isinstance(l, BatchNorm) for l in net.layers):
        raise StructureError("rescale_weights expects a BN-free network")
    factors: list[np.ndarray] = []
    for index in net.hidden_param_indices():
        lay = net.layers[index]
        total = np.ones(lay.weights.shape[0])
        # extra passes shave off float dust after the first multiplication
        for attempt in range(8):
            sums = incoming_weight_sums(net, index)
            if isinstance(lay, Dense):
                hi = lo = sums
            else:
                hi = sums.max(axis=(1, 2))
                lo = sums.min(axis=(1, 2))
            margin = 1.0 - 1e-15 * attempt
            factor = np.ones_like(total)
            over = hi > (1.0 - delta)
            factor[over] = (1.0 - delta) / hi[over] * margin
            under = lo < -b_low
            factor[under] = np.minimum(factor[under], b_low / np.abs(lo[under]) * margin)
            if np.all(factor == 1.0):
                break
            if isinstance(lay, Dense):
                lay.weights = lay.weights * factor[:, None]
                lay.bias = lay.bias * factor
            else:
                lay.weights = lay.weights * factor[:, None, None, None]
                if lay.bias.ndim == 1:
                    lay.bias = lay.bias * factor
                else:
                    lay.bias = lay.bias * factor[:, None, None]
            _scale_outgoing(net, index, 1.0 / factor)
            total = total * factor
        else:
            raise ArithmeticError(f"layer {index}: weight rescaling did not settle")
        factors.append(total)
    return net, factors


def check_weight_sum_bounds(net: ReluNetwork, delta: float, b_low: float) -> bool:
    """Whether every hidden neuron's incoming weight sum is in [-b_low, 1 - delta]."""
    for index in net.hidden_param_indices():
        sums = incoming_weight_sums(net, index)
        if sums.max() > 1.0 - delta or sums.min() < -b_low:
            return False
    return True


def preprocess(net: ReluNetwork, hyper: Hyper | None = None) -> ScaledNetwork:
    """Full phase-1 pipeline: normalize input, fuse BN, rescale weights."""
    hyper = hyper or Hyper()
    source_range = net.input_range
    work = normalize_input_range(net)
    work = fuse_bn_before_relu(work)
    work = fuse_bn_after_relu(work)
    work, factors = rescale_weights(work, hyper.delta, hyper.b_low)
    return ScaledNetwork(
        net=work,
        scale_factors=factors,
        hyper=hyper,
        source_range=source_range,
    )


def recover_original(scaled: ScaledNetwork, layer: int, values: np.ndarray) -> np.ndarray:
    """Map activations/outputs of the scaled network back to unscaled ones.

    `layer` is the 1-based hidden layer ordinal; the inverse of the rescaling
    is a per-neuron (dense) or per-channel (conv) division.
    """
    if not 1 <= layer <= len(scaled.scale_factors):
        raise IndexError(f"unknown hidden layer ordinal {layer}")
    factor = scaled.scale_factors[layer - 1]
    values = np.asarray(values, dtype=np.float64)
    if values.ndim >= 3:
        return values / factor[:, None, None]
    return values / factor


def calibrate(scaled: ScaledNetwork, samples: np.ndarray, batch: int = 256) -> list[float]:
    """Record the maximum output of each hidden layer over a sample set.

    Samples are expected in the scaled network's [0, 1] input convention.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == len(scaled.net.input_shape):
        samples = samples[None]
    if samples.shape[0] == 0:
        raise ValueError("calibration requires at least one sample")
    hidden = scaled.net.hidden_param_indices()
    maxima = np.zeros(len(hidden))
    for start in range(0, samples.shape[0], batch):
        trace = forward_batch(scaled.net, samples[start:start + batch])
        for k, idx in enumerate(hidden):
            maxima[k] = max(maxima[k], float(trace.outputs[idx].max()))
    scaled.layer_max = [float(m) for m in maxima]
    return scaled.layer_max
