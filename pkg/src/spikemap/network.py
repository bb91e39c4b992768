"""ReLU network IR plus the reference inference engine.

The forward pass here is the ground truth against which every spiking run is
judged, so it stays deliberately simple: float64 throughout, channel-first
layout, and a direct-loop convolution kept alongside the vectorized one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    BN_AFTER_RELU,
    BN_BEFORE_RELU,
    POOL_MIN,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    Layer,
    Pool2d,
    StructureError,
)
from .tensor import Tensor


class ShapeError(ValueError):
    """Input or intermediate shape does not match the network structure."""


class NumericOverflowError(ArithmeticError):
    """A forward pass produced a non-finite intermediate value."""


@dataclass
class ReluNetwork:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    input_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.input_range = (float(self.input_range[0]), float(self.input_range[1]))
        self.validate()

    # -- structure ---------------------------------------------------------

    @property
    def readout(self) -> Dense:
        return self.layers[-1]

    def hidden_param_indices(self) -> list[int]:
        """Indices of hidden Dense/Conv2d layers, in network order."""
        return [
            i for i, lay in enumerate(self.layers[:-1])
            if isinstance(lay, (Dense, Conv2d))
        ]

    def validate(self):
        if not self.layers:
            raise StructureError("network has no layers")
        p, q = self.input_range
        if not q > p:
            raise StructureError(f"degenerate input range [{p}, {q}]")
        last = self.layers[-1]
        if not isinstance(last, Dense) or last.relu:
            raise StructureError("last layer must be a Dense readout without ReLU")
        for i, lay in enumerate(self.layers[:-1]):
            if isinstance(lay, (Dense, Conv2d)) and not lay.relu:
                raise StructureError(f"hidden layer {i} must apply ReLU")
            if isinstance(lay, BatchNorm) and lay.position == BN_BEFORE_RELU:
                if i == 0 or not isinstance(self.layers[i - 1], (Dense, Conv2d)):
                    raise StructureError(
                        f"layer {i}: batchnorm before ReLU must follow a Dense/Conv2d layer"
                    )
        self.layer_shapes()  # raises on incompatible shapes

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape after each layer (single sample, no batch axis)."""
        shape = self.input_shape
        shapes = []
        for i, lay in enumerate(self.layers):
            if isinstance(lay, Dense):
                if len(shape) != 1 or shape[0] != lay.in_features:
                    raise StructureError(
                        f"layer {i}: dense expects ({lay.in_features},), got {shape}"
                    )
                shape = (lay.out_features,)
            elif isinstance(lay, Conv2d):
                if len(shape) != 3 or shape[0] != lay.in_channels:
                    raise StructureError(
                        f"layer {i}: conv expects {lay.in_channels} channels, got {shape}"
                    )
                oh, ow = lay.out_hw(shape[1:])
                if lay.bias.ndim == 3 and lay.bias.shape != (lay.out_channels, oh, ow):
                    raise StructureError(
                        f"layer {i}: per-location bias {lay.bias.shape} != "
                        f"({lay.out_channels}, {oh}, {ow})"
                    )
                shape = (lay.out_channels, oh, ow)
            elif isinstance(lay, BatchNorm):
                if lay.channels != shape[0]:
                    raise StructureError(
                        f"layer {i}: bn over {lay.channels} channels, input has {shape[0]}"
                    )
            elif isinstance(lay, Pool2d):
                if len(shape) != 3:
                    raise StructureError(f"layer {i}: pool expects (C,H,W), got {shape}")
                lay.modes_for(shape[0])
                shape = (shape[0],) + lay.out_hw(shape[1:])
            elif isinstance(lay, Flatten):
                shape = (int(np.prod(shape)),)
            else:
                raise StructureError(f"layer {i}: unknown layer kind {type(lay).__name__}")
            shapes.append(shape)
        return shapes


@dataclass
class ForwardTrace:
    activations: list[np.ndarray | None]   # pre-ReLU values, param layers only
    outputs: list[np.ndarray]              # value leaving each layer
    logits: np.ndarray

    def __post_init__(self):
        pass


def pad_input(x: np.ndarray, padding: tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = padding
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def im2col(x: np.ndarray, kernel: tuple[int, int], stride: int) -> np.ndarray:
    """[B, C, H, W] -> [B, oh*ow, C*kh*kw] patch matrix."""
    kh, kw = kernel
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                # [B, C, oh, ow, kh, kw]
    b, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * kh * kw)


def conv2d_fast(x: np.ndarray, lay: Conv2d) -> np.ndarray:
    """Vectorized conv on a batch [B, C, H, W] via im2col + matmul."""
    xp = pad_input(x, lay.padding)
    kh, kw = lay.kernel
    oh = (xp.shape[2] - kh) // lay.stride + 1
    ow = (xp.shape[3] - kw) // lay.stride + 1
    patches = im2col(xp, lay.kernel, lay.stride)
    kmat = lay.weights.reshape(lay.out_channels, -1)
    out = patches @ kmat.T                             # [B, L, out_ch]
    out = out.transpose(0, 2, 1).reshape(x.shape[0], lay.out_channels, oh, ow)
    if lay.bias.ndim == 1:
        out += lay.bias[None, :, None, None]
    else:
        out += lay.bias[None]
    return out


def conv2d_direct(x: np.ndarray, lay: Conv2d) -> np.ndarray:
    """Loop convolution for one sample [C, H, W]; the slow, obvious version."""
    xp = pad_input(x[None], lay.padding)[0]
    kh, kw = lay.kernel
    oh = (xp.shape[1] - kh) // lay.stride + 1
    ow = (xp.shape[2] - kw) // lay.stride + 1
    out = np.empty((lay.out_channels, oh, ow))
    for o in range(lay.out_channels):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(lay.in_channels):
                    for u in range(kh):
                        for v in range(kw):
                            acc += lay.weights[o, c, u, v] * xp[c, i * lay.stride + u, j * lay.stride + v]
                if lay.bias.ndim == 1:
                    acc += lay.bias[o]
                else:
                    acc += lay.bias[o, i, j]
                out[o, i, j] = acc
    return out


def pool2d(x: np.ndarray, lay: Pool2d) -> np.ndarray:
    """Windowed max/min pooling with per-channel mode on a batch [B, C, H, W]."""
    b, c, h, w = x.shape
    k = lay.window
    win = x.reshape(b, c, h // k, k, w // k, k)
    mx = win.max(axis=(3, 5))
    mn = win.min(axis=(3, 5))
    modes = lay.modes_for(c)
    return np.where((modes == POOL_MIN)[None, :, None, None], mn, mx)


def forward_batch(net: ReluNetwork, x: np.ndarray, check: bool = True) -> ForwardTrace:
    """Run a batch [B, *input_shape] through the network.

    Returns per-layer pre-ReLU activations (param layers; post-BN when a
    batchnorm sits before the ReLU) and per-layer outputs; logits are the
    readout activations, softmax omitted since only the argmax is consumed.
    """
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != expected {net.input_shape}")
    activations: list[np.ndarray | None] = []
    outputs: list[np.ndarray] = []
    cur = np.ascontiguousarray(x, dtype=np.float64)
    skip_bn = False
    for i, lay in enumerate(net.layers):
        if isinstance(lay, BatchNorm) and skip_bn:
            # already folded into the preceding layer's activation below
            skip_bn = False
            activations.append(None)
            outputs.append(cur)
            continue
        if isinstance(lay, Dense):
            a = cur @ lay.weights.T + lay.bias
        elif isinstance(lay, Conv2d):
            a = conv2d_fast(cur, lay)
        elif isinstance(lay, BatchNorm):
            kap = lay.kappa()
            shift = lay.beta - kap * lay.mu
            if cur.ndim == 4:
                a = cur * kap[None, :, None, None] + shift[None, :, None, None]
            else:
                a = cur * kap + shift
        elif isinstance(lay, Pool2d):
            a = pool2d(cur, lay)
        elif isinstance(lay, Flatten):
            a = cur.reshape(cur.shape[0], -1)
        else:  # pragma: no cover - guarded by validate()
            raise StructureError(f"layer {i}: unknown kind")

        if isinstance(lay, (Dense, Conv2d)) and lay.relu:
            nxt = net.layers[i + 1] if i + 1 < len(net.layers) else None
            if isinstance(nxt, BatchNorm) and nxt.position == BN_BEFORE_RELU:
                kap = nxt.kappa()
                shift = nxt.beta - kap * nxt.mu
                if a.ndim == 4:
                    a = a * kap[None, :, None, None] + shift[None, :, None, None]
                else:
                    a = a * kap + shift
                skip_bn = True
            cur = np.maximum(a, 0.0)
            activations.append(a)
        else:
            cur = a
            activations.append(a if isinstance(lay, (Dense, Conv2d)) else None)
        if check and not np.all(np.isfinite(cur)):
            raise NumericOverflowError(f"non-finite values after layer {i}")
        outputs.append(cur)
    return ForwardTrace(activations=activations, outputs=outputs, logits=outputs[-1])


def relu_forward(net: ReluNetwork, x: Tensor | np.ndarray) -> ForwardTrace:
    """Reference forward pass for a single input."""
    arr = x.nd if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    trace = forward_batch(net, arr[None])
    return ForwardTrace(
        activations=[a[0] if a is not None else None for a in trace.activations],
        outputs=[o[0] for o in trace.outputs],
        logits=trace.logits[0],
    )


def predict(net: ReluNetwork, x: Tensor | np.ndarray) -> int:
    """Class index of the largest logit; ties resolve to the lowest index."""
    return int(np.argmax(relu_forward(net, x).logits))


def predict_batch(net: ReluNetwork, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward_batch(net, x).logits, axis=1)
