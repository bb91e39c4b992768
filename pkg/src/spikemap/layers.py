"""Layer IR for feedforward ReLU networks.

Conventions:
  * image tensors are channel-first ``(C, H, W)``
  * dense weights are ``[out, in]``; conv weights are ``[out_ch, in_ch, kh, kw]``
  * conv bias is per channel ``[out_ch]`` or, after padding-aware fusion steps,
    per output location ``[out_ch, oh, ow]``
  * pool mode is per channel: ``POOL_MAX`` (0) or ``POOL_MIN`` (1)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import check_finite

BN_BEFORE_RELU = "before_relu"
BN_AFTER_RELU = "after_relu"

POOL_MAX = 0
POOL_MIN = 1


class StructureError(ValueError):
    """Raised when the layer graph violates a structural invariant."""


@dataclass
class Dense:
    weights: np.ndarray          # [out, in]
    bias: np.ndarray             # [out]
    relu: bool = True

    def __post_init__(self):
        self.weights = check_finite(self.weights, "dense weights")
        self.bias = check_finite(self.bias, "dense bias")
        if self.weights.ndim != 2:
            raise StructureError(f"dense weights must be 2-d, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise StructureError(
                f"dense bias shape {self.bias.shape} does not match out={self.weights.shape[0]}"
            )

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]


@dataclass
class Conv2d:
    weights: np.ndarray          # [out_ch, in_ch, kh, kw]
    bias: np.ndarray             # [out_ch] or [out_ch, oh, ow]
    stride: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)   # top, bottom, left, right
    relu: bool = True

    def __post_init__(self):
        self.weights = check_finite(self.weights, "conv weights")
        self.bias = check_finite(self.bias, "conv bias")
        self.padding = tuple(int(p) for p in self.padding)
        if self.weights.ndim != 4:
            raise StructureError(f"conv weights must be 4-d, got {self.weights.shape}")
        if len(self.padding) != 4 or any(p < 0 for p in self.padding):
            raise StructureError(f"bad conv padding {self.padding}")
        if self.stride < 1:
            raise StructureError(f"bad conv stride {self.stride}")
        if self.bias.ndim not in (1, 3) or self.bias.shape[0] != self.weights.shape[0]:
            raise StructureError(
                f"conv bias shape {self.bias.shape} incompatible with out_ch={self.weights.shape[0]}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def out_hw(self, in_hw: tuple[int, int]) -> tuple[int, int]:
        kh, kw = self.kernel
        top, bottom, left, right = self.padding
        oh = (in_hw[0] + top + bottom - kh) // self.stride + 1
        ow = (in_hw[1] + left + right - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise StructureError(f"conv output collapses: input {in_hw}, kernel {self.kernel}")
        return oh, ow


@dataclass
class BatchNorm:
    mu: np.ndarray               # per channel
    sigma_sq: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5
    position: str = BN_BEFORE_RELU

    def __post_init__(self):
        for name in ("mu", "sigma_sq", "gamma", "beta"):
            setattr(self, name, check_finite(getattr(self, name), f"bn {name}"))
        n = self.mu.shape
        if not (self.sigma_sq.shape == n == self.gamma.shape == self.beta.shape) or self.mu.ndim != 1:
            raise StructureError("bn parameter vectors must share one per-channel shape")
        if np.any(self.sigma_sq < 0):
            raise StructureError("bn sigma_sq must be non-negative")
        if self.position not in (BN_BEFORE_RELU, BN_AFTER_RELU):
            raise StructureError(f"bad bn position {self.position!r}")

    @property
    def channels(self) -> int:
        return self.mu.shape[0]

    def kappa(self) -> np.ndarray:
        """Per-channel scale gamma / sqrt(sigma_sq + eps)."""
        return self.gamma / np.sqrt(self.sigma_sq + self.epsilon)


@dataclass
class Pool2d:
    window: int
    stride: int
    modes: np.ndarray = field(default=None)   # per channel POOL_MAX / POOL_MIN

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise StructureError("pool window/stride must be >= 1")
        if self.modes is not None:
            self.modes = np.asarray(self.modes, dtype=np.int64)
            if self.modes.ndim != 1 or not np.all(np.isin(self.modes, [POOL_MAX, POOL_MIN])):
                raise StructureError("pool modes must be a per-channel vector of max/min flags")

    def modes_for(self, channels: int) -> np.ndarray:
        if self.modes is None:
            return np.full(channels, POOL_MAX, dtype=np.int64)
        if self.modes.shape[0] != channels:
            raise StructureError(
                f"pool modes length {self.modes.shape[0]} != channels {channels}"
            )
        return self.modes

    def out_hw(self, in_hw: tuple[int, int]) -> tuple[int, int]:
        if in_hw[0] % self.window or in_hw[1] % self.window or self.stride != self.window:
            raise StructureError(
                f"pool requires exact tiling: input {in_hw}, window {self.window}, stride {self.stride}"
            )
        return in_hw[0] // self.window, in_hw[1] // self.window


@dataclass
class Flatten:
    pass


Layer = Dense | Conv2d | BatchNorm | Pool2d | Flatten
