"""Dense float64 tensor carrier used at the package boundaries.

Internally the compute code works on plain numpy arrays; ``Tensor`` exists to
validate data at construction time (finite values, shape/length consistency)
wherever values enter or leave the package (model files, datasets, CLI).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TensorError(ValueError):
    """Raised when tensor data violates a structural invariant."""


@dataclass(frozen=True)
class Tensor:
    shape: tuple[int, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if any(s <= 0 for s in shape):
            raise TensorError(f"non-positive dimension in shape {shape}")
        data = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        if data.size != int(np.prod(shape)):
            raise TensorError(
                f"shape {shape} implies {int(np.prod(shape))} values, got {data.size}"
            )
        if not np.all(np.isfinite(data)):
            raise TensorError("tensor contains NaN or Inf")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(shape=arr.shape, data=arr.reshape(-1))

    @property
    def nd(self) -> np.ndarray:
        """Row-major view with the declared shape."""
        return self.data.reshape(self.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    """Validate an array as finite float64, returning a C-contiguous copy."""
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise TensorError(f"{what} contains NaN or Inf")
    return out
