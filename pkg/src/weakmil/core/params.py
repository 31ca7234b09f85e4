"""Named parameter collections and seeded initialization."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from ..exceptions import ConfigurationError, DimensionError
from .tensor import Tensor


class ParamSet(dict):
    """Ordered mapping of parameter name to float64 array.

    Iteration order is insertion order, which every model in this package
    fixes at construction time so checkpoints and updates are deterministic.
    """

    def __setitem__(self, key, value):
        value = np.asarray(value, dtype=np.float64)
        if key in self and self[key].shape != value.shape:
            raise DimensionError(
                f"parameter {key!r} shape is fixed at {self[key].shape}, got {value.shape}"
            )
        super().__setitem__(key, value)

    def __init__(self, items=()):
        super().__init__()
        if isinstance(items, Mapping):
            items = items.items()
        for k, v in items:
            self[k] = v

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self.items())

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.items()}

    def n_values(self) -> int:
        return int(sum(v.size for v in self.values()))

    def as_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.items()}

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        if list(self) != list(other):
            return False
        return all(np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self)

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self
        )


def grads_of(tensors: Mapping[str, Tensor]) -> ParamSet:
    """Collect ``.grad`` from a dict of tensors (zeros where no gradient flowed)."""
    out = ParamSet()
    for k, t in tensors.items():
        out[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out


def check_congruent(a: Mapping, b: Mapping) -> None:
    if list(a) != list(b):
        missing = sorted(set(a) ^ set(b))
        raise ConfigurationError(f"parameter sets differ in keys: {missing}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise DimensionError(f"parameter {k!r}: shape {np.shape(a[k])} vs {np.shape(b[k])}")


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
