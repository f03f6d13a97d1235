"""Named parameter collections and initialisers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import checkpoint
from .autodiff import Tensor, parameter
from .errors import DimensionError


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ParamSet:
    """Ordered mapping of parameter name to :class:`Tensor`."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._p: dict[str, Tensor] = {}
        for name, arr in (tensors or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> Tensor:
        t = parameter(np.array(arr, dtype=np.float64), name=name)
        self._p[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __iter__(self) -> Iterator[str]:
        return iter(self._p)

    def __len__(self) -> int:
        return len(self._p)

    def params(self) -> list[Tensor]:
        return list(self._p.values())

    def named(self):
        return self._p.items()

    def num_values(self) -> int:
        return sum(t.size for t in self._p.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._p.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._p):
            missing = sorted(set(self._p) - set(state))
            extra = sorted(set(state) - set(self._p))
            raise DimensionError(f"state dict mismatch; missing {missing}, unexpected {extra}")
        for k, t in self._p.items():
            if np.shape(state[k]) != t.shape:
                raise DimensionError(f"{k}: expected shape {t.shape}, got {np.shape(state[k])}")
            t.data = np.array(state[k], dtype=t.data.dtype)

    def copy(self) -> "ParamSet":
        new = type(self).__new__(type(self))
        new.__dict__.update(self.__dict__)
        new._p = {}
        for k, t in self._p.items():
            new.add(k, t.data.copy())
        return new

    def equals(self, other: "ParamSet") -> bool:
        return list(self._p) == list(other._p) and all(
            np.array_equal(t.data, other._p[k].data) for k, t in self._p.items())

    def astype(self, dtype) -> None:
        for t in self._p.values():
            t.data = t.data.astype(dtype)

    def save(self, path, meta: dict | None = None) -> None:
        checkpoint.save(path, self.state_dict(), meta)
