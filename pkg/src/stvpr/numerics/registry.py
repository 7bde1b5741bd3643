from __future__ import annotations

import numpy as np

from ..errors import DimensionError, InputError
from .tensor import Tensor


class ParameterRegistry:
    """Named trainable tensors keyed by dot-separated paths.

    Iteration is always in lexicographic path order so parameter counts,
    optimizer state and checkpoints line up across runs.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, value) -> Tensor:
        if path in self._params:
            raise InputError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self):
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for p in self.paths():
            yield p, self._params[p]

    def scoped(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.``, keyed by the remaining path."""
        head = prefix + "."
        return {p[len(head):]: t for p, t in self.items() if p.startswith(head)}

    def count(self, prefix: str | None = None) -> int:
        return sum(t.size for p, t in self.items()
                   if prefix is None or p == prefix or p.startswith(prefix + "."))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self.items()}

    def load_state(self, state: dict):
        missing = set(self._params) - set(state)
        if missing:
            raise InputError(f"checkpoint lacks parameters: {sorted(missing)}")
        for p, t in self._params.items():
            arr = np.asarray(state[p])
            if arr.shape != t.shape:
                raise DimensionError(f"{p}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype)
