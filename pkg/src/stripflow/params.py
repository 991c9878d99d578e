"""Named parameter store with access instrumentation."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ModelParams(Mapping):
    """Mapping ``path -> Tensor`` of learnable weights.

    Every ``params[path]`` lookup bumps ``access_count``; the regression
    initializer is tested against that counter to prove it reads nothing.
    """

    def __init__(self, tensors: Mapping[str, Tensor] | None = None, init_seed: int | None = None):
        self._tensors: dict[str, Tensor] = {}
        self.init_seed = init_seed
        self.access_count = 0
        for path, t in (tensors or {}).items():
            self.add(path, t)

    def add(self, path: str, value) -> Tensor:
        if path in self._tensors:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = path
        self._tensors[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        self.access_count += 1
        try:
            return self._tensors[path]
        except KeyError:
            raise KeyError(f"missing parameter {path!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, path) -> bool:
        return path in self._tensors

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Iterate without touching the access counter."""
        return iter(self._tensors.items())

    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._tensors.items()}

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(t.data.copy()) for k, t in self._tensors.items()}, self.init_seed)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(t.data, dtype=dtype) for k, t in self._tensors.items()}, self.init_seed)

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} tensors, {self.num_parameters()} scalars)"
