"""Named parameter storage and initializers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .functional import BatchNormState
from .tensor import Tensor


class ParamStore:
    """Ordered mapping from hierarchical names to tensors.

    Trainable parameters and non-trainable buffers (batch-norm running
    statistics) share one namespace. Iteration is lexicographic by name.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value), requires_grad=trainable)
        self._tensors[name] = t
        if not trainable:
            self._buffers.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self.names()]

    def is_buffer(self, name: str) -> bool:
        return name in self._buffers

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.items() if n not in self._buffers]

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.trainable())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def bn_state(self, prefix: str) -> BatchNormState:
        return BatchNormState(self[f"{prefix}.running_mean"].data, self[f"{prefix}.running_var"].data)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.astype(dtype), trainable=name not in self._buffers)
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.copy(), trainable=name not in self._buffers)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy ``arrays`` into existing tensors, checking shapes."""
        for name, arr in arrays.items():
            t = self[name]
            if t.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: store has {t.shape}, source has {arr.shape}")
            t.data[...] = arr


@dataclass
class Context:
    """Forward-pass state shared by every layer of one model call."""

    params: ParamStore
    training: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


class Initializer:
    """Registers parameters under a prefix with reproducible random values."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, dtype=np.float32):
        self.store = store
        self.rng = rng
        self.dtype = dtype

    def conv(self, name: str, out_ch: int, in_ch: int, k: int, bias: bool = True, transpose: bool = False) -> None:
        fan_in = in_ch * k * k
        shape = (in_ch, out_ch, k, k) if transpose else (out_ch, in_ch, k, k)
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        self.store.add(f"{name}.weight", w.astype(self.dtype))
        if bias:
            self.store.add(f"{name}.bias", np.zeros(out_ch, dtype=self.dtype))

    def linear(self, name: str, in_dim: int, out_dim: int, bias: bool = True) -> None:
        w = np.clip(self.rng.normal(0.0, 0.02, size=(in_dim, out_dim)), -0.04, 0.04)
        self.store.add(f"{name}.weight", w.astype(self.dtype))
        if bias:
            self.store.add(f"{name}.bias", np.zeros(out_dim, dtype=self.dtype))

    def table(self, name: str, shape: tuple) -> None:
        w = np.clip(self.rng.normal(0.0, 0.02, size=shape), -0.04, 0.04)
        self.store.add(name, w.astype(self.dtype))

    def zeros(self, name: str, shape: tuple) -> None:
        self.store.add(name, np.zeros(shape, dtype=self.dtype))

    def batchnorm(self, name: str, channels: int) -> None:
        self.store.add(f"{name}.weight", np.ones(channels, dtype=self.dtype))
        self.store.add(f"{name}.bias", np.zeros(channels, dtype=self.dtype))
        self.store.add(f"{name}.running_mean", np.zeros(channels, dtype=self.dtype), trainable=False)
        self.store.add(f"{name}.running_var", np.ones(channels, dtype=self.dtype), trainable=False)

    def layernorm(self, name: str, dim: int) -> None:
        self.store.add(f"{name}.weight", np.ones(dim, dtype=self.dtype))
        self.store.add(f"{name}.bias", np.zeros(dim, dtype=self.dtype))
