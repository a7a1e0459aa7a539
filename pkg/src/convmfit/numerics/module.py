"""Parameter containers and initializers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor
from .nn import LSTMParams


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Holds named parameters and child modules in insertion order.

    Parameters shared between names (weight tying) are the same Tensor
    object; :meth:`named_parameters` yields each storage once.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self.training = True
        self.dtype = np.dtype(dtype)

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def share_param(self, name: str, tensor: Tensor) -> Tensor:
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def child(self, name: str) -> "Module":
        return self._children[name]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        seen: set[int] = set()
        for name, t in self._iter_all(prefix):
            if id(t) in seen:
                continue
            seen.add(id(t))
            out.append((name, t))
        return out

    def _iter_all(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child._iter_all(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def shape_inventory(self) -> dict[str, tuple[int, ...]]:
        return {n: t.shape for n, t in self.named_parameters()}

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, sd: dict[str, np.ndarray], strict: bool = True) -> None:
        named = dict(self.named_parameters())
        if strict:
            missing = set(named) - set(sd)
            extra = set(sd) - set(named)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, arr in sd.items():
            if n not in named:
                continue
            t = named[n]
            if t.shape != tuple(arr.shape):
                raise ValueError(f"shape mismatch for {n}: {t.shape} vs {arr.shape}")
            # in place so tied views keep sharing storage
            t.data[...] = arr

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            if flag and t.grad is None:
                t.grad = np.zeros_like(t.data)


class LSTMLayer(Module):
    """One LSTM layer's weights; forget-gate bias starts at +1."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w_ih = self.add_param("w_ih", uniform_fan_in(rng, (input_size, 4 * hidden_size), input_size, dtype))
        self.w_hh = self.add_param("w_hh", uniform_fan_in(rng, (hidden_size, 4 * hidden_size), hidden_size, dtype))
        b = np.zeros(4 * hidden_size, dtype=dtype)
        b[hidden_size:2 * hidden_size] = 1.0
        self.b = self.add_param("b", b)

    @property
    def params(self) -> LSTMParams:
        return LSTMParams(self.w_ih, self.w_hh, self.b)

    @staticmethod
    def count(input_size: int, hidden_size: int) -> int:
        return 4 * hidden_size * (input_size + hidden_size + 1)


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        self.w = self.add_param("w", uniform_fan_in(rng, (in_dim, out_dim), in_dim, dtype))
        self.b = self.add_param("b", np.zeros(out_dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b
