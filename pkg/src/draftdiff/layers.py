"""Parameter containers and the handful of layers the denoiser needs."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container with named traversal.

    Tensors assigned as attributes become parameters; Modules and ModuleLists
    become children. Names follow attribute paths ("enc0.conv.w").
    """

    def __setattr__(self, name, value):
        if isinstance(value, (Module, ModuleList)):
            self.__dict__.setdefault("_children", {})[name] = value
        elif isinstance(value, Tensor):
            self.__dict__.setdefault("_params", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.__dict__.get("_params", {}).items():
            yield (f"{prefix}{name}", p)
        for name, child in self.__dict__.get("_children", {}).items():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.ascontiguousarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ValueError(f"param {name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        """Stop gradient tracking on all parameters (inference snapshots)."""
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList:
    def __init__(self, modules=()):
        self._items = list(modules)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def append(self, m):
        self._items.append(m)

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(prefix=f"{prefix}{i}.")


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel=3, stride=1, padding=0, *,
                 rng: np.random.Generator, zero_init: bool = False):
        self.stride = stride
        self.padding = padding
        if zero_init:
            w = np.zeros((cout, cin, kernel, kernel), dtype=np.float32)
        else:
            w = _kaiming(rng, (cout, cin, kernel, kernel), cin * kernel * kernel)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, din, dout, *, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            w = np.zeros((din, dout), dtype=np.float32)
        else:
            w = _kaiming(rng, (din, dout), din)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        self.groups = groups
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, eps=self.eps)


class Embedding(Module):
    def __init__(self, rows: int, dim: int, *, rng: np.random.Generator):
        self.table = Tensor(
            rng.normal(0.0, 1.0, size=(rows, dim)).astype(np.float32),
            requires_grad=True,
        )

    def __call__(self, idx) -> Tensor:
        return T.gather_rows(self.table, idx)
