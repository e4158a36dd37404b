"""Parameter registry and the small set of layers the models are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_dtype


class Parameter(Tensor):
    """A learnable leaf tensor. Its registry path is its name."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base container. Parameters and sub-modules assigned as attributes are
    registered automatically, giving dotted names like ``encoder.layers.0.ln1.gain``.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class ModuleList(Module):
    def __init__(self, modules) -> None:
        super().__init__()
        self._items: list[Module] = []
        for i, m in enumerate(modules):
            setattr(self, str(i), m)
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(get_dtype())


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(xavier_uniform(rng, (din, dout), din, dout))
        self.bias = Parameter(np.zeros(dout, dtype=get_dtype())) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"conv kernel must be odd, got {kernel}")
        self.weight = Parameter(xavier_uniform(rng, (kernel, cin, cout), kernel * cin, kernel * cout))
        self.bias = Parameter(np.zeros(cout, dtype=get_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = Parameter(np.ones(d, dtype=get_dtype()))
        self.shift = Parameter(np.zeros(d, dtype=get_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.shift, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, padding_idx: int | None = 0):
        super().__init__()
        table = rng.normal(0.0, dim ** -0.5, size=(num, dim)).astype(get_dtype())
        if padding_idx is not None:
            table[padding_idx] = 0.0
        self.table = Parameter(table)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return F.embedding(ids, self.table)
