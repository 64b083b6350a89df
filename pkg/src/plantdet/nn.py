"""Module containers, parameter stores and the primitive layers."""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping

import numpy as np

from . import functional as F
from .errors import ContractError
from .tensor import Tensor, get_default_dtype


class ParamStore(Mapping):
    """Read-only mapping of dotted parameter names to leaf tensors.

    Iteration order is lexicographic by name so optimizer updates and
    checkpoint layouts never depend on attribute declaration order.
    """

    def __init__(self, items):
        ordered = sorted(items, key=lambda kv: kv[0])
        self._items = dict(ordered)
        if len(self._items) != len(ordered):
            raise ContractError("duplicate parameter names")
        ids = [id(t) for t in self._items.values()]
        if len(set(ids)) != len(ids):
            raise ContractError("a parameter is reachable from more than one module path")

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def numel(self) -> int:
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.zero_grad()


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal container: parameters are attributes holding grad-enabled tensors."""

    def __init__(self) -> None:
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child._named_parameters(f"{prefix}{name}.")

    def _named_buffers(self, prefix: str = ""):
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child._named_buffers(f"{prefix}{name}.")

    def param_store(self) -> ParamStore:
        return ParamStore(self._named_parameters())

    def named_buffers(self) -> dict[str, np.ndarray]:
        return dict(sorted(self._named_buffers()))

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        self.param_store().zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by name (arrays are live views, not copies)."""
        state = {name: t.data for name, t in self.param_store().items()}
        state.update(self.named_buffers())
        return dict(sorted(state.items()))

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.param_store()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ContractError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data[...] = state[name]
        for name, buf in buffers.items():
            if state[name].shape != buf.shape:
                raise ContractError(f"{name}: shape {state[name].shape} != {buf.shape}")
            buf[...] = state[name]


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # torch's default conv/linear init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 1, stride: int = 1,
                 padding: int | None = None, bias: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        fan_in = cin * k * k
        self.weight = parameter(kaiming_uniform(rng, (cout, cin, k, k), fan_in))
        self.bias = parameter(kaiming_uniform(rng, (cout,), fan_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        super().__init__()
        dtype = get_default_dtype()
        self.momentum = momentum
        self.eps = eps
        self.weight = parameter(np.ones(channels, dtype=dtype))
        self.bias = parameter(np.zeros(channels, dtype=dtype))
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.weight, self.bias, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.eps = eps
        self.weight = parameter(np.ones(dim, dtype=dtype))
        self.bias = parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class Linear(Module):
    """Affine map over the last axis; weight stored as ``[in, out]``."""

    def __init__(self, rng, din: int, dout: int, bias: bool = True, std: float = 0.02):
        super().__init__()
        self.weight = parameter(trunc_normal(rng, (din, dout), std))
        self.bias = parameter(np.zeros(dout, dtype=get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
