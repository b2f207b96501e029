"""Parameter containers for the handful of layers the model uses."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Walks attributes to find parameters and sub-modules.

    Parameters are ``Tensor`` attributes with ``requires_grad``; lists and
    dicts of modules are traversed in insertion order so names are stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        std = np.sqrt(2.0 / (n_in + n_out)) if std is None else std
        self.weight = _param(rng.normal(0.0, std, size=(n_in, n_out)), "weight")
        self.bias = _param(np.zeros(n_out), "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim), "gamma")
        self.beta = _param(np.zeros(dim), "beta")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    """Channels-last convolution with a (k, k, cin, cout) kernel."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        std = np.sqrt(2.0 / (k * k * cin))
        self.weight = _param(rng.normal(0.0, std, size=(k, k, cin, cout)), "weight")
        self.bias = _param(np.zeros(cout), "bias")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)
