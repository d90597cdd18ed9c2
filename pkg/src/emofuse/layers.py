"""Parameter containers built on :mod:`emofuse.numcore`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numcore as nc
from .numcore import RngStream, Tensor


class Module:
    """Holds parameters and sub-modules; iteration order is attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for k, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        nc.zero_grad(self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngStream, scale: float | None = None):
        # default scale keeps activations O(1) at init
        std = 1.0 / np.sqrt(d_in) if scale is None else scale
        self.weight = nc.parameter(rng.normal((d_in, d_out), scale=std) if std > 0 else np.zeros((d_in, d_out)))
        self.bias = nc.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        x = nc.as_tensor(x)
        if x.ndim == 1:
            return nc.reshape(nc.reshape(x, (1, -1)) @ self.weight, (-1,)) + self.bias
        return x @ self.weight + self.bias


class MLP(Module):
    """Two affine layers with a SiLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: RngStream):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.silu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = nc.parameter(np.ones(d))
        self.bias = nc.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.gain, self.bias)
