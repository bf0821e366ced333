"""Parameter containers shared by the attention, T-MLP and model modules."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import BatchNorm, Parameter


class Module:
    training = True

    def children(self):
        for v in vars(self).values():
            if isinstance(v, (Module, BatchNorm)):
                yield v
            elif isinstance(v, (list, tuple)):
                yield from (c for c in v if isinstance(c, (Module, BatchNorm)))

    def parameters(self) -> list[Parameter]:
        out = [v for v in vars(self).values() if isinstance(v, Parameter)]
        for child in self.children():
            out.extend(child.parameters())
        return out

    def batchnorms(self) -> list[BatchNorm]:
        out = []
        for child in self.children():
            if isinstance(child, BatchNorm):
                out.append(child)
            else:
                out.extend(child.batchnorms())
        return out

    def train(self, mode=True):
        self.training = mode
        for child in self.children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self):
        return self.train(False)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``x @ W (+ b)`` over the last axis."""

    def __init__(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator, bias=False, bias_init=0.0):
        self.weight = Parameter(f"{name}.weight", kaiming_uniform(rng, fan_in, (fan_in, fan_out)))
        self.bias = Parameter(f"{name}.bias", np.full(fan_out, bias_init)) if bias else None

    def __call__(self, x):
        y = nx.matmul(x, self.weight)
        return nx.add(y, self.bias) if self.bias is not None else y
