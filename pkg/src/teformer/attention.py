"""Spiking attention variants operating on time-major [T, B, N, D] tensors.

The functional forms (``ssa_forward`` and friends) take already-spiking
Q/K/V; the layer classes own the projections that produce them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .layers import Linear, Module
from .neurons import LifParams, LifState, lif_sequence, lif_step
from .numerics import BatchNorm, Tensor
from .tea import TemporalEnhancement, apply_mask

DEFAULT_SCALE = 0.125
KINDS = ("ssa", "sdsa", "qkta", "tim")


@dataclass(frozen=True)
class AttentionKind:
    kind: str = "ssa"
    heads: int = 1
    tim_alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown attention kind {self.kind!r}")
        if self.heads < 1:
            raise ContractError("heads must be >= 1")
        if not 0.0 <= self.tim_alpha <= 1.0:
            raise ContractError("tim_alpha must lie in [0, 1]")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[T, B, N, D] -> [T, B, H, N, D/H]"""
    T, B, N, D = x.shape
    if D % heads:
        raise DimensionError(f"{D} channels do not split into {heads} heads")
    return nx.transpose(nx.reshape(x, (T, B, N, heads, D // heads)), (0, 1, 3, 2, 4))


def _merge_heads(x: Tensor) -> Tensor:
    T, B, H, N, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 1, 3, 2, 4)), (T, B, N, H * dh))


def _check_qkv(*ts):
    shapes = {t.shape[:3] for t in ts}
    if len(shapes) != 1 or any(t.ndim != 4 for t in ts):
        raise DimensionError(f"attention inputs must be [T, B, N, D] and agree on T, B, N: {[t.shape for t in ts]}")


def ssa_scores(Q, K, V, heads=1, scale=DEFAULT_SCALE) -> Tensor:
    """Pre-activation ``(Q K^T) V * scale`` per head and time step."""
    Q, K, V = nx.as_tensor(Q), nx.as_tensor(K), nx.as_tensor(V)
    _check_qkv(Q, K, V)
    q, k, v = (_split_heads(t, heads) for t in (Q, K, V))
    attn = nx.matmul(q, nx.transpose(k, (0, 1, 2, 4, 3)))
    return _merge_heads(nx.scale(nx.matmul(attn, v), scale))


def ssa_forward(Q, K, V, lif: LifParams, heads=1, scale=DEFAULT_SCALE, name=None) -> Tensor:
    return lif_sequence(ssa_scores(Q, K, V, heads, scale), lif, name)


def sdsa_forward(Q, K, V, lif: LifParams, heads=1, scale=DEFAULT_SCALE, name=None) -> Tensor:
    """Per-query score summed over keys, spiked, then used to gate V."""
    Q, K, V = nx.as_tensor(Q), nx.as_tensor(K), nx.as_tensor(V)
    _check_qkv(Q, K, V)
    q, k, v = (_split_heads(t, heads) for t in (Q, K, V))
    # sum_m (Q K^T)[n, m] == Q[n] . sum_m K[m]
    k_sum = nx.sum_(k, axis=3)  # [T, B, H, dh]
    T, B, H, N, dh = q.shape
    k_b = nx.expand(nx.reshape(k_sum, (T, B, H, 1, dh)), q.shape)
    score = nx.sum_(nx.mul(q, k_b), axis=4)  # [T, B, H, N]
    gate = lif_sequence(score, lif, name)
    gated = nx.mul(v, nx.expand(nx.reshape(gate, (T, B, H, N, 1)), v.shape))
    return _merge_heads(nx.scale(gated, scale))


def token_mask(Q, lif: LifParams, heads=1, name=None) -> Tensor:
    """Binary per-token (and per-head) mask: a single fresh LIF step on the row sums of Q."""
    Q = nx.as_tensor(Q)
    q = _split_heads(Q, heads)
    s = nx.sum_(q, axis=4)  # [T, B, H, N]
    return nx.reshape(lif_sequence(nx.reshape(s, (1,) + s.shape), lif, name), s.shape)


def qkta_forward(Q, K, lif: LifParams, heads=1, mask: Tensor | None = None, name=None) -> Tensor:
    """Token-wise gating of K by the query-derived mask; O(N D)."""
    Q, K = nx.as_tensor(Q), nx.as_tensor(K)
    if Q.shape != K.shape:
        raise DimensionError(f"qkta: Q {Q.shape} and K {K.shape} differ")
    _check_qkv(Q, K)
    m = token_mask(Q, lif, heads, name) if mask is None else mask
    k = _split_heads(K, heads)
    T, B, H, N, dh = k.shape
    gated = nx.mul(k, nx.expand(nx.reshape(m, (T, B, H, N, 1)), k.shape))
    return _merge_heads(gated)


def tim_update(Q, alpha: float, f: Callable[[Tensor], Tensor]) -> Tensor:
    """``Q'[0] = Q[0]``, ``Q'[t] = (1 - alpha) Q[t] + alpha f(Q'[t-1])``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"tim alpha must lie in [0, 1], got {alpha}")
    Q = nx.as_tensor(Q)
    out = [nx.take(Q, 0)]
    for t in range(1, Q.shape[0]):
        prev = f(out[-1])
        out.append(nx.add(nx.scale(nx.take(Q, t), 1.0 - alpha), nx.scale(prev, alpha)))
    return nx.stack(out, 0)


class StepExtractor:
    """``LIF(x @ W)`` applied one step at a time, membrane carried between calls."""

    def __init__(self, weight, lif: LifParams):
        self.weight = weight
        self.lif = lif
        self.state = LifState()

    def __call__(self, x):
        s, self.state = lif_step(self.state, nx.matmul(x, self.weight), self.lif)
        return s


# -- layers -----------------------------------------------------------------


class SpikingProjection(Module):
    """``LIF(BN(x W))`` over a time-major tensor; ``pre`` exposes the BN output."""

    def __init__(self, name, d_in, d_out, rng, lif):
        self.name = name
        self.linear = Linear(name, d_in, d_out, rng)
        self.bn = BatchNorm(f"{name}.bn", d_out)
        self.lif = lif

    def pre(self, x):
        return self.bn(self.linear(x), self.training)

    def __call__(self, x):
        return lif_sequence(self.pre(x), self.lif, self.name)


class AttentionLayer(Module):
    """Q/K/V projections, one spiking attention variant, output projection.

    With ``tea`` set, the value-bearing branch (K for QKTA, which gates and
    returns its keys; V for the others) has its pre-activation passed through
    the temporal mask before that branch's neuron fires.
    """

    def __init__(self, name, dim, kind: AttentionKind, rng, lif: LifParams, tea: TemporalEnhancement | None = None,
                 tea_reverse=False, scale=DEFAULT_SCALE):
        if dim % kind.heads:
            raise DimensionError(f"{name}: dim {dim} not divisible by {kind.heads} heads")
        self.name = name
        self.kind = kind
        self.lif = lif
        self.scale = scale
        self.q = SpikingProjection(f"{name}.q", dim, dim, rng, lif)
        self.k = SpikingProjection(f"{name}.k", dim, dim, rng, lif)
        self.v = SpikingProjection(f"{name}.v", dim, dim, rng, lif) if kind.kind != "qkta" else None
        self.tim_conv = Linear(f"{name}.tim", dim, dim, rng) if kind.kind == "tim" else None
        self.tea = tea
        self.tea_reverse = tea_reverse
        self.proj = SpikingProjection(f"{name}.proj", dim, dim, rng, lif)

    def _branch(self, proj: SpikingProjection, x, temporal: bool):
        if not temporal or self.tea is None:
            return proj(x)
        pre = apply_mask(self.tea.mask(x.shape[0]), proj.pre(x), reverse=self.tea_reverse)
        return lif_sequence(pre, self.lif, proj.name)

    def __call__(self, x):
        kind, heads = self.kind.kind, self.kind.heads
        q = self.q(x)
        k = self._branch(self.k, x, kind == "qkta")
        name = f"{self.name}.attn"
        if kind == "qkta":
            out = qkta_forward(q, k, self.lif, heads, name=name)
        else:
            v = self._branch(self.v, x, True)
            if kind == "sdsa":
                out = sdsa_forward(q, k, v, self.lif, heads, self.scale, name)
            else:
                if kind == "tim":
                    q = tim_update(q, self.kind.tim_alpha, StepExtractor(self.tim_conv.weight, self.lif))
                out = ssa_forward(q, k, v, self.lif, heads, self.scale, name)
        return self.proj(out)
