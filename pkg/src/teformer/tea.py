"""Temporal enhanced attention: an exponential moving average over time
realised as one lower-triangular matrix product.

A single scalar ``theta`` sets the decay ``alpha = 0.5 + 0.5 * sigmoid(theta)``.
Row ``i`` of the mask weights step ``j`` by ``alpha * (1 - alpha)**(i - j)``
for ``1 <= j <= i`` and the first step by ``(1 - alpha)**i``, which is exactly
the recursion ``y_i = (1 - alpha) y_{i-1} + alpha v_i`` with ``y_0 = v_0``.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .layers import Module
from .neurons import LifParams, lif_sequence
from .numerics import Parameter, Tensor


def alpha_of(theta) -> Tensor:
    """``0.5 + 0.5 * sigmoid(theta)`` as a tape op."""
    return nx.shift(nx.scale(nx.sigmoid(theta), 0.5), 0.5)


def alpha_value(theta: float) -> float:
    return 0.5 + 0.5 * float(nx._sigmoid(np.asarray([theta], dtype=np.float64))[0])


def build_mask(theta, T: int, literal: bool = False) -> Tensor:
    """T x T temporal mask, differentiable in ``theta``.

    ``literal=True`` reproduces the form where the ``alpha (1-alpha)**i`` term
    also lands on column 0, so that column gets both terms; those rows no
    longer sum to one.  Kept only so tests can show the difference.
    """
    if T < 1:
        raise ContractError(f"temporal mask needs T >= 1, got {T}")
    theta = nx.as_tensor(theta)
    a = float(alpha_of(theta.detach()).data.reshape(-1)[0])
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    lag = np.clip(i - j, 0, None)
    lower = i >= j
    dt = theta.dtype
    ema = np.where(lower & ((j >= 1) | literal), a * (1 - a) ** lag, 0.0)
    boundary = np.where(j == 0, (1 - a) ** i, 0.0)
    m = (ema + boundary).astype(dt)
    # dM/dalpha, elementwise
    with np.errstate(divide="ignore", invalid="ignore"):
        d_ema = np.where(lower & ((j >= 1) | literal),
                         (1 - a) ** lag - a * lag * (1 - a) ** np.clip(lag - 1, 0, None), 0.0)
    d_boundary = np.where((j == 0) & (i >= 1), -i * (1 - a) ** np.clip(i - 1, 0, None), 0.0)
    dm = (d_ema + d_boundary).astype(dt)
    alpha = alpha_of(theta)

    def bw(g):
        return (np.asarray((g * dm).sum(), dtype=dt).reshape(alpha.shape),)

    return nx._node(m, (alpha,), bw, "temporal_mask")


def apply_mask(M, V, reverse: bool = False) -> Tensor:
    """``out[i] = sum_j M[i, j] V[j]`` over the leading axis of ``V``.

    ``reverse`` runs the same mask with time flipped, i.e. fuses the future
    into the past.
    """
    M, V = nx.as_tensor(M), nx.as_tensor(V)
    T = M.shape[0]
    if M.shape != (T, T) or V.shape[0] != T:
        raise DimensionError(f"apply_mask: mask {M.shape} vs input {V.shape}")
    if reverse:
        V = nx.flip(V, 0)
    flat = nx.reshape(V, (T, -1))
    out = nx.reshape(nx.matmul(M, flat), V.shape)
    return nx.flip(out, 0) if reverse else out


def tea_branch(x, theta, lif: LifParams, reverse: bool = False) -> Tensor:
    """Mask the time axis of ``x`` and re-binarise the result with a fresh LIF."""
    x = nx.as_tensor(x)
    M = build_mask(theta, x.shape[0])
    return lif_sequence(apply_mask(M, x, reverse=reverse), lif)


class TemporalEnhancement(Module):
    """Holds the learnable scalar of one block."""

    def __init__(self, name: str, theta0: float = 0.0):
        self.theta = Parameter(f"{name}.theta", np.array([theta0]))

    @property
    def alpha(self) -> float:
        return alpha_value(float(self.theta.data[0]))

    def mask(self, T: int) -> Tensor:
        return build_mask(self.theta, T)


def ema_reference(theta: float, V) -> np.ndarray:
    """Step-by-step ``y_i = (1 - alpha) y_{i-1} + alpha v_i``, ``y_0 = v_0``."""
    a = alpha_value(theta)
    V = np.asarray(V, dtype=np.float64)
    out = np.empty_like(V)
    out[0] = V[0]
    for i in range(1, V.shape[0]):
        out[i] = (1 - a) * out[i - 1] + a * V[i]
    return out
