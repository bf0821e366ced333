"""Discrete-time leaky integrate-and-fire neurons.

Charging uses the forward-Euler form with the step absorbed into ``tau``::

    H = v + (x - (v - v_rest)) / tau

In ``spiking`` mode the output is the Heaviside step of ``H - v_th`` with a
hard reset to ``v_reset``; the backward pass substitutes the derivative of a
sigmoid of width ``a``.  ``relaxed`` mode uses that sigmoid in the forward pass
as well and never resets, so the whole neuron is smooth and finite differences
are meaningful.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .numerics import Tensor

SPIKING = "spiking"
RELAXED = "relaxed"

# multiplier on the surrogate derivative; only the negative-control hook changes it
_surrogate_gain = 1.0
_rate_log: dict | None = None


@contextlib.contextmanager
def record_firing_rates():
    """Collect ``{layer name: [mean spike value per call]}`` while active."""
    global _rate_log
    prev, _rate_log = _rate_log, {}
    try:
        yield _rate_log
    finally:
        _rate_log = prev


def log_rate(name, spikes: np.ndarray):
    if _rate_log is not None and name:
        _rate_log.setdefault(name, []).append(float(np.mean(spikes)))


@contextlib.contextmanager
def broken_surrogate(gain=0.5):
    """Test hook: scale every surrogate derivative by ``gain``."""
    global _surrogate_gain
    prev, _surrogate_gain = _surrogate_gain, gain
    try:
        yield
    finally:
        _surrogate_gain = prev


@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    v_th: float = 1.0
    v_rest: float = 0.0
    v_reset: float = 0.0
    surrogate_width: float = 4.0
    mode: str = SPIKING

    def __post_init__(self):
        if self.tau < 1.0:
            raise ContractError(f"tau must be >= 1, got {self.tau}")
        if self.v_th <= self.v_rest:
            raise ContractError("v_th must exceed v_rest")
        if self.mode not in (SPIKING, RELAXED):
            raise ContractError(f"unknown neuron mode {self.mode!r}")

    def relaxed(self):
        return replace(self, mode=RELAXED)


@dataclass
class LifState:
    v: Tensor | None = None


def _sig(x):
    return nx._sigmoid(x)


def surrogate_grad(h: np.ndarray, p: LifParams) -> np.ndarray:
    s = _sig(p.surrogate_width * (h - p.v_th))
    return _surrogate_gain * p.surrogate_width * s * (1.0 - s)


def spike(h, p: LifParams) -> Tensor:
    """Threshold ``h`` at ``v_th``.  Spiking: step with surrogate backward; relaxed: sigmoid."""
    h = nx.as_tensor(h)
    hd = h.data
    if p.mode == SPIKING:
        out = (hd >= p.v_th).astype(hd.dtype)
    else:
        out = _sig(p.surrogate_width * (hd - p.v_th)).astype(hd.dtype)
    return nx._node(out, (h,), lambda g: (g * surrogate_grad(hd, p),), "spike")


def lif_step(state: LifState, x, p: LifParams):
    """One charge/fire/reset step built from primitive tape ops.

    Returns ``(spikes, new_state)``.  The state is initialised to ``v_rest``
    on first use.
    """
    x = nx.as_tensor(x)
    if state.v is None:
        v = nx.Tensor(np.full(x.shape, p.v_rest, dtype=x.dtype))
    else:
        v = state.v
        if v.shape != x.shape:
            raise DimensionError(f"lif_step: state {v.shape} vs input {x.shape}")
    # H = v + (x - (v - v_rest)) / tau
    h = nx.add(v, nx.scale(nx.shift(nx.sub(x, v), p.v_rest), 1.0 / p.tau))
    s = spike(h, p)
    if p.mode == SPIKING:
        # v' = H (1 - S) + v_reset S
        keep = nx.shift(nx.scale(s, -1.0), 1.0)
        v_new = nx.add(nx.mul(h, keep), nx.scale(s, p.v_reset))
    else:
        v_new = h
    return s, LifState(v_new)


def lif_sequence(x, p: LifParams, name: str | None = None) -> Tensor:
    """Run a fresh LIF layer over the leading (time) axis of ``x``.

    Fused into one tape node; the backward pass is hand-written BPTT that
    matches folding :func:`lif_step` over time.
    """
    x = nx.as_tensor(x)
    if x.ndim < 1 or x.shape[0] < 1:
        raise ContractError("lif_sequence needs at least one time step")
    xd = x.data
    T = xd.shape[0]
    decay = 1.0 - 1.0 / p.tau
    spiking = p.mode == SPIKING
    hs = np.empty_like(xd)
    ss = np.empty_like(xd)
    v = np.full(xd.shape[1:], p.v_rest, dtype=xd.dtype)
    for t in range(T):
        h = v + (xd[t] - (v - p.v_rest)) / p.tau
        if spiking:
            s = (h >= p.v_th).astype(xd.dtype)
            v = h * (1.0 - s) + p.v_reset * s
        else:
            s = _sig(p.surrogate_width * (h - p.v_th)).astype(xd.dtype)
            v = h
        hs[t] = h
        ss[t] = s

    log_rate(name, ss)

    def bw(g):
        gx = np.empty_like(g)
        gv = np.zeros(g.shape[1:], dtype=g.dtype)  # dL/dv_t carried from t+1
        for t in range(T - 1, -1, -1):
            h = hs[t]
            sg = surrogate_grad(h, p)
            if spiking:
                s = ss[t]
                dv_dh = (1.0 - s) + (p.v_reset - h) * sg
            else:
                dv_dh = 1.0
            gh = g[t] * sg + gv * dv_dh
            gx[t] = gh / p.tau
            gv = gh * decay
        return (gx,)

    return nx._node(ss, (x,), bw, "lif")
