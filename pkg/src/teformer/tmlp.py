"""Temporal MLP: the up-projection is replaced by a single-gate recurrence that
runs from the last time step back to the first.

    h[T-1] = LIF(W_in x[T-1])
    g[r]   = sigmoid(W_fx x[r] + W_fh h[r+1] + b)
    h[r]   = LIF(g[r] * h[r+1] + (1 - g[r]) * W_in x[r])      r = T-2 .. 0
    y[t]   = LIF(BN(W_o h[t]))

The hidden LIF keeps its membrane along the recurrence order (it is one
neuron layer visited from T-1 down to 0); the output LIF runs forward in time.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .layers import Linear, Module
from .neurons import SPIKING, LifParams, LifState, lif_sequence, lif_step, log_rate
from .numerics import BatchNorm, Tensor

GATE_BIAS_INIT = -1.0


class TemporalMLP(Module):
    def __init__(self, name, dim, hidden, rng, lif: LifParams, reverse_time=False):
        if hidden < dim:
            raise ContractError(f"{name}: hidden width {hidden} smaller than {dim}")
        self.name = name
        self.w_in = Linear(f"{name}.w_in", dim, hidden, rng)
        self.w_fx = Linear(f"{name}.w_fx", dim, hidden, rng, bias=True, bias_init=GATE_BIAS_INIT)
        self.w_fh = Linear(f"{name}.w_fh", hidden, hidden, rng)
        self.w_o = Linear(f"{name}.w_o", hidden, dim, rng)
        self.bn = BatchNorm(f"{name}.bn", dim)
        self.lif = lif
        # False: future -> past (the default); True: past -> future
        self.reverse_time = reverse_time
        self.gate_override: float | None = None
        self.last_gates: list[np.ndarray] = []

    def hidden(self, x: Tensor) -> Tensor:
        T = x.shape[0]
        if T < 1:
            raise ContractError("temporal MLP needs at least one time step")
        if self.reverse_time:
            x = nx.flip(x, 0)
        xin = self.w_in(x)
        xf = self.w_fx(x) if self.gate_override is None else None
        state = LifState()
        h, state = lif_step(state, nx.take(xin, T - 1), self.lif)
        hs = [h]
        self.last_gates = []
        for r in range(T - 2, -1, -1):
            if self.gate_override is None:
                g = nx.sigmoid(nx.add(nx.take(xf, r), self.w_fh(h)))
                self.last_gates.append(g.data)
            else:
                g = nx.Tensor(np.full(h.shape, self.gate_override, dtype=h.dtype))
            cand = nx.take(xin, r)
            mixed = nx.add(nx.mul(g, h), nx.sub(cand, nx.mul(g, cand)))
            h, state = lif_step(state, mixed, self.lif)
            hs.append(h)
        hseq = nx.stack(hs[::-1], 0)
        return nx.flip(hseq, 0) if self.reverse_time else hseq

    def __call__(self, x: Tensor) -> Tensor:
        h = self.hidden(x)
        log_rate(f"{self.name}.hidden", h.data)
        return lif_sequence(self.bn(self.w_o(h), self.training), self.lif, f"{self.name}.out")


class SpikingMLP(Module):
    """``LIF(BN(W_o LIF(W_in x)))``; same two matrices as :class:`TemporalMLP`, no gate."""

    def __init__(self, name, dim, hidden, rng, lif: LifParams):
        self.name = name
        self.w_in = Linear(f"{name}.w_in", dim, hidden, rng)
        self.w_o = Linear(f"{name}.w_o", hidden, dim, rng)
        self.bn = BatchNorm(f"{name}.bn", dim)
        self.lif = lif

    def __call__(self, x):
        h = lif_sequence(self.w_in(x), self.lif, f"{self.name}.hidden")
        return lif_sequence(self.bn(self.w_o(h), self.training), self.lif, f"{self.name}.out")


def tmlp_forward(x, mlp: TemporalMLP) -> Tensor:
    return mlp(nx.as_tensor(x))


def tmlp_reference(x, mlp: TemporalMLP) -> np.ndarray:
    """Plain-numpy rederivation of the T-MLP forward (spiking neurons, float64)."""
    p = mlp.lif
    if p.mode != SPIKING:
        raise ContractError("tmlp_reference implements spiking neurons only")
    X = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if mlp.reverse_time:
        X = X[::-1]
    W_in = mlp.w_in.weight.data.astype(np.float64)
    W_fx = mlp.w_fx.weight.data.astype(np.float64)
    b_f = mlp.w_fx.bias.data.astype(np.float64)
    W_fh = mlp.w_fh.weight.data.astype(np.float64)
    W_o = mlp.w_o.weight.data.astype(np.float64)
    T = X.shape[0]

    def neuron(v, inp):
        H = v + (inp - (v - p.v_rest)) / p.tau
        S = (H >= p.v_th).astype(np.float64)
        return S, H * (1 - S) + p.v_reset * S

    h = [None] * T
    v = np.full(X.shape[1:-1] + (W_in.shape[1],), p.v_rest)
    h[T - 1], v = neuron(v, X[T - 1] @ W_in)
    for r in range(T - 2, -1, -1):
        if mlp.gate_override is None:
            g = 1.0 / (1.0 + np.exp(-(X[r] @ W_fx + b_f + h[r + 1] @ W_fh)))
        else:
            g = mlp.gate_override
        h[r], v = neuron(v, g * h[r + 1] + (1 - g) * (X[r] @ W_in))
    H = np.stack(h)
    if mlp.reverse_time:
        H = H[::-1]
    z = H @ W_o
    bn = mlp.bn
    if mlp.training:
        flat = z.reshape(-1, z.shape[-1])
        mu, var = flat.mean(0), flat.var(0)
    else:
        mu, var = bn.running_mean, bn.running_var
    zn = (z - mu) / np.sqrt(var + bn.eps) * bn.weight.data + bn.bias.data
    out = np.empty_like(zn)
    v = np.full(zn.shape[1:], p.v_rest)
    for t in range(T):
        out[t], v = neuron(v, zn[t])
    return out
