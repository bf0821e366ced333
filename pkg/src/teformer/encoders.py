"""Static-image to spike-train encoders.

All encoders take intensities ``x`` in [0, 1] of any shape and return a
time-major array of shape ``(T, *x.shape)``.  Time steps are numbered from 1
in the formulas below and stored at index ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

KINDS = ("direct", "phase", "rate", "ttfs")


@dataclass(frozen=True)
class EncodingSpec:
    kind: str = "direct"
    T: int = 4
    seed: int = 0
    clamp_policy: str = "clamp"  # phase: x == 1.0 maps to 255

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown encoder kind {self.kind!r}; expected one of {KINDS}")
        if self.T < 1:
            raise ContractError("T must be >= 1")
        if self.clamp_policy not in ("clamp", "error"):
            raise ContractError(f"unknown phase clamp policy {self.clamp_policy!r}")


def _check_range(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size and (np.nanmin(x) < 0.0 or np.nanmax(x) > 1.0 or np.isnan(x).any()):
        raise ContractError(f"encoder input must lie in [0, 1], got [{x.min()}, {x.max()}]")
    return x


def encode_direct(x, T: int) -> np.ndarray:
    x = _check_range(x)
    return np.broadcast_to(x, (T,) + x.shape).astype(np.float32)


def phase_levels(x, clamp_policy="clamp") -> np.ndarray:
    v = np.floor(256.0 * _check_range(x)).astype(np.int64)
    if clamp_policy == "error" and (v > 255).any():
        raise ContractError("phase level 256 does not fit in 8 bits")
    return np.minimum(v, 255)


def encode_phase(x, T: int, clamp_policy="clamp") -> np.ndarray:
    """Bit ``7 - b`` of ``floor(256 x)`` weighted by ``2**-(b+1)``, b = (t-1) mod 8."""
    v = phase_levels(x, clamp_policy)
    out = np.zeros((T,) + v.shape, dtype=np.float32)
    for t in range(1, T + 1):
        b = (t - 1) % 8
        bit = (v >> (7 - b)) & 1
        out[t - 1] = bit * 2.0 ** -(b + 1)
    return out


def _counter_uniform(seed: int, t: int, stream: int, n: int) -> np.ndarray:
    # Philox keyed by the seed.  Word 0 of the counter is what advances per draw,
    # so (time step, stream id) live in the upper words to keep streams disjoint.
    bitgen = np.random.Philox(key=np.uint64(seed), counter=np.array([0, t, stream, 0], dtype=np.uint64))
    return np.random.Generator(bitgen).random(n)


def encode_rate(x, T: int, seed: int, sample_ids=None) -> np.ndarray:
    """Bernoulli(x) spikes, i.i.d. over time and pixels.

    Without ``sample_ids`` the whole of ``x`` is one stream.  With them, row
    ``i`` of ``x`` draws from stream ``sample_ids[i]``, so an image gets the
    same spike train whatever batch it lands in.
    """
    x = _check_range(x)
    if sample_ids is None:
        rows, ids = x.reshape(1, -1), [0]
    else:
        rows, ids = x.reshape(len(sample_ids), -1), list(sample_ids)
    out = np.empty((T,) + rows.shape, dtype=np.float32)
    for t in range(T):
        for i, sid in enumerate(ids):
            out[t, i] = _counter_uniform(seed, t, int(sid), rows.shape[1]) < rows[i]
    return out.reshape((T,) + x.shape)


def ttfs_time(x, T: int) -> np.ndarray:
    return 1 + np.floor((1.0 - _check_range(x)) * T).astype(np.int64)


def encode_ttfs(x, T: int) -> np.ndarray:
    """Single spike of amplitude ``1/t*`` at ``t* = 1 + floor((1 - x) T)``; none if t* > T."""
    ts = ttfs_time(x, T)
    out = np.zeros((T,) + ts.shape, dtype=np.float32)
    for t in range(1, T + 1):
        out[t - 1] = np.where(ts == t, 1.0 / t, 0.0)
    return out


def encode(x, spec: EncodingSpec, sample_ids=None) -> np.ndarray:
    if spec.kind == "direct":
        return encode_direct(x, spec.T)
    if spec.kind == "phase":
        return encode_phase(x, spec.T, spec.clamp_policy)
    if spec.kind == "rate":
        return encode_rate(x, spec.T, spec.seed, sample_ids)
    return encode_ttfs(x, spec.T)


def encoding_stats(spikes: np.ndarray, x=None, kind=None) -> dict:
    """Summary numbers reported by the ``encode`` command."""
    s = np.asarray(spikes)
    nonzero = (s != 0).sum(axis=0)
    stats = {
        "mean_rate": float((s != 0).mean()),
        "mean_amplitude": float(s.mean()),
        "per_step_rate": [float(v) for v in (s != 0).reshape(s.shape[0], -1).mean(axis=1)],
        "spike_count_histogram": {int(k): int(c) for k, c in zip(*np.unique(nonzero, return_counts=True))},
    }
    if x is not None and kind == "phase":
        v = phase_levels(x)
        stats["reconstruction_error"] = float(np.abs(s.sum(axis=0) - v / 256.0).max()) if s.shape[0] == 8 else None
    if x is not None and kind == "rate":
        x = np.asarray(x, dtype=np.float64)
        n = s.size
        p = float(x.mean())
        stats["rate_vs_input"] = {
            "spike_mean": float(s.mean()),
            "input_mean": p,
            "three_sigma": float(3 * np.sqrt(max(p * (1 - p), 1e-12) / n)),
        }
    return stats
