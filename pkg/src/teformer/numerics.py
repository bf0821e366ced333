"""Dense-array reverse-mode differentiation on top of numpy.

Every operation executes eagerly and, when any input requires a gradient,
records a node (inputs, output, a closure over the saved activations).  The
recorded graph reachable from a scalar loss is linearised into a :class:`Tape`
in recording order and replayed backwards by :func:`backward`.

Broadcasting in binary element-wise ops is limited to leading-axis expansion:
the smaller operand's shape must be a suffix of the larger one.  Anything else
goes through :func:`expand`, which makes the reduction rule explicit.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_counter = itertools.count()
_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for tensors built from python data."""
    global _default_dtype
    prev, _default_dtype = _default_dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_counter)
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Parameter(Tensor):
    """A named learnable array.  Gradients accumulate into ``grad``."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _node(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- tape / backward ------------------------------------------------------


@dataclass
class Tape:
    """Recorded operations reachable from a root, in recording order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen = set()
        stack = [root]
        found = []
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._parents)
        found.sort(key=lambda t: t._seq)
        return cls(found)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Propagate d(loss) to every reachable leaf that requires a gradient.

    Leaf gradients accumulate: calling this twice without zeroing adds the
    two contributions.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.collect(loss)
    if not tape.nodes:
        raise ContractError("backward called on a graph with no recorded operations")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.reshape(node.shape).astype(node.grad.dtype, copy=False)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return tape


# -- shape helpers ----------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) and big[len(big) - len(small):] != small:
        raise DimensionError(f"{op}: shapes {sa} and {sb} are not leading-axis compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g.reshape(shape)


# -- element-wise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data + c, (a,), lambda g: (g,), "shift")


def _sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``sigmoid`` or ``scale``."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "scale": scale}
    if op not in table:
        raise ContractError(f"unknown element-wise op {op!r}")
    return table[op](*args)


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape [..., m, k] and ``b`` of shape [k, n] or [..., k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), bw, "matmul")


# -- shape ops --------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def flip(a, axis=0) -> Tensor:
    a = as_tensor(a)
    return _node(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


def expand(a, shape) -> Tensor:
    """numpy-style broadcast of ``a`` to ``shape``; gradient sums the copies."""
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {old} to {tuple(shape)}") from exc
    lead = len(shape) - len(old)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(old) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _node(out, (a,), bw, "expand")


def take(a, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``x[t]`` or ``x[:, 0]``."""
    a = as_tensor(a)
    shp, dt = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shp, dtype=dt)
        full[index] = g
        return (full,)

    return _node(np.array(a.data[index]), (a,), bw, "take")


def stack(tensors: Sequence, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in ts]}")

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


def concat(tensors: Sequence, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shp = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shp).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shp).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis), 1.0 / n)


# -- normalisation ----------------------------------------------------------


class BatchNorm:
    """Per-channel (last axis) normalisation with running statistics.

    Train-mode statistics pool every non-channel axis jointly.
    """

    def __init__(self, name: str, channels: int, momentum=0.1, eps=1e-5):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(f"{name}.weight", np.ones(channels))
        self.bias = Parameter(f"{name}.bias", np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x, training: bool) -> Tensor:
        return batchnorm(x, self, "train" if training else "eval")


def batchnorm(x, bn: BatchNorm, mode="train") -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != bn.channels:
        raise DimensionError(f"batchnorm {bn.name}: {bn.channels} channels, input {x.shape}")
    if mode == "eval":
        inv = (1.0 / np.sqrt(bn.running_var + bn.eps)).astype(x.dtype)
        xhat = mul(sub(x, bn.running_mean.astype(x.dtype)), inv)
        return add(mul(xhat, bn.weight), bn.bias)
    if mode != "train":
        raise ContractError(f"batchnorm mode must be train or eval, got {mode!r}")
    xd = x.data
    c = bn.channels
    flat = xd.reshape(-1, c)
    n = flat.shape[0]
    mu = flat.mean(axis=0)
    var = flat.var(axis=0)
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (xd - mu) * inv
    unbiased = var * n / max(n - 1, 1)
    bn.running_mean = ((1 - bn.momentum) * bn.running_mean + bn.momentum * mu).astype(np.float32)
    bn.running_var = ((1 - bn.momentum) * bn.running_var + bn.momentum * unbiased).astype(np.float32)
    gamma = bn.weight.data.astype(xd.dtype)
    out = xhat * gamma + bn.bias.data.astype(xd.dtype)

    def bw(g):
        g2 = g.reshape(-1, c)
        xh = xhat.reshape(-1, c)
        dgamma = (g2 * xh).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * gamma
        dx = inv * (dxhat - dxhat.mean(axis=0) - xh * (dxhat * xh).mean(axis=0))
        return dx.reshape(xd.shape), dgamma, dbeta

    return _node(out, (x, bn.weight, bn.bias), bw, "batchnorm")


# -- losses -----------------------------------------------------------------


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels, smoothing=0.0) -> Tensor:
    """Mean cross-entropy against label-smoothed one-hot targets."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    b, k = logits.shape
    target = np.full((b, k), smoothing / k, dtype=logits.dtype)
    target[np.arange(b), labels] += 1.0 - smoothing
    lp = log_softmax(logits.data)
    loss = -(target * lp).sum() / b

    def bw(g):
        return (g * (np.exp(lp) - target) / b,)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


# -- verification -----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict

    @property
    def passed(self):
        return self.max_rel_err < 1e-4


def rel_err(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter], h=1e-4, max_coords=64,
               seed=0, relaxed: bool | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads the current parameter values.  All
    parameters are promoted to float64 for the duration of the check.
    ``relaxed`` must be True whenever ``f`` contains spiking units: finite
    differences across a hard threshold are meaningless.
    """
    if relaxed is False:
        raise ContractError("grad_check requires relaxed neuron mode")
    params = list(params)
    saved = [p.data for p in params]
    rng = np.random.default_rng(seed)
    per = {}
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
        with precision(np.float64):
            for p in params:
                p.grad = np.zeros_like(p.data)
            backward(f())
            analytic = {p.name: p.grad.copy() for p in params}
            for p in params:
                flat = p.data.reshape(-1)
                k = min(max_coords, flat.size)
                idx = np.sort(rng.choice(flat.size, size=k, replace=False))
                worst = 0.0
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = float(f().data)
                    flat[i] = orig - h
                    fm = float(f().data)
                    flat[i] = orig
                    num = (fp - fm) / (2 * h)
                    worst = max(worst, rel_err(float(analytic[p.name].reshape(-1)[i]), num))
                per[p.name] = worst
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = np.zeros_like(d)
    return GradCheckReport(max(per.values(), default=0.0), per)
