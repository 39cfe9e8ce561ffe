"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape, ops run as plain
numpy and keep no graph, which is what sampling and benchmarking want.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> grads = backward(tape, loss)
    >>> grads[w]
    array([[2., 2.],
           [2., 2.]])
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "backward", "grad_check", "as_tensor",
    "matmul", "conv1d", "depthwise_causal_conv1d", "silu", "softplus",
    "sigmoid", "nonlinearity", "exp", "log", "softmax_last_axis",
    "log_softmax_last_axis", "layer_norm", "embedding", "take_last",
    "reshape", "swapaxes", "stack", "select", "concat_last",
    "selective_scan", "mac_counter", "mac_stage",
]


# --------------------------------------------------------------------------
# tape plumbing
# --------------------------------------------------------------------------

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is already a topological
    order of the graph; :func:`backward` walks them in reverse.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-dimensional float64 array that can carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``out_data``; register ``grad_fn(g) -> tuple of input grads``."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append((out, tuple(inputs), grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns ``{tensor: gradient}`` for every grad-requiring tensor that was
    fed into the tape as a leaf (i.e. not produced by a recorded node).
    Leaves the loss does not depend on get a zero gradient. Leaf tensors also
    have their ``.grad`` set.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for out, inputs, _ in tape.nodes:
        produced.add(id(out))
        for t in inputs:
            if t.requires_grad:
                leaves.setdefault(id(t), t)
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        if key in produced:
            continue
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        result[t] = g
    return result


# --------------------------------------------------------------------------
# multiply-accumulate instrumentation (used by the benchmark harness)
# --------------------------------------------------------------------------

class MacCounter:
    def __init__(self):
        self.by_stage: dict[str, int] = {}
        self.by_op: dict[tuple[str, str], int] = {}

    def add(self, op: str, macs: int) -> None:
        stage = getattr(_state, "stage", "other")
        self.by_stage[stage] = self.by_stage.get(stage, 0) + int(macs)
        self.by_op[(stage, op)] = self.by_op.get((stage, op), 0) + int(macs)

    @property
    def total(self) -> int:
        return sum(self.by_stage.values())


@contextmanager
def mac_counter():
    """Count multiply-accumulates of matmul/conv/scan ops inside the block."""
    prev = getattr(_state, "counter", None)
    counter = MacCounter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


@contextmanager
def mac_stage(name: str):
    prev = getattr(_state, "stage", "other")
    _state.stage = name
    try:
        yield
    finally:
        _state.stage = prev


def _count(op: str, macs: int) -> None:
    counter = getattr(_state, "counter", None)
    if counter is not None:
        counter.add(op, macs)


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def reciprocal(a: Tensor) -> Tensor:
    r = 1.0 / a.data
    return _record(r, (a,), lambda g: (-g * r * r,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _record(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # x + ln(1 + e^-x) above 30 so e^x never overflows
    big = x > 30.0
    return np.where(big, x + np.log1p(np.exp(-np.where(big, x, 0.0))),
                    np.log1p(np.exp(np.where(big, 0.0, x))))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _record(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return _record(_softplus(x), (a,), lambda g: (g * _sigmoid(x),))


def nonlinearity(kind: str, x: Tensor) -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "softplus":
        return softplus(x)
    raise ValueError(f"unknown nonlinearity {kind!r}")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), grad_fn)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def grad_fn(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _record(out, tensors, grad_fn)


def select(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """``a`` indexed at ``index`` along ``axis`` (that axis is dropped)."""
    ax = axis % a.ndim
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return _record(np.take(a.data, index, axis=ax), (a,), grad_fn)


def concat_last(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[-1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=-1), tensors,
                   lambda g: tuple(np.split(g, splits, axis=-1)))


# --------------------------------------------------------------------------
# linear algebra and convolutions
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, label: str = "matmul") -> Tensor:
    """``a @ b`` over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix or has
    the same batch axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    _count(label, out.size * ad.shape[-1])

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), grad_fn)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, mode: str = "forward") -> Tensor:
    """1-D convolution with valid padding, channels last.

    ``x`` is ``(..., L, C_in)``, ``w`` is ``(k, C_in, C_out)``. In
    ``"forward"`` mode the output length is ``(L - k) // stride + 1``; in
    ``"transposed"`` mode it is ``(L - 1) * stride + k``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if w.ndim != 3 or w.shape[1] != x.shape[-1]:
        raise ValueError(f"conv1d channel mismatch: x {x.shape}, w {w.shape}")
    k = w.shape[0]
    L = x.shape[-2]
    xd, wd = x.data, w.data
    if mode == "forward":
        if k > L:
            raise ValueError(f"kernel size {k} exceeds input length {L}")
        L_out = (L - k) // stride + 1
        span = (L_out - 1) * stride + 1
        out = 0.0
        for j in range(k):
            out = out + xd[..., j:j + span:stride, :] @ wd[j]
        _count("conv1d", L_out * k * w.shape[1] * w.shape[2] * int(np.prod(xd.shape[:-2])))

        def grad_fn(g):
            gx = np.zeros_like(xd)
            gw = np.empty_like(wd)
            g2 = g.reshape(-1, g.shape[-1])
            for j in range(k):
                xs = xd[..., j:j + span:stride, :]
                gx[..., j:j + span:stride, :] += g @ wd[j].T
                gw[j] = xs.reshape(-1, xs.shape[-1]).T @ g2
            return gx, gw

    elif mode == "transposed":
        L_out = (L - 1) * stride + k
        span = (L - 1) * stride + 1
        out = np.zeros(xd.shape[:-2] + (L_out, wd.shape[2]))
        for j in range(k):
            out[..., j:j + span:stride, :] += xd @ wd[j]
        _count("conv1d_transposed", L * k * w.shape[1] * w.shape[2] * int(np.prod(xd.shape[:-2])))

        def grad_fn(g):
            gx = np.zeros_like(xd)
            gw = np.empty_like(wd)
            x2 = xd.reshape(-1, xd.shape[-1])
            for j in range(k):
                gs = g[..., j:j + span:stride, :]
                gx += gs @ wd[j].T
                gw[j] = x2.T @ gs.reshape(-1, gs.shape[-1])
            return gx, gw

    else:
        raise ValueError(f"unknown conv1d mode {mode!r}")
    return _record(np.asarray(out), (x, w), grad_fn)


def depthwise_causal_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel causal convolution: ``y[t,c] = sum_j w[j,c] x[t-k+1+j,c]``.

    ``x`` is ``(..., L, C)`` and ``w`` is ``(k, C)``; positions before the
    sequence start read as zero, so the output keeps length ``L``.
    """
    x, w = as_tensor(x), as_tensor(w)
    k, C = w.shape
    if x.shape[-1] != C:
        raise ValueError(f"depthwise conv channel mismatch: x {x.shape}, w {w.shape}")
    xd, wd = x.data, w.data
    L = xd.shape[-2]
    pad = [(0, 0)] * xd.ndim
    pad[-2] = (k - 1, 0)
    xp = np.pad(xd, pad)
    out = np.zeros_like(xd)
    for j in range(k):
        out += xp[..., j:j + L, :] * wd[j]
    _count("depthwise_conv", xd.size * k)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for j in range(k):
            gxp[..., j:j + L, :] += g * wd[j]
            gw[j] = (g * xp[..., j:j + L, :]).reshape(-1, C).sum(axis=0)
        return gxp[..., k - 1:, :], gw

    return _record(out, (x, w), grad_fn)


# --------------------------------------------------------------------------
# normalisation, softmax, lookup
# --------------------------------------------------------------------------

def softmax_last_axis(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), grad_fn)


def log_softmax_last_axis(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _record(out, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def grad_fn(g):
        gg = _unbroadcast(g * xhat, gd.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gd
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(xhat * gd + beta.data, (x, gamma, beta), grad_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    td = table.data
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise IndexError(f"token id out of range [0, {td.shape[0]})")

    def grad_fn(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (gt,)

    return _record(td[ids], (table,), grad_fn)


def take_last(a: Tensor, ids) -> Tensor:
    """``out[...] = a[..., ids[...]]`` -- pick one entry per last-axis slice."""
    ids = np.asarray(ids, dtype=np.int64)
    ad = a.data
    picked = np.take_along_axis(ad, ids[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        full = np.zeros_like(ad)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        return (full,)

    return _record(picked, (a,), grad_fn)


# --------------------------------------------------------------------------
# selective state-space scan (fused forward and backward)
# --------------------------------------------------------------------------

_PHI_CUTOFF = 1e-4


def _phi(z: np.ndarray) -> np.ndarray:
    """(e^z - 1) / z, with a 3-term Taylor series near zero."""
    small = np.abs(z) < _PHI_CUTOFF
    zs = np.where(small, 1.0, z)
    exact = np.expm1(zs) / zs
    series = 1.0 + z / 2.0 + z * z / 6.0
    return np.where(small, series, exact)


def _dphi(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < _PHI_CUTOFF
    zs = np.where(small, 1.0, z)
    exact = (np.exp(zs) * (zs - 1.0) + 1.0) / (zs * zs)
    series = 0.5 + z / 3.0 + z * z / 8.0
    return np.where(small, series, exact)


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tensor:
    """Zero-order-hold selective SSM over the sequence axis.

    Shapes: ``x``, ``delta`` are ``(..., L, D)``; ``A`` is ``(D, N)``;
    ``B``, ``C`` are ``(..., L, N)``. With ``z = delta*A``::

        h_t = exp(z_t) * h_{t-1} + phi(z_t) * delta_t * B_t * x_t
        y_t = sum_n C_t[n] * h_t[:, n]

    where ``phi(z) = (e^z - 1)/z``. The recurrence is unrolled with a single
    Python loop over ``L``; the backward pass is the matching reverse scan.
    """
    x, delta, A, B, C = (as_tensor(v) for v in (x, delta, A, B, C))
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
    L = xd.shape[-2]
    z = dd[..., None] * Ad                        # (..., L, D, N)
    with np.errstate(over="ignore", invalid="ignore"):
        abar = np.exp(z)
        ph = _phi(z)
        bbar = ph * (dd[..., None] * Bd[..., None, :])  # (..., L, D, N)
        u = bbar * xd[..., None]
    if not (np.all(np.isfinite(abar)) and np.all(np.isfinite(u))):
        raise FloatingPointError("non-finite value in selective scan; check the A initialisation")
    hs = np.empty_like(u)
    h = np.zeros(u.shape[:-3] + u.shape[-2:])
    for t in range(L):
        h = abar[..., t, :, :] * h + u[..., t, :, :]
        hs[..., t, :, :] = h
    y = np.einsum("...ldn,...ln->...ld", hs, Cd)
    batch = int(np.prod(xd.shape[:-2]))
    D, N = Ad.shape
    # state update (2 MACs per state entry) plus readout
    _count("scan", 3 * batch * L * D * N)

    def grad_fn(g):
        gC = np.einsum("...ld,...ldn->...ln", g, hs)
        gh_direct = g[..., None] * Cd[..., None, :]    # (..., L, D, N)
        gh = np.empty_like(hs)
        carry = np.zeros_like(h)
        for t in range(L - 1, -1, -1):
            carry = gh_direct[..., t, :, :] + carry
            gh[..., t, :, :] = carry
            carry = carry * abar[..., t, :, :]
        h_prev = np.zeros_like(hs)
        h_prev[..., 1:, :, :] = hs[..., :-1, :, :]
        ga = gh * h_prev
        gu = gh
        gx = (gu * bbar).sum(axis=-1)
        gbbar = gu * xd[..., None]
        g_ph = gbbar * dd[..., None] * Bd[..., None, :]
        gdelta = (gbbar * ph * Bd[..., None, :]).sum(axis=-1)
        gB = (gbbar * ph * dd[..., None]).sum(axis=-2)
        gz = ga * abar + g_ph * _dphi(z)
        gdelta = gdelta + (gz * Ad).sum(axis=-1)
        gA = (gz * dd[..., None]).reshape(-1, D, N).sum(axis=0)
        return gx, gdelta, gA, gB, gC

    return _record(y, (x, delta, A, B, C), grad_fn)


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               coords: Iterable[tuple[int, int]] | None = None,
               floor: float = 1e-8) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f(*inputs)`` must return a scalar Tensor. The error of a coordinate is
    ``|analytic - numeric| / max(|numeric|, floor)``. ``coords`` restricts the
    check to ``(input index, flat index)`` pairs; by default every coordinate
    of every input is checked.
    """
    with Tape() as tape:
        loss = f(*inputs)
    grads = backward(tape, loss)
    if coords is None:
        coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    worst = 0.0
    for i, j in coords:
        t = inputs[i]
        flat = t.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = f(*inputs).item()
        flat[j] = orig - eps
        down = f(*inputs).item()
        flat[j] = orig
        numeric = (up - down) / (2.0 * eps)
        analytic = grads[t].reshape(-1)[j] if t in grads else 0.0
        err = abs(analytic - numeric) / max(abs(numeric), floor)
        worst = max(worst, err)
    return worst


def sinusoidal(position: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer positions, ``(..., dim)``."""
    half = dim // 2
    freqs = np.exp(-math.log(base) * np.arange(half) / max(half, 1))
    ang = np.asarray(position, dtype=np.float64)[..., None] * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb
