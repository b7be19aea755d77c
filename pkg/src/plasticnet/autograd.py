"""Small reverse-mode autodiff engine over dense float64 arrays.

Operations are recorded on the active :class:`Tape` (one per episode or per
truncated BPTT window).  Graph nodes are whole arrays, never scalars, so a
200-step unroll of a plastic layer stays at a few thousand nodes.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape():
    ...     loss = (x * x).sum()
    ...     grads = backward(loss)
    >>> float(grads[x][0])
    6.0
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one forward pass.

    Entering the tape makes it current for this thread; operations on tensors
    that require gradients are appended in execution order.  ``backward``
    walks the records once in reverse and then frees them.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: "Tensor", params: Iterable["Tensor"] | None = None):
        return backward(loss, params)


class no_grad:
    """Context in which nothing is recorded, even if a tape is open outside."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    # -- basic properties ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_constant(self) -> bool:
        return not self.requires_grad

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    tape = active_tape()
    out = Tensor(data)
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._tape = tape
                tape.records.append((out, parents, backward_fn))
                break
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise binary ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


# -- linear algebra ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of ``a[..., m, k]`` (or ``a[k]``) with ``b[k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = g @ bd.T
        a2 = ad.reshape(-1, ad.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(ad @ bd, (a, b), backward_fn)


def vecmat(x, m) -> Tensor:
    """Batched vector-matrix product: ``x[b, n]`` with ``m[b, n, k]`` -> ``[b, k]``."""
    x, m = as_tensor(x), as_tensor(m)
    if x.ndim != 2 or m.ndim != 3 or x.shape[0] != m.shape[0] or x.shape[1] != m.shape[1]:
        raise ShapeError(f"vecmat: incompatible shapes {x.shape} and {m.shape}")
    xd, md = x.data, m.data
    out = np.matmul(xd[:, None, :], md)[:, 0, :]
    return _record(out, (x, m),
                   lambda g: (np.matmul(md, g[:, :, None])[:, :, 0],
                              _outer(xd, g)))


def outer(x, y) -> Tensor:
    """Batched outer product: ``x[b, n]``, ``y[b, k]`` -> ``[b, n, k]``."""
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"outer: incompatible shapes {x.shape} and {y.shape}")
    xd, yd = x.data, y.data
    return _record(_outer(xd, yd), (x, y),
                   lambda g: (np.matmul(g, yd[:, :, None])[:, :, 0],
                              np.matmul(xd[:, None, :], g)[:, 0, :]))


def plastic_vecmat(pre, alpha, hebb) -> Tensor:
    """Fused ``vecmat(pre, alpha * hebb)``.

    ``alpha`` is ``[n, k]`` (per connection) or ``[k]`` (per post-synaptic
    neuron); ``hebb`` is ``[b, n, k]``.
    """
    pre, alpha, hebb = as_tensor(pre), as_tensor(alpha), as_tensor(hebb)
    if hebb.ndim != 3 or pre.shape != hebb.shape[:2] or alpha.shape not in (hebb.shape[1:], hebb.shape[2:]):
        raise ShapeError(f"plastic_vecmat: incompatible shapes {pre.shape}, {alpha.shape}, {hebb.shape}")
    xd, ad, hd = pre.data, alpha.data, hebb.data
    w_eff = ad * hd
    out = np.matmul(xd[:, None, :], w_eff)[:, 0, :]

    def backward_fn(g):
        g_pre = np.matmul(w_eff, g[:, :, None])[:, :, 0]
        xg = _outer(xd, g)
        g_hebb = xg * ad
        g_alpha = _unbroadcast(xg * hd, ad.shape)
        return g_pre, g_alpha, g_hebb

    return _record(out, (pre, alpha, hebb), backward_fn)


def _outer(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.einsum("bi,bj->bij", x, y)


def hebbian_update(trace, rate, pre, post, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    """Fused ``hard_clip(trace + rate * outer(pre, post), lo, hi)``.

    ``rate`` broadcasts against ``[b, n, k]`` (scalar, per connection, or per
    batch element as ``[b, 1, 1]``).
    """
    trace, rate, pre, post = (as_tensor(t) for t in (trace, rate, pre, post))
    if trace.ndim != 3 or pre.shape != trace.shape[:2] or post.shape != (trace.shape[0], trace.shape[2]):
        raise ShapeError(f"hebbian_update: incompatible shapes {trace.shape}, {pre.shape}, {post.shape}")
    xd, yd, rd = pre.data, post.data, rate.data
    # one rate per batch element (or a single scalar): fold it into the pre vector
    row_rate = rd.size == 1 or rd.shape == (xd.shape[0], 1, 1)
    if row_rate:
        r = rd.reshape(-1, 1)
        out = trace.data + _outer(xd * r, yd)
    else:
        product = _outer(xd, yd)
        out = trace.data + rd * product
    np.clip(out, lo, hi, out=out)

    def backward_fn(g):
        inside = (out > lo) & (out < hi)
        gm = g if inside.all() else g * inside
        if row_rate:
            gy = np.matmul(gm, yd[:, :, None])[:, :, 0]
            g_rate = _unbroadcast((xd * gy).sum(axis=1).reshape(-1, 1, 1), rd.shape)
            g_pre = gy * r
            g_post = np.matmul((xd * r)[:, None, :], gm)[:, 0, :]
        else:
            g_rate = _unbroadcast(gm * _outer(xd, yd), rd.shape)
            gr = gm * rd
            g_pre = np.matmul(gr, yd[:, :, None])[:, :, 0]
            g_post = np.matmul(xd[:, None, :], gr)[:, 0, :]
        return gm, g_rate, g_pre, g_post

    return _record(out, (trace, rate, pre, post), backward_fn)


# -- unary ---------------------------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError(f"log of non-positive value (min {x.min()!r})")
    return _record(np.log(x), (a,), lambda g: (g / x,))


def unary(op: str, t) -> Tensor:
    fns = {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log}
    try:
        return fns[op](t)
    except KeyError:
        raise ValueError(f"unknown unary op {op!r}") from None


def hard_clip(a, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is 1 strictly inside, 0 elsewhere."""
    if not lo < hi:
        raise ContractError(f"hard_clip needs lo < hi, got {lo}, {hi}")
    a = as_tensor(a)
    x = a.data
    inside = (x > lo) & (x < hi)
    return _record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), backward_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# -- reductions and shape ------------------------------------------------------------

def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.asarray(out), (a,), backward_fn)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return sum_(a, axis) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), backward_fn)


def pick(a, idx) -> Tensor:
    """Select ``a[b, idx[b]]`` for each row ``b`` of a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _record(a.data[rows, idx], (a,), backward_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- backward and gradient checking --------------------------------------------------

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Backpropagate a scalar loss through its tape.

    Returns ``{leaf: dloss/dleaf}`` for every leaf reached (plus zeros for any
    requested ``params`` the loss does not depend on) and accumulates into each
    leaf's ``.grad``.  The tape's records are released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    tape = loss._tape
    if tape is not None:
        grads[id(loss)] = np.ones(loss.shape)
        for out, parents, fn in reversed(tape.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if not p.requires_grad:
                    continue
                key = id(p)
                if p._tape is None:
                    leaves[key] = p
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        tape.records.clear()
    elif loss.requires_grad:
        leaves[id(loss)] = loss
        grads[id(loss)] = np.ones(loss.shape)
    result = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    for p in params or ():
        if p not in result:
            result[p] = np.zeros(p.shape)
            if p.grad is None:
                p.grad = np.zeros(p.shape)
    return result


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` must rebuild its graph from ``params`` on every call and be
    deterministic.  The error for one entry is
    ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    with Tape():
        loss = f()
        analytic = backward(loss, params)
    for p in params:
        p.grad = None
    worst = 0.0
    for k, p in enumerate(params):
        label = p.name or f"param[{k}]"
        a = analytic[p]
        if not np.all(np.isfinite(a)):
            raise GradCheckError(f"non-finite analytic gradient for {label}")
        flat = p.data.reshape(-1)
        ga = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = f().item()
            flat[i] = orig - eps
            with no_grad():
                fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite loss while perturbing {label}[{i}]")
            num = (fp - fm) / (2.0 * eps)
            err = abs(ga[i] - num) / max(1e-12, abs(ga[i]) + abs(num))
            worst = max(worst, err)
    return worst
