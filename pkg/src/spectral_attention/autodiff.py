"""Dense float64 tensors with reverse-mode differentiation.

Every forward reduction accumulates sequentially along the reduced axis.
That makes a reduced element independent of how many other rows share the
array, so a masked or padded computation reproduces the unpadded one bit for
bit. There is no operator fusion and there are no views.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operators
    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], tuple) else axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, tuple(parents), backward_fn, op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = np.sum(grad, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = np.sum(grad, axis=axes, keepdims=True)
    return grad.reshape(shape)


def ordered_sum(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Sum accumulating strictly in index order along each reduced axis."""
    x = np.asarray(x, dtype=np.float64)
    if axis is None:
        out = np.array(math.fsum(x.ravel().tolist())) if x.size else np.array(0.0)
        return out.reshape((1,) * x.ndim) if keepdims else out
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(sorted(a % x.ndim for a in axes))
    out = x
    for a in reversed(axes):
        moved = np.moveaxis(out, a, 0)
        if moved.shape[0] == 0:
            acc = np.zeros(moved.shape[1:])
        else:
            acc = moved[0].copy()
            for k in range(1, moved.shape[0]):
                acc = acc + moved[k]
        out = np.expand_dims(acc, a) if keepdims else acc
    return out


# -- elementwise -------------------------------------------------------------


def _binary(a, b, fwd, grad_a, grad_b, op):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward_fn(g):
        return (
            _unbroadcast(grad_a(g, a.data, b.data, out), a.shape) if a.requires_grad else None,
            _unbroadcast(grad_b(g, a.data, b.data, out), b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward_fn, op)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, *_: g, lambda g, *_: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, "mul")


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y), "div")


def _unary(x, fwd, grad, op):
    x = as_tensor(x)
    out = fwd(x.data)
    return _record(out, (x,), lambda g: (grad(g, x.data, out),), op)


def relu(x) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0), "relu")


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda g, v, o: g * o, "exp")


def log(x) -> Tensor:
    return _unary(x, np.log, lambda g, v, o: g / v, "log")


def abs_(x) -> Tensor:
    return _unary(x, np.abs, lambda g, v, o: g * np.sign(v), "abs")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is 1 inside the interval, 0 outside."""
    return _unary(x, lambda v: np.clip(v, lo, hi), lambda g, v, o: g * ((v >= lo) & (v <= hi)), "clamp")


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True; those entries get zero gradient."""
    mask = np.asarray(mask, dtype=bool)
    return _unary(x, lambda v: np.where(mask, value, v), lambda g, v, o: _unbroadcast(np.where(mask, 0.0, g), v.shape), "masked_fill")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    return _binary(a, b, lambda x, y: np.where(cond, x, y),
                   lambda g, *_: np.where(cond, g, 0.0), lambda g, *_: np.where(cond, 0.0, g), "where")


# -- shape ops ----------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc
    return _record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, backward_fn, "concat")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[idx])

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (x,), backward_fn, "getitem")


def scatter(src, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``out[index] = src``; ``index`` must not repeat."""
    src = as_tensor(src)
    out = np.zeros(shape)
    out[index] = src.data
    return _record(out, (src,), lambda g: (_unbroadcast(g[index], src.shape),), "scatter")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.array(np.broadcast_to(x.data, shape))
    return _record(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


# -- reductions ---------------------------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = ordered_sum(x.data, axis, keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(sorted(a % x.ndim for a in axes)))
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward_fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), backward_fn, "matmul")


def ordered_matmul(x, w) -> Tensor:
    """``x @ w`` for ``x`` of shape (..., K) and 2-D ``w``, accumulating over K in order.

    Each output element depends only on its own row, unlike BLAS kernels
    whose rounding can change with the number of rows.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"ordered_matmul: incompatible shapes {x.shape} and {w.shape}")
    acc = x.data[..., 0:1] * w.data[0]
    for k in range(1, w.shape[0]):
        acc = acc + x.data[..., k:k + 1] * w.data[k]

    def backward_fn(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _record(acc, (x, w), backward_fn, "ordered_matmul")


def ordered_bmm(a, b) -> Tensor:
    """Batched ``a @ b`` over the last two axes, accumulating over the inner axis in order."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"ordered_bmm: incompatible shapes {a.shape} and {b.shape}")
    acc = a.data[..., 0:1] * b.data[..., 0:1, :]
    for k in range(1, a.shape[-1]):
        acc = acc + a.data[..., k:k + 1] * b.data[..., k:k + 1, :]

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(acc, (a, b), backward_fn, "ordered_bmm")


def linear(x, weight, bias=None, ordered: bool = False) -> Tensor:
    out = ordered_matmul(x, weight) if ordered else matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- neural-net ops -----------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax; entries at ``-inf`` get exactly 0, all-``-inf`` slices give all zeros."""
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    s = ordered_sum(e, axis=axis, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    out = np.where(s > 0, e / safe, 0.0)

    def backward_fn(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), backward_fn, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(ordered_sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def backward_fn(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (x,), backward_fn, "log_softmax")


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis with biased variance; constants map to ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    mu = ordered_sum(x.data, axis=-1, keepdims=True) * (1.0 / n)
    xc = x.data - mu
    var = ordered_sum(xc * xc, axis=-1, keepdims=True) * (1.0 / n)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            m1 = np.mean(gh, axis=-1, keepdims=True)
            m2 = np.mean(gh * xhat, axis=-1, keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), backward_fn, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be below 1")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)


# -- backward -----------------------------------------------------------------


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- gradient checking --------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_err: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    kinks_skipped: dict = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.worst:.3e} tol={self.tol:.0e} coords={sum(self.checked.values())}"


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    rel_floor: float = 1e-4,
    kink_tol: float = 1e-3,
) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, rel_floor)``. The floor keeps
    structurally zero gradients (key biases under softmax, for instance) from
    dividing finite-difference round-off, about 1e-11 here, by ~0. A coordinate is
    skipped as a kink when its one-sided slopes differ by more than
    ``kink_tol * max(1, |slope|)``. Failures are reported, not raised.
    """
    named = dict(inputs) if isinstance(inputs, Mapping) else {str(i): t for i, t in enumerate(inputs)}
    for t in named.values():
        t.grad = None
    loss = f()
    backward(loss)
    analytic = {k: (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for k, t in named.items()}

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol)
    with no_grad():
        f0 = f().item()
        for name, t in named.items():
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            worst, skipped = 0.0, 0
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                fp = f().item()
                flat[c] = orig - eps
                fm = f().item()
                flat[c] = orig
                d_plus, d_minus = (fp - f0) / eps, (f0 - fm) / eps
                if abs(d_plus - d_minus) > kink_tol * max(1.0, abs(d_plus), abs(d_minus)):
                    skipped += 1
                    continue
                num = (fp - fm) / (2 * eps)
                a = analytic[name].reshape(-1)[c]
                err = abs(a - num) / max(abs(a), abs(num), rel_floor)
                worst = max(worst, err)
            report.max_rel_err[name] = worst
            report.checked[name] = len(coords) - skipped
            report.kinks_skipped[name] = skipped
    return report


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(params: Mapping[str, Tensor | np.ndarray], path) -> None:
    """Flat JSON ``{name: {"shape": [...], "values": [...]}}``."""
    blob = {}
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=float)
        blob[name] = {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path) -> dict:
    blob = json.loads(Path(path).read_text())
    return {name: np.asarray(v["values"], dtype=float).reshape(v["shape"]) for name, v in blob.items()}
