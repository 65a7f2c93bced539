"""Dense tensors with a recording tape for reverse-mode differentiation.

Arrays are numpy-backed and row-major. Every differentiable computation goes
through :func:`apply`, which dispatches on a closed set of op kinds; each kind
has a forward rule and a backward rule living next to each other in ``_OPS``.

Recording only happens while a :class:`Tape` is active::

    with Tape() as tape:
        loss = apply("sum", apply("mul", x, x))
    grads = backward(tape, loss)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense array plus autodiff bookkeeping.

    Identity semantics: tensors hash by object identity so they can key the
    gradient map returned by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES.get(dtype, dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_id = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return "f64" if self.data.dtype == np.float64 else "f32"

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # thin operator sugar
    def __add__(self, other):
        return apply("add", self, _lift(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", self, factor=float(other))
        return apply("mul", self, _lift(other, self))

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __neg__(self):
        return apply("scale", self, factor=-1.0)

    def __sub__(self, other):
        return apply("add", self, -_lift(other, self))

    __radd__ = __add__
    __rmul__ = __mul__


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def constant(x, dtype="f32") -> Tensor:
    return Tensor(np.asarray(x), dtype=dtype)


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable
    node_id: int = -1


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node):
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        node.node_id = len(self.nodes)
        node.output.tape_id = node.node_id
        self.nodes.append(node)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


_ACTIVE: list = []


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class no_record:
    """Suspend recording (inference inside an active tape)."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)
        return False


# --------------------------------------------------------------------------
# op rules: forward(*arrays, **attrs) -> (out, backward(g) -> tuple of grads)
# --------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = a @ b

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb

    return out, back


def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _scale(a, factor):
    f = a.dtype.type(factor)
    return a * f, lambda g: (g * f,)


def _transpose(a, axes=None):
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return np.transpose(a, axes), lambda g: (np.transpose(g, inv),)


def _reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


def _concat(*xs, axis=0):
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {xs[0].shape} and {x.shape} differ off axis {axis}")
    out = np.concatenate(xs, axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return out, back


def _slice(a, axis, start, stop):
    ax = axis % a.ndim
    n = a.shape[ax]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: range [{start}:{stop}] out of bounds for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(a)
        full[idx] = g
        return (full,)

    return a[idx], back


def _embedding(table, ids):
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]}) for table {table.shape}")

    def back(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return table[ids], back


def _softmax(a, axis=-1, mask=None):
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, a.shape)
        except ValueError:
            raise ShapeError(f"softmax: mask {mask.shape} does not match logits {a.shape}") from None
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax: a row has no allowed positions")
        # disallowed logits are excluded entirely, as if they were -inf
        z = np.where(mask, a, -np.inf)
        z = z - z.max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(z), 0.0).astype(a.dtype)
    else:
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return y, back


def _layernorm(x, gain, bias, eps=1e-5):
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer-norm: gain {gain.shape}/bias {bias.shape} do not match {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain + bias

    def back(g):
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        gx_hat = g * gain
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return out, back


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = (x * cdf).astype(x.dtype)

    def back(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return out, back


def _tanh(x):
    y = np.tanh(x)
    return y, lambda g: (g * (1.0 - y * y),)


def _dropout(x, mask, scale=1.0):
    m = np.asarray(mask, dtype=x.dtype) * x.dtype.type(scale)
    try:
        np.broadcast_shapes(m.shape, x.shape)
    except ValueError:
        raise ShapeError(f"dropout-mask-apply: mask {m.shape} does not match {x.shape}") from None
    return x * m, lambda g: (_unbroadcast(g * m, x.shape),)


def _cross_entropy(logits, targets, smoothing=0.0):
    """Mean over rows of (1-s)*CE(target) + s*mean_v CE(v)."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross-entropy-from-logits: logits {logits.shape} vs targets {targets.shape}")
    n, v = logits.shape
    if n == 0:
        raise ShapeError("cross-entropy-from-logits: no rows")
    if targets.min() < 0 or targets.max() >= v:
        raise ShapeError(f"cross-entropy-from-logits: targets outside [0, {v})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    nll = -logp[rows, targets]
    smooth = -logp.mean(axis=1)
    loss = ((1.0 - smoothing) * nll + smoothing * smooth).mean()
    out = np.asarray(loss, dtype=logits.dtype)

    def back(g):
        p = np.exp(logp)
        q = np.full_like(logits, smoothing / v)
        q[rows, targets] += 1.0 - smoothing
        return ((p - q) * (g / n),)

    return out, back


def _l2_normalize(x, axis=-1):
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise ValueError("l2-normalize: zero vector has no direction")
    y = x / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return y, back


def _sum(x, axis=None, keepdims=False):
    out = np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return out, back


def _mean(x, axis=None, keepdims=False):
    out, sback = _sum(x, axis, keepdims)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    f = x.dtype.type(1.0 / count)
    return (out * f).astype(x.dtype), lambda g: sback(g * f)


_OPS = {
    "matmul": _matmul,
    "add": _add,
    "mul": _mul,
    "scale": _scale,
    "transpose": _transpose,
    "reshape": _reshape,
    "concat": _concat,
    "slice": _slice,
    "embedding": _embedding,
    "softmax": _softmax,
    "layer-norm": _layernorm,
    "gelu": _gelu,
    "tanh": _tanh,
    "dropout-mask-apply": _dropout,
    "cross-entropy-from-logits": _cross_entropy,
    "l2-normalize": _l2_normalize,
    "sum": _sum,
    "mean": _mean,
}

OP_KINDS = tuple(_OPS)


def apply(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    try:
        rule = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if not inputs:
        raise ShapeError(f"{kind}: no inputs")
    dt = inputs[0].data.dtype
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{kind}: inputs must be Tensors, got {type(t).__name__}")
        if t.data.dtype != dt:
            raise TypeError(f"{kind}: mixed dtypes {dt} and {t.data.dtype}")
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{kind}: non-finite input of shape {t.shape}")
    out_arr, back = rule(*[t.data for t in inputs], **attrs)
    out_arr = np.asarray(out_arr, dtype=dt)
    if not np.isfinite(out_arr).all():
        raise NonFiniteError(f"{kind}: produced non-finite output of shape {out_arr.shape}")
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape()
    out = Tensor(out_arr, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(Node(kind, inputs, out, back))
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Run the chain rule over ``tape`` in reverse recording order.

    Returns ``{leaf: grad}`` for every requires_grad leaf reached; leaves
    also get ``.grad`` set. The tape cannot be reused afterwards.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape.consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    produced = {id(n.output) for n in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    out = {}
    for key, t in leaves.items():
        g = np.asarray(grads[key], dtype=t.data.dtype)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for leaf {t.name or t.shape}")
        t.grad = g
        out[t] = g
    if not tape.nodes and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        out[loss] = loss.grad
    tape.nodes.clear()
    return out


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------


def _projection_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    return apply("sum", apply("mul", out, Tensor(weights)))


def grad_check_fn(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps=1e-5, seed=0,
                  coords: int | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the input tensors to any tensor; a fixed random projection
    turns it into a scalar so vector outputs are checked in every direction.
    ``coords`` caps the number of checked elements per input (randomly chosen).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires f64 inputs")
    rng = np.random.default_rng(seed)
    with no_record():
        probe = fn(*inputs)
    weights = rng.standard_normal(probe.shape)

    def f():
        with no_record():
            return float(_projection_loss(fn(*inputs), weights).data)

    with Tape() as tape:
        loss = _projection_loss(fn(*inputs), weights)
    grads = backward(tape, loss)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = grads.get(t, np.zeros_like(t.data))
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = rng.choice(flat.size, coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            fd = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


def grad_check(op_kind: str, inputs: Sequence[Tensor], eps=1e-5, seed=0, **attrs) -> float:
    if op_kind not in _OPS:
        raise ValueError(f"unsupported op kind {op_kind!r}")
    return grad_check_fn(lambda *xs: apply(op_kind, *xs, **attrs), inputs, eps=eps, seed=seed)


def parameters_finite(ts: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in ts)
