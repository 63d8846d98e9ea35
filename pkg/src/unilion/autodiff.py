"""Tape-based reverse-mode differentiation over a fixed set of array ops.

Every primitive accepts plain numpy arrays or :class:`Tensor` objects.
Arrays in give arrays out, so one forward implementation serves both
inference and training.  When a :class:`Tape` is active and at least one
input requires grad, the primitive appends a node carrying a closure that
maps the output cotangent to the input cotangents.

Modules that own a specialised kernel (scans, sparse convolution, losses)
register their own primitives through :func:`record`.
"""

from __future__ import annotations

import dataclasses
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from scipy import special

_state = threading.local()


class Tensor:
    """An array that may participate in gradient recording."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def value(x) -> np.ndarray:
    """Underlying array of ``x`` (identity on arrays)."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records primitive applications in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Tape | None:
    tapes = _stack()
    return tapes[-1] if tapes else None


def record(op: str, out: np.ndarray, inputs: Sequence[Any], backward) -> Any:
    """Wrap a primitive result and, when gradients are needed, log a node.

    ``backward(g)`` must return one cotangent (or ``None``) per entry of
    ``inputs``, each already reduced to that input's shape.
    """
    tensors = [x for x in inputs if isinstance(x, Tensor)]
    if not tensors:
        return out
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in tensors)
    result = Tensor(out, requires_grad=needs_grad)
    if needs_grad:
        tape.nodes.append(Node(op, tuple(inputs), result, backward))
    return result


def backward(tape: Tape, loss, params: Sequence[Tensor] | None = None):
    """Reverse sweep from a scalar ``loss``.

    Returns a list of gradients aligned with ``params`` (zeros for params the
    loss does not reach), or the raw ``{id(tensor): grad}`` map when
    ``params`` is None.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("backward needs a scalar Tensor loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for x, gx in zip(node.inputs, node.backward(g)):
            if gx is None or not isinstance(x, Tensor) or not x.requires_grad:
                continue
            key = id(x)
            grads[key] = grads[key] + gx if key in grads else gx
    if params is None:
        return grads
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(x) -> tuple:
    return np.shape(value(x))


# ---------------------------------------------------------------- arithmetic


def add(x, y):
    sx, sy = _shape(x), _shape(y)
    return record("add", value(x) + value(y), (x, y),
                  lambda g: (_unbroadcast(g, sx), _unbroadcast(g, sy)))


def sub(x, y):
    sx, sy = _shape(x), _shape(y)
    return record("sub", value(x) - value(y), (x, y),
                  lambda g: (_unbroadcast(g, sx), _unbroadcast(-g, sy)))


def mul(x, y):
    vx, vy = value(x), value(y)

    def bwd(g):
        return _unbroadcast(g * vy, vx.shape), _unbroadcast(g * vx, vy.shape)

    return record("mul", vx * vy, (x, y), bwd)


def div(x, y):
    vx, vy = value(x), value(y)
    out = vx / vy

    def bwd(g):
        return _unbroadcast(g / vy, vx.shape), _unbroadcast(-g * out / vy, vy.shape)

    return record("div", out, (x, y), bwd)


def where(cond, x, y):
    """Select ``x`` where ``cond`` else ``y``; ``cond`` is a constant mask."""
    cond = np.asarray(cond, dtype=bool)
    # python scalars stay weakly typed so float32 inputs stay float32
    vx, vy = (v if isinstance(v, (int, float)) else value(v) for v in (x, y))
    out = np.where(cond, vx, vy)

    def bwd(g):
        zero = np.zeros((), dtype=g.dtype)
        return (_unbroadcast(np.where(cond, g, zero), np.shape(vx)),
                _unbroadcast(np.where(cond, zero, g), np.shape(vy)))

    return record("where", out, (x, y), bwd)


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    vx = value(x)
    out = np.sum(vx, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, vx.shape).copy(),)

    return record("sum", np.asarray(out), (x,), bwd)


def mean(x, axis=None, keepdims: bool = False):
    vx = value(x)
    n = vx.size if axis is None else np.prod([vx.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    vx = value(x)
    return record("reshape", vx.reshape(shape), (x,), lambda g: (g.reshape(vx.shape),))


def concat_rows(xs: Sequence):
    """Concatenate along axis 0."""
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=0)
    bounds = np.cumsum([0] + [len(v) for v in vals])

    def bwd(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(vals)))

    return record("concat_rows", out, tuple(xs), bwd)


# -------------------------------------------------------------- elementwise


def exp(x):
    out = np.exp(value(x))
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x):
    vx = value(x)
    return record("log", np.log(vx), (x,), lambda g: (g / vx,))


def sigmoid(x):
    out = special.expit(value(x))
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x):
    vx = value(x)
    s = special.expit(vx)
    return record("silu", vx * s, (x,), lambda g: (g * s * (1.0 + vx * (1.0 - s)),))


_SQRT_HALF = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    vx = value(x)
    cdf = 0.5 * (1.0 + special.erf(vx * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * vx * vx)
    return record("gelu", vx * cdf, (x,), lambda g: (g * (cdf + vx * pdf),))


# ------------------------------------------------------------------- linear


def _rowwise_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # einsum's reduction depends only on the row it is computing, unlike BLAS
    # gemm whose blocking changes with the row count; group scans rely on this
    # to be bitwise independent of how rows are batched.
    flat = x.reshape(-1, x.shape[-1])
    return np.einsum("ti,oi->to", flat, w).reshape(x.shape[:-1] + (w.shape[0],))


def affine(x, weight, bias=None):
    """Row-wise ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    vx, vw = value(x), value(weight)
    if vx.shape[-1] != vw.shape[1]:
        raise ValueError(f"affine: input has {vx.shape[-1]} channels, weight expects {vw.shape[1]}")
    out = _rowwise_matmul(vx, vw)
    if bias is not None:
        vb = value(bias)
        if vb.shape != (vw.shape[0],):
            raise ValueError(f"affine: bias shape {vb.shape} != ({vw.shape[0]},)")
        out = out + vb

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = vx.reshape(-1, vx.shape[-1])
        gx = (g2 @ vw).reshape(vx.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    return record("affine", out, (x, weight, bias), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalise each row over its last axis, then scale and shift."""
    vx, vg, vb = value(x), value(gamma), value(beta)
    if vg.shape != vx.shape[-1:] or vb.shape != vx.shape[-1:]:
        raise ValueError("layer_norm: gamma/beta must match the channel count")
    mu = vx.mean(axis=-1, keepdims=True)
    xc = vx - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * vg + vb

    def bwd(g):
        gxhat = g * vg
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", out, (x, gamma, beta), bwd)


# ----------------------------------------------------------- index routing


def gather_rows(x, index):
    """``x[index]`` along axis 0, with ``-1`` entries producing zero rows."""
    vx = value(x)
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = vx[safe]
    if not valid.all():
        out[~valid] = 0.0

    def bwd(g):
        gx = np.zeros_like(vx)
        flat_g = g.reshape((-1,) + vx.shape[1:])
        flat_i = index.reshape(-1)
        keep = flat_i >= 0
        np.add.at(gx, flat_i[keep], flat_g[keep])
        return (gx,)

    return record("gather_rows", out, (x,), bwd)


def segment_sum(x, segment, count: int):
    """Sum rows of ``x`` into ``count`` buckets (fixed row-order accumulation)."""
    vx = value(x)
    segment = np.asarray(segment, dtype=np.int64)
    out = np.zeros((count,) + vx.shape[1:], dtype=vx.dtype)
    np.add.at(out, segment, vx)
    return record("segment_sum", out, (x,), lambda g: (g[segment],))


def segment_mean(x, segment, count: int):
    """Mean of the rows of ``x`` falling into each of ``count`` buckets."""
    vx = value(x)
    segment = np.asarray(segment, dtype=np.int64)
    sizes = np.bincount(segment, minlength=count).astype(vx.dtype)
    total = np.zeros((count,) + vx.shape[1:], dtype=vx.dtype)
    np.add.at(total, segment, vx)
    shape = (count,) + (1,) * (vx.ndim - 1)
    denom = np.maximum(sizes, 1).reshape(shape)
    out = total / denom
    return record("segment_mean", out, (x,), lambda g: ((g / denom)[segment],))


# ------------------------------------------------------------ param trees


def named_leaves(tree, prefix: str = "") -> Iterator[tuple[str, Any]]:
    """Yield ``(dotted_name, leaf)`` for every array/Tensor in a param tree.

    Trees are nested dataclasses, lists/tuples and dicts.
    """
    if isinstance(tree, (Tensor, np.ndarray)):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        for f in dataclasses.fields(tree):
            yield from named_leaves(getattr(tree, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(tree, dict):
        for k in sorted(tree):
            yield from named_leaves(tree[k], f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from named_leaves(item, f"{prefix}[{i}]")


def tree_map(fn: Callable[[Any], Any], tree):
    """Rebuild a param tree with ``fn`` applied to each array/Tensor leaf."""
    if isinstance(tree, (Tensor, np.ndarray)):
        return fn(tree)
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        return dataclasses.replace(tree, **{f.name: tree_map(fn, getattr(tree, f.name))
                                            for f in dataclasses.fields(tree) if f.init})
    if isinstance(tree, dict):
        return {k: tree_map(fn, v) for k, v in tree.items()}
    if isinstance(tree, list):
        return [tree_map(fn, v) for v in tree]
    if isinstance(tree, tuple):
        return tuple(tree_map(fn, v) for v in tree)
    return tree


def trainable(tree):
    """Copy of ``tree`` with every leaf wrapped as a grad-requiring Tensor."""
    return tree_map(lambda a: Tensor(np.array(value(a), copy=True), requires_grad=True), tree)


def detached(tree):
    """Copy of ``tree`` with every leaf as a plain array."""
    return tree_map(lambda a: np.array(value(a), copy=True), tree)


# ------------------------------------------------------ finite differences


@dataclass
class GradientReport:
    """Analytic-vs-central-difference comparison."""

    errors: dict[str, float]
    eps: float
    mode: str = "coordinate"
    directions: int = 0
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_error <= tol

    def to_dict(self) -> dict:
        return {"label": self.label, "mode": self.mode, "eps": self.eps,
                "directions": self.directions, "max_error": self.max_error,
                "errors": self.errors, "extra": self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GradientReport":
        return cls(errors=dict(d["errors"]), eps=d["eps"], mode=d["mode"],
                   directions=d["directions"], label=d.get("label", ""), extra=d.get("extra", {}))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _scalar(out) -> float:
    return float(np.asarray(value(out)).reshape(()))


def fd_check(forward: Callable[[], Any], params: Sequence[Tensor], eps: float = 1e-5,
             names: Sequence[str] | None = None, directions: int | None = None,
             seed: int = 0, label: str = "") -> GradientReport:
    """Compare tape gradients of ``forward()`` against central differences.

    With ``directions=None`` every scalar of every param is perturbed.
    Otherwise ``directions`` random unit vectors over the concatenated
    params are used and the directional derivatives are compared.
    Perturbations are applied in place to ``param.data`` and undone.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    names = list(names) if names is not None else [p.name or f"p{i}" for i, p in enumerate(params)]
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("finite-difference checks run in float64 only")
    with Tape() as tape:
        loss = forward()
    grads = backward(tape, loss, params) if isinstance(loss, Tensor) else [np.zeros_like(p.data) for p in params]

    errors: dict[str, float] = {}
    if directions is None:
        for name, p, g in zip(names, params, grads):
            worst = 0.0
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(forward())
                flat[i] = orig - eps
                fm = _scalar(forward())
                flat[i] = orig
                fd = (fp - fm) / (2.0 * eps)
                worst = max(worst, float(relative_error(gflat[i], fd)))
            errors[name] = worst
        return GradientReport(errors, eps, "coordinate", 0, label)

    rng = np.random.default_rng(seed)
    originals = [p.data.copy() for p in params]
    for d in range(directions):
        vecs = [rng.standard_normal(p.data.shape) for p in params]
        norm = np.sqrt(np.sum([np.sum(v * v) for v in vecs]))
        vecs = [v / norm for v in vecs]
        analytic = float(np.sum([np.sum(g * v) for g, v in zip(grads, vecs)]))
        for p, o, v in zip(params, originals, vecs):
            p.data[...] = o + eps * v
        fp = _scalar(forward())
        for p, o, v in zip(params, originals, vecs):
            p.data[...] = o - eps * v
        fm = _scalar(forward())
        for p, o in zip(params, originals):
            p.data[...] = o
        errors[f"direction[{d}]"] = float(relative_error(analytic, (fp - fm) / (2.0 * eps)))
    return GradientReport(errors, eps, "directions", directions, label)
