"""Dense tensors with reverse-mode automatic differentiation.

Only the primitives a small decoder-only transformer needs are provided.
Every primitive checks its output for NaN/Inf and raises
:class:`NumericFault` rather than propagating a poisoned value.

Reductions come in two flavours.  The *ordered* kernels accumulate strictly
left to right along the reduced axis with one rounding per step, so the value
of an output element depends only on its own operands and not on how many
rows were evaluated together.  The *fast* kernels defer to BLAS / numpy's
pairwise summation.  By default 64-bit tensors use ordered reductions and
32-bit tensors use fast ones; :func:`reduction_order` overrides this.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PRECISIONS = {"32": np.float32, "64": np.float64}


class ShapeError(ValueError):
    """An operand does not have the shape a primitive requires."""

    def __init__(self, op: str, operand: str, expected, got):
        self.op = op
        self.operand = operand
        self.expected = expected
        self.got = tuple(got) if got is not None else None
        super().__init__(f"{op}: operand '{operand}' has shape {self.got}, expected {expected}")


class NumericFault(ArithmeticError):
    """A primitive produced a non-finite value."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite value in output")


class GradientStateError(RuntimeError):
    pass


class _Mode:
    grad_enabled = True
    reduction = "auto"


@contextlib.contextmanager
def no_grad():
    prev = _Mode.grad_enabled
    _Mode.grad_enabled = False
    try:
        yield
    finally:
        _Mode.grad_enabled = prev


@contextlib.contextmanager
def reduction_order(mode: str):
    """Force reductions to ``"ordered"`` or ``"fast"`` (``"auto"`` restores the default)."""
    if mode not in ("auto", "ordered", "fast"):
        raise ValueError(f"unknown reduction order {mode!r}")
    prev = _Mode.reduction
    _Mode.reduction = mode
    try:
        yield
    finally:
        _Mode.reduction = prev


def _ordered(dtype) -> bool:
    if _Mode.reduction == "auto":
        return dtype == np.float64
    return _Mode.reduction == "ordered"


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"precision must be '32' or '64', got {precision!r}") from None
    if isinstance(precision, int):
        return resolve_dtype(str(precision))
    return np.dtype(precision)


# -- ordered kernels --------------------------------------------------------


def _osum_last(x: np.ndarray) -> np.ndarray:
    """Left-to-right sum over the last axis, keepdims."""
    n = x.shape[-1]
    acc = x[..., 0:1].copy()
    for j in range(1, n):
        acc += x[..., j : j + 1]
    return acc


def _omatmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulating over the contraction index in order."""
    k = a.shape[-1]
    acc = a[..., :, 0:1] * b[..., 0:1, :]
    for j in range(1, k):
        acc += a[..., :, j : j + 1] * b[..., j : j + 1, :]
    return acc


def _sum_last(x: np.ndarray, ordered: bool) -> np.ndarray:
    return _osum_last(x) if ordered else x.sum(axis=-1, keepdims=True)


def _mm(a: np.ndarray, b: np.ndarray, ordered: bool) -> np.ndarray:
    return _omatmul(a, b) if ordered else a @ b


# -- tensor -----------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            self.data = np.asarray(data)  # keep the scalar's own precision
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "64" if self.data.dtype == np.float64 else "32"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar("item", self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)


def _not_scalar(op: str, t: Tensor):
    raise ShapeError(op, t.name or "tensor", "()", t.shape)


def tensor(data, precision="64", requires_grad: bool = False, name: str | None = None) -> Tensor:
    arr = np.array(data, dtype=resolve_dtype(precision))
    return Tensor(arr, requires_grad=requires_grad, name=name)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _finite(data: np.ndarray, op: str) -> None:
    s = float(data.sum()) if data.size else 0.0
    if not math.isfinite(s) and not np.isfinite(data).all():
        raise NumericFault(op)


# ops that only move values around cannot create a non-finite entry
_MOVES = frozenset({"reshape", "transpose", "getitem", "concat", "embedding"})


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if op not in _MOVES:
        _finite(data, op)
    out = Tensor(data)
    out.op = op
    if _Mode.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    tail = a.shape[a.ndim - b.ndim :] if b.ndim <= a.ndim else None
    if tail is None or any(bs not in (1, s) for bs, s in zip(b.shape, tail)):
        raise ShapeError(op, "rhs", f"{a.shape} or a trailing-broadcastable shape", b.shape)


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)

    def backward(g):
        return (
            g if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast("sub", a, b)

    def backward(g):
        return (
            g if a.requires_grad else None,
            -_unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast("mul", a, b)

    def backward(g):
        return (
            g * b.data if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, k: float) -> Tensor:
    return _node(a.data * a.dtype.type(k), (a,), lambda g: (g * a.dtype.type(k),), "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (the GPT-2 variant)."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    half = d.dtype.type(0.5)
    t = d * d
    t *= d
    t *= k
    t += d
    t *= c
    np.tanh(t, out=t)
    out = t + 1
    out *= d
    out *= half

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2), with few temporaries
        du = d * d
        du *= 3 * k
        du += 1
        du *= c
        sech2 = t * t
        np.subtract(1, sech2, out=sech2)
        sech2 *= d
        sech2 *= du
        sech2 += 1
        sech2 += t
        sech2 *= half
        sech2 *= g
        return (sech2,)

    return _node(out, (x,), backward, "gelu")


# -- shape ops --------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.name or "x", f"size {x.data.size}", shape) from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def _distinct(index, shape) -> bool:
    """True when an integer-array index never selects the same element twice."""
    items = index if isinstance(index, tuple) else (index,)
    arrays = [np.asarray(i) for i in items]
    if not arrays or any(a.dtype.kind not in "iu" for a in arrays):
        return False
    try:
        flat = np.ravel_multi_index(np.broadcast_arrays(*arrays), shape[: len(arrays)], mode="wrap")
    except ValueError:
        return False
    return np.unique(flat).size == flat.size


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic or _distinct(index, x.shape):
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.ascontiguousarray(out), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (rows of the sequence axis by default)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", "tensors", "at least one operand", ())
    ref = tensors[0]
    ax = axis % ref.ndim
    for i, t in enumerate(tensors[1:], 1):
        if t.ndim != ref.ndim or any(s != r for j, (s, r) in enumerate(zip(t.shape, ref.shape)) if j != ax):
            expected = tuple("*" if j == ax else s for j, s in enumerate(ref.shape))
            raise ShapeError("concat", f"tensors[{i}]", expected, t.shape)
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def total(x: Tensor) -> Tensor:
    if _ordered(x.dtype):
        out = _osum_last(x.data.reshape(1, -1)).reshape(())
    else:
        out = x.data.sum()
    return _node(np.asarray(out, dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(total(x), 1.0 / n)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``(..., n, k) @ (k, m)`` or batched ``(..., n, k) @ (..., k, m)``."""
    if a.ndim < 2 and b.ndim < 2:
        raise ShapeError("matmul", "lhs", "(..., n, k)", a.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "rhs", f"({a.shape[-1]}, ...)", b.shape)
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError("matmul", "rhs", a.shape[:-2] + ("k", "m"), b.shape)
    out = _mm(a.data, b.data, _ordered(a.dtype))

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) zeroes excluded entries exactly."""
    if x.shape[-1] == 0:
        raise ShapeError("softmax", "x", "non-empty last axis", x.shape)
    ordered = _ordered(x.dtype)
    d = x.data
    if mask is not None:
        d = np.where(mask, d, -np.inf)
    m = d.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericFault("softmax")
    e = np.exp(d - m)
    p = e / _sum_last(e, ordered)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", "gain/bias", (d,), gain.shape if gain.shape != (d,) else bias.shape)
    ordered = _ordered(x.dtype)
    inv_d = x.dtype.type(1.0 / d)
    xd = x.data
    mu = _sum_last(xd, ordered) * inv_d
    xc = xd - mu
    var = _sum_last(xc * xc, ordered) * inv_d
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _node(out, (x, gain, bias), backward, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V, d) at integer ``ids``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", "ids", f"values in [0, {table.shape[0]})", ids.shape)

    def backward(g):
        # one-hot product instead of np.add.at, which is slow for many rows
        flat = ids.reshape(-1)
        onehot = (np.arange(table.shape[0])[:, None] == flat[None, :]).astype(table.dtype)
        return (onehot @ g.reshape(-1, table.shape[1]),)

    return _node(table.data[ids], (table,), backward, "embedding")


# -- losses -----------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted token cross-entropy ``sum_i w_i * -log p_i[target_i]``.

    ``weights=None`` means a plain mean over rows.  ``logits`` is ``(N, V)``.
    """
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise ShapeError("cross_entropy", "logits", "(N, V>0)", logits.shape)
    n, v = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape != (n,):
        raise ShapeError("cross_entropy", "targets", (n,), targets.shape)
    if n and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError("cross_entropy", "targets", f"ids in [0, {v})", targets.shape)
    dt = logits.dtype
    w = np.full(n, 1.0 / max(n, 1), dtype=dt) if weights is None else np.asarray(weights, dtype=dt).reshape(-1)
    if w.shape != (n,):
        raise ShapeError("cross_entropy", "weights", (n,), w.shape)
    ordered = _ordered(dt)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = _sum_last(e, ordered)
    rows = np.arange(n)
    nll = (np.log(s) + m)[:, 0] - z[rows, targets]
    wn = w * nll
    out = _osum_last(wn.reshape(1, -1)).reshape(()) if ordered and n else np.asarray(wn.sum(), dtype=dt)

    def backward(g):
        p = e / s
        p[rows, targets] -= 1
        return (p * (w * g)[:, None],)

    return _node(np.asarray(out, dtype=dt), (logits,), backward, "cross_entropy")


def l1_distance(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of ``sum_v |p_v - q_v|``."""
    if p.shape != q.shape:
        raise ShapeError("l1_distance", "q", p.shape, q.shape)
    diff = p.data - q.data
    rows = _sum_last(np.abs(diff).reshape(-1, p.shape[-1]), _ordered(p.dtype))
    n = rows.shape[0]
    out = np.asarray(rows.sum() / n, dtype=p.dtype)

    def backward(g):
        s = np.sign(diff) * (g / n)
        return (s if p.requires_grad else None, -s if q.requires_grad else None)

    return _node(out, (p, q), backward, "l1_distance")


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mse", "b", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def backward(g):
        s = diff * (2.0 * g / n)
        return (s if a.requires_grad else None, -s if b.requires_grad else None)

    return _node(out, (a, b), backward, "mse")


# -- graph & backward -------------------------------------------------------


@dataclass
class Graph:
    """Primitive applications reachable from a root, in topological order."""

    nodes: list[Tensor]
    parameters: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
        params = [n for n in order if n._backward is None and n.requires_grad]
        return cls(order, params)


def backward(loss: Tensor, parameters: Iterable[Tensor] | None = None) -> Graph:
    """Populate ``.grad`` on every trainable leaf that ``loss`` depends on.

    Parameters listed in ``parameters`` but unreachable from ``loss`` get an
    explicit zero gradient.  Gradients must be reset (``zero_grad``) between
    calls.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", "loss", "scalar", loss.shape)
    if loss._consumed:
        raise GradientStateError("backward() already ran on this graph")
    graph = Graph.trace(loss)
    listed = list(parameters) if parameters is not None else []
    for p in graph.parameters + listed:
        if p.grad is not None:
            raise GradientStateError(f"gradient of {p.name or 'parameter'} not reset before backward()")
    loss._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for p in listed:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    return graph


def zero_grad(parameters: Iterable[Tensor]) -> None:
    for p in parameters:
        p.grad = None


def grad_check(
    loss_fn: Callable[[], Tensor],
    parameter: Tensor,
    eps: float = 1e-5,
    n_coords: int = 32,
    seed: int = 0,
    floor: float = 1e-7,
    order: int = 2,
) -> float:
    """Max relative error of the analytic gradient against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values.  At
    least ``n_coords`` random coordinates are sampled (all of them when the
    parameter is smaller).  The relative error of one coordinate is
    ``|a - f| / max(|a|, |f|, floor)``.  ``order`` picks the two-point (2) or
    four-point (4) central stencil; the latter tolerates a larger ``eps`` and so
    keeps rounding noise below tiny gradient entries of deep graphs.
    """
    return grad_check_many(loss_fn, [parameter], eps=eps, n_coords=n_coords, seed=seed, floor=floor, order=order)[0]


def grad_check_many(
    loss_fn: Callable[[], Tensor],
    parameters: Sequence[Tensor],
    eps: float = 1e-5,
    n_coords: int = 32,
    seed: int = 0,
    floor: float = 1e-7,
    order: int = 2,
) -> list[float]:
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if any(p.dtype != np.float64 for p in parameters):
        raise ValueError("grad_check needs 64-bit parameters")
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    graph = Graph.trace(loss)
    zero_grad(graph.parameters)
    zero_grad(parameters)
    backward(loss, parameters)
    analytic = [p.grad.copy() for p in parameters]
    zero_grad(graph.parameters)
    zero_grad(parameters)

    errors = []
    with no_grad():
        for p, ga in zip(parameters, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if n <= n_coords else rng.choice(n, size=n_coords, replace=False)
            worst = 0.0
            for i in coords:
                orig = flat[i]
                f = {}
                for k in ((-1, 1) if order == 2 else (-2, -1, 1, 2)):
                    flat[i] = orig + k * eps
                    f[k] = loss_fn().item()
                flat[i] = orig
                if order == 2:
                    fd = (f[1] - f[-1]) / (2 * eps)
                else:
                    fd = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * eps)
                a = float(ga.reshape(-1)[i])
                err = abs(a - fd) / max(abs(a), abs(fd), floor)
                worst = max(worst, err)
            errors.append(worst)
    return errors
