"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: a handful of primitives (matmul,
elementwise add/multiply, concatenation, LeakyReLU/ReLU, segment softmax
and segment sum for per-neighborhood attention, axis-0 mean, dropout mask
application, squared-error reduction, row gather/stack) -- exactly the
closure needed to express a multi-head graph-attention forward pass and
obtain exact gradients.

Values are stored as float64 numpy arrays. Every completed operation
checks its result for NaN/Inf and raises ``AutodiffError`` instead of
propagating silently. A fresh graph is built per forward pass; node
values are never mutated in place once they have consumers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_LEAKY_SLOPE = 0.2


class AutodiffError(ValueError):
    """Shape mismatch, non-finite value, or misuse of the tape."""


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _check_finite(op: str, value: np.ndarray) -> None:
    # cheap screen: a finite sum implies no NaN/Inf entries; only a
    # non-finite sum (possibly mere overflow of finite values) pays for
    # the exact per-element check
    if math.isfinite(float(value.sum())):
        return
    if not np.all(np.isfinite(value)):
        raise AutodiffError(f"{op}: produced non-finite values (shape {value.shape})")


class Node:
    """One entry of the computation tape.

    Holds the cached forward value, the parent nodes, and one
    vector-Jacobian-product callback per parent. ``adjoint`` is populated
    by :func:`backward`.
    """

    __slots__ = ("value", "op", "parents", "vjps", "requires_grad", "adjoint")

    def __init__(
        self,
        value: np.ndarray,
        op: str = "leaf",
        parents: tuple["Node", ...] = (),
        vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = (),
        requires_grad: bool = False,
    ):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad
        self.adjoint: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(op={self.op!r}, shape={self.shape})"


def leaf(value, name: str = "leaf") -> Node:
    """Trainable leaf; gradients are reported for it by backward()."""
    arr = _as_array(value)
    _check_finite(name, arr)
    return Node(arr, op=name, requires_grad=True)


def constant(value, name: str = "const") -> Node:
    """Non-trainable input (features, labels, masks)."""
    arr = _as_array(value)
    _check_finite(name, arr)
    return Node(arr, op=name)


def _node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    """Matrix product a @ b (2-D by 2-D or 2-D by 1-D)."""
    a, b = _node(a), _node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    out = av @ bv
    _check_finite("matmul", out)

    def vjp_a(g):
        return g @ bv.T if bv.ndim == 2 else np.outer(g, bv)

    def vjp_b(g):
        return av.T @ g

    return Node(out, "matmul", (a, b), (vjp_a, vjp_b))


def add(a, b) -> Node:
    """Elementwise sum with numpy broadcasting."""
    a, b = _node(a), _node(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise AutodiffError(f"add: incompatible shapes {a.shape} + {b.shape}") from None
    _check_finite("add", out)
    return Node(
        out, "add", (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Node:
    """Elementwise product with numpy broadcasting."""
    a, b = _node(a), _node(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise AutodiffError(f"mul: incompatible shapes {a.shape} * {b.shape}") from None
    _check_finite("mul", out)
    av, bv = a.value, b.value
    return Node(
        out, "mul", (a, b),
        (lambda g: _unbroadcast(g * bv, a.shape), lambda g: _unbroadcast(g * av, b.shape)),
    )


def concat_last(parts: Sequence) -> Node:
    """Concatenate along the last axis."""
    nodes = [_node(p) for p in parts]
    if not nodes:
        raise AutodiffError("concat_last: empty input list")
    lead = [n.shape[:-1] for n in nodes]
    if any(s != lead[0] for s in lead):
        raise AutodiffError(f"concat_last: leading dims differ: {[n.shape for n in nodes]}")
    out = np.concatenate([n.value for n in nodes], axis=-1)
    # pure data movement: finiteness carries over from the checked inputs
    widths = [n.shape[-1] for n in nodes]
    offsets = np.cumsum([0] + widths)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[..., lo:hi]

    return Node(out, "concat_last", tuple(nodes), tuple(make_vjp(i) for i in range(len(nodes))))


def gather_rows(x, index) -> Node:
    """Select rows of a matrix (or entries of a vector) by integer index."""
    x = _node(x)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise AutodiffError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if x.value.ndim == 0:
        raise AutodiffError("gather_rows: cannot gather from a scalar")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise AutodiffError(f"gather_rows: index out of range for first dim {x.shape[0]}")
    out = x.value[idx]  # pure data movement, inputs already checked

    def vjp(g):
        return _scatter_add(x.value.shape, idx, g)

    return Node(out, "gather_rows", (x,), (vjp,))


def leaky_relu(x, slope: float = DEFAULT_LEAKY_SLOPE) -> Node:
    """LeakyReLU with configurable negative slope."""
    x = _node(x)
    # branch-free form: one local-slope array serves forward and backward
    scale = slope + (1.0 - slope) * (x.value > 0)
    out = x.value * scale
    _check_finite("leaky_relu", out)
    return Node(out, "leaky_relu", (x,), (lambda g: g * scale,))


def relu(x) -> Node:
    """Rectified linear unit."""
    x = _node(x)
    positive = x.value > 0
    out = x.value * positive
    _check_finite("relu", out)
    return Node(out, "relu", (x,), (lambda g: g * positive,))


def _segment_check(op: str, x: Node, segment_ids: np.ndarray, num_segments: int) -> np.ndarray:
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.ndim != 1 or seg.shape[0] != x.shape[0]:
        raise AutodiffError(
            f"{op}: segment ids shape {seg.shape} does not match first dim of {x.shape}"
        )
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise AutodiffError(f"{op}: segment id out of range [0, {num_segments})")
    return seg


def _segment_starts(seg: np.ndarray) -> np.ndarray | None:
    """Start offsets of each run if ``seg`` is nondecreasing, else None."""
    if seg.size == 0 or np.any(seg[1:] < seg[:-1]):
        return None
    return np.flatnonzero(np.concatenate(([True], seg[1:] != seg[:-1])))


def _segment_reduce(values: np.ndarray, seg: np.ndarray, num_segments: int) -> np.ndarray:
    out = np.zeros((num_segments,) + values.shape[1:], dtype=np.float64)
    starts = _segment_starts(seg)
    if starts is None:
        np.add.at(out, seg, values)  # slow general path
    else:
        out[seg[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def _segment_max(values: np.ndarray, seg: np.ndarray, num_segments: int) -> np.ndarray:
    out = np.full((num_segments,) + values.shape[1:], -np.inf)
    starts = _segment_starts(seg)
    if starts is None:
        np.maximum.at(out, seg, values)
    else:
        out[seg[starts]] = np.maximum.reduceat(values, starts, axis=0)
    return out


def _scatter_add(shape: tuple[int, ...], idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Rows of ``g`` summed into a zero array of ``shape`` at positions ``idx``."""
    acc = np.zeros(shape, dtype=np.float64)
    starts = _segment_starts(idx)
    if starts is not None:
        acc[idx[starts]] = np.add.reduceat(g, starts, axis=0)
        return acc
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.concatenate(([True], sorted_idx[1:] != sorted_idx[:-1])))
    acc[sorted_idx[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return acc


def segment_sum(x, segment_ids, num_segments: int) -> Node:
    """Sum rows (or entries) of ``x`` grouped by segment id."""
    x = _node(x)
    seg = _segment_check("segment_sum", x, segment_ids, num_segments)
    out = _segment_reduce(x.value, seg, num_segments)
    _check_finite("segment_sum", out)
    return Node(out, "segment_sum", (x,), (lambda g: g[seg],))


def segment_softmax(x, segment_ids, num_segments: int) -> Node:
    """Softmax of ``x`` taken independently within each segment.

    Used to normalize attention scores over each receiving node's
    in-neighborhood: entries sharing a segment id compete in one softmax.
    Supports 1-D scores or 2-D (entries x channels) with per-channel
    normalization. Each occupied segment's outputs are nonnegative and
    sum to one.
    """
    x = _node(x)
    seg = _segment_check("segment_softmax", x, segment_ids, num_segments)
    if x.value.shape[0] == 0:
        raise AutodiffError("segment_softmax: empty input")
    # max-shift per segment for numerical stability
    seg_max = _segment_max(x.value, seg, num_segments)
    shifted = x.value - seg_max[seg]
    ex = np.exp(shifted)
    denom = _segment_reduce(ex, seg, num_segments)
    out = ex / denom[seg]
    _check_finite("segment_softmax", out)

    def vjp(g):
        weighted = _segment_reduce(out * g, seg, num_segments)
        return out * (g - weighted[seg])

    return Node(out, "segment_softmax", (x,), (vjp,))


def sum_axis(x, axis: int) -> Node:
    """Sum over one axis (keeps the remaining axes)."""
    x = _node(x)
    if x.value.ndim == 0 or not -x.value.ndim <= axis < x.value.ndim:
        raise AutodiffError(f"sum_axis: axis {axis} invalid for shape {x.shape}")
    out = x.value.sum(axis=axis)
    _check_finite("sum_axis", out)

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()

    return Node(out, "sum_axis", (x,), (vjp,))


def mean_axis0(x) -> Node:
    """Mean over the first axis ((N, ...) -> (...), (N,) -> scalar)."""
    x = _node(x)
    if x.value.ndim == 0 or x.shape[0] == 0:
        raise AutodiffError(f"mean_axis0: needs a non-empty first axis, got shape {x.shape}")
    n = x.shape[0]
    out = x.value.mean(axis=0)
    _check_finite("mean_axis0", out)
    return Node(out, "mean_axis0", (x,), (lambda g: np.broadcast_to(g / n, x.shape).copy(),))


def stack_scalars(parts: Sequence) -> Node:
    """Stack scalar nodes into a 1-D vector."""
    nodes = [_node(p) for p in parts]
    if not nodes or any(n.value.size != 1 for n in nodes):
        raise AutodiffError("stack_scalars: expects a non-empty list of scalars")
    out = np.array([float(n.value) for n in nodes])

    def make_vjp(i):
        return lambda g: np.asarray(g[i]).reshape(nodes[i].shape)

    return Node(out, "stack_scalars", tuple(nodes), tuple(make_vjp(i) for i in range(len(nodes))))


def reshape(x, shape: tuple[int, ...]) -> Node:
    """Reshape without copying semantics (gradient reshapes back)."""
    x = _node(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise AutodiffError(f"reshape: cannot view {x.shape} as {shape}") from None
    return Node(out, "reshape", (x,), (lambda g: g.reshape(x.shape),))


def dot(a, b) -> Node:
    """Inner product of two 1-D vectors."""
    a, b = _node(a), _node(b)
    if a.value.ndim != 1 or b.value.ndim != 1 or a.shape != b.shape:
        raise AutodiffError(f"dot: expects equal-length vectors, got {a.shape} and {b.shape}")
    out = np.asarray(a.value @ b.value)
    _check_finite("dot", out)
    av, bv = a.value, b.value
    return Node(out, "dot", (a, b), (lambda g: g * bv, lambda g: g * av))


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Node:
    """Inverted dropout: mask and rescale by 1/(1-p) at train time.

    Evaluation mode is the identity map, so no rescaling is ever needed
    at inference time.
    """
    x = _node(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise AutodiffError(f"dropout: probability {p} outside [0, 1)")
    if rng is None:
        raise AutodiffError("dropout: training mode requires an RNG")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    out = Node(x.value * mask, "dropout", (x,), (lambda g: g * mask,))
    _check_finite("dropout", out.value)
    return out


def sq_error(pred, target) -> Node:
    """Mean squared error between ``pred`` and a constant target."""
    pred = _node(pred)
    tgt = _as_array(target)
    if pred.shape != tgt.shape:
        raise AutodiffError(f"sq_error: shape mismatch {pred.shape} vs {tgt.shape}")
    diff = pred.value - tgt
    n = max(diff.size, 1)
    out = np.asarray((diff * diff).sum() / n)
    _check_finite("sq_error", out)
    return Node(out, "sq_error", (pred,), (lambda g: (2.0 / n) * diff * g,))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents before children


def backward(loss: Node, wrt: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
    """Accumulate adjoints from a scalar loss; return gradients per leaf.

    Adjoints are recomputed from scratch on every call (previous values
    are discarded), so repeated backward passes over one graph are
    bitwise identical.
    """
    if loss.value.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None:
            continue
        node.adjoint = g
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            prev = adjoint.get(id(parent))
            adjoint[id(parent)] = contrib if prev is None else prev + contrib
    targets = list(wrt) if wrt is not None else [n for n in order if n.requires_grad]
    grads: dict[Node, np.ndarray] = {}
    for t in targets:
        g = adjoint.get(id(t))
        grads[t] = np.zeros_like(t.value) if g is None else g
        t.adjoint = grads[t]
    return grads


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic vs central-difference gradients."""

    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    passed: bool
    failing: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0


def grad_check(
    f: Callable[[Node], Node],
    point,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must map a leaf node to a scalar node. The relative error per
    coordinate is |a - n| / max(|a| + |n|, 1e-6); the absolute floor keeps
    coordinates whose true gradient is zero from amplifying roundoff noise.
    """
    x0 = _as_array(point)
    p = leaf(x0.copy(), "grad_check_point")
    out = f(p)
    if out.value.size != 1:
        raise AutodiffError(f"grad_check: f must return a scalar, got shape {out.shape}")
    analytic = backward(out, wrt=[p])[p]

    numeric = np.zeros_like(x0)
    flat = x0.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(f(constant(x0.copy())).value)
        flat[i] = orig - step
        f_minus = float(f(constant(x0.copy())).value)
        flat[i] = orig
        numeric.ravel()[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    failing = [tuple(ix) for ix in np.argwhere(rel >= tol)]
    return GradCheckReport(
        analytic=analytic,
        numeric=numeric,
        rel_error=rel,
        tol=tol,
        passed=not failing,
        failing=failing,
    )
