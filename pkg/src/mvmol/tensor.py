"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is intentionally small: every value is a 2-D float64 array
(scalars are (1, 1), row vectors (1, n)), operations allocate fresh outputs,
and ``backward`` walks the graph once in reverse topological order built by
an iterative depth-first post-order. There is no broadcasting beyond the few
fused ops that need row/column expansion, no views, and no higher-order
derivatives.

Graph aggregation primitives (gather/segment-sum) dispatch to
:mod:`mvmol.kernels`, which is where the compiled backend plugs in.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import kernels

_TINY = 1e-300  # guards divisions by exactly-zero norms


class ShapeMismatch(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class Tensor:
    """A node in the autodiff graph.

    ``requires_grad`` marks leaves that accumulate gradients; interior nodes
    inherit it from their parents. ``_backward`` pushes the node's output
    gradient onto its parents and is only installed when gradients are needed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D; got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, installing the backward rule only when needed."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# -- elementwise ------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / b.data)
        if b.requires_grad:
            _accumulate(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return _make(a.data * c, (a,), backward)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)

    return _make(a.data + c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) in the overflow-safe form max(x, 0) + log1p(e^{-|x|})
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        if a.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-a.data))
            _accumulate(a, g * sig)

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at the kink."""
    sign = np.sign(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * sign)

    return _make(np.abs(a.data), (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, int]) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeMismatch(f"reshape {a.shape} -> {shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape).copy(), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if axis not in (0, 1):
        raise ShapeMismatch(f"concat axis must be 0 or 1, got {axis}")
    other = 1 - axis
    sizes = [t.shape[axis] for t in tensors]
    if len({t.shape[other] for t in tensors}) != 1:
        raise ShapeMismatch("concat: mismatched cross-axis sizes")
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets, offsets[1:]):
            if t.requires_grad:
                piece = g[start:stop] if axis == 0 else g[:, start:stop]
                _accumulate(t, piece)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), backward)


def mul_scalar_tensor(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``a`` by the learnable scalar ``s`` (1, 1)."""
    if s.shape != (1, 1):
        raise ShapeMismatch(f"mul_scalar_tensor: scalar must be (1,1), got {s.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * s.data[0, 0])
        if s.requires_grad:
            _accumulate(s, np.array([[(g * a.data).sum()]]))

    return _make(a.data * s.data[0, 0], (a, s), backward)


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """Add a (1, n) row vector to every row of ``a`` (m, n)."""
    if b.shape != (1, a.shape[1]):
        raise ShapeMismatch(f"add_rowvec: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0, keepdims=True))

    return _make(a.data + b.data, (a, b), backward)


def mul_colvec(a: Tensor, v: Tensor) -> Tensor:
    """Scale each row of ``a`` (m, d) by the matching entry of ``v`` (m, 1)."""
    if v.shape != (a.shape[0], 1):
        raise ShapeMismatch(f"mul_colvec: {a.shape} vs {v.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * v.data)
        if v.requires_grad:
            _accumulate(v, (g * a.data).sum(axis=1, keepdims=True))

    return _make(a.data * v.data, (a, v), backward)


# -- reductions ---------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.full(a.shape, g[0, 0]))

    return _make(a.data.sum(), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.full(a.shape, g[0, 0] / n))

    return _make(a.data.mean(), (a,), backward)


def sum_pool(a: Tensor) -> Tensor:
    """Column-wise sum over rows: (m, n) -> (1, n)."""
    if a.shape[0] < 1:
        raise ShapeMismatch("sum_pool on empty tensor")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.repeat(g, a.shape[0], axis=0))

    return _make(a.data.sum(axis=0, keepdims=True), (a,), backward)


def sum_rows(a: Tensor) -> Tensor:
    """Row-wise sum: (m, n) -> (m, 1)."""

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.repeat(g, a.shape[1], axis=1))

    return _make(a.data.sum(axis=1, keepdims=True), (a,), backward)


def frobenius_sq(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, 2.0 * g[0, 0] * a.data)

    return _make((a.data * a.data).sum(), (a,), backward)


def l2_norm(a: Tensor) -> Tensor:
    norm = math.sqrt(float((a.data * a.data).sum()))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g[0, 0] * a.data / max(norm, _TINY))

    return _make(norm, (a,), backward)


# -- softmax ------------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stochastic softmax with max-subtraction for stability."""
    if not np.isfinite(a.data).all():
        raise NonFiniteInput("softmax_rows: non-finite input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            _accumulate(a, y * (g - dot))

    return _make(y, (a,), backward)


def softmax_cols(a: Tensor) -> Tensor:
    return transpose(softmax_rows(transpose(a)))


# -- graph aggregation --------------------------------------------------------


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeMismatch("gather_rows: index out of range")
    n_in = a.shape[0]

    def backward(g):
        if a.requires_grad:
            _accumulate(a, kernels.scatter_add_rows(g, index, n_in))

    return _make(kernels.gather_rows(a.data, index), (a,), backward)


def segment_sum(a: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given per-row ids."""
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != a.shape[0]:
        raise ShapeMismatch("segment_sum: one segment id per row required")
    if segments.size and (segments.min() < 0 or segments.max() >= n_segments):
        raise ShapeMismatch("segment_sum: segment id out of range")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, kernels.gather_rows(g, segments))

    return _make(kernels.scatter_add_rows(a.data, segments, n_segments), (a,), backward)


# -- fused similarity ops -----------------------------------------------------

_COS_EPS = 1e-12


def cosine_matrix(h: Tensor) -> Tensor:
    """Pairwise cosine similarity between rows: (n, d) -> (n, n).

    Denominators carry a 1e-12 additive guard so all-zero rows yield 0
    similarity instead of NaN.
    """
    x = h.data
    norms = np.sqrt((x * x).sum(axis=1))
    deno = norms[:, None] * norms[None, :] + _COS_EPS
    s = x @ x.T
    p = s / deno

    def backward(g):
        if h.requires_grad:
            w = g / deno
            v = g * p / deno
            safe = np.maximum(norms, _TINY)
            dh = (w + w.T) @ x
            dh -= (((v + v.T) @ norms) / safe)[:, None] * x
            _accumulate(h, dh)

    return _make(p, (h,), backward)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-by-row cosine similarity of two equal-shape matrices -> (m, 1)."""
    _check_same_shape(a, b, "cosine_rows")
    na = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=1, keepdims=True))
    deno = na * nb + _COS_EPS
    s = (a.data * b.data).sum(axis=1, keepdims=True)
    c = s / deno

    def backward(g):
        coeff = g / deno
        if a.requires_grad:
            _accumulate(a, coeff * (b.data - c * nb * a.data / np.maximum(na, _TINY)))
        if b.requires_grad:
            _accumulate(b, coeff * (a.data - c * na * b.data / np.maximum(nb, _TINY)))

    return _make(c, (a, b), backward)


# -- divergences --------------------------------------------------------------


def gaussian_kl(mu1: Tensor, logv1: Tensor, mu2: Tensor, logv2: Tensor) -> Tensor:
    """KL(N(mu1, e^logv1) || N(mu2, e^logv2)) for diagonal Gaussians, summed
    over dimensions. Built from primitives so gradients come for free."""
    for t in (logv1, mu2, logv2):
        _check_same_shape(mu1, t, "gaussian_kl")
    dmu = sub(mu2, mu1)
    ratio = exp(sub(logv1, logv2))
    maha = mul(mul(dmu, dmu), exp(scale(logv2, -1.0)))
    inner = add_scalar(add(add(ratio, maha), sub(logv2, logv1)), -1.0)
    return scale(sum_all(inner), 0.5)


# -- backward pass ------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root; visits each node exactly once."""
    if root.shape != (1, 1):
        raise ShapeMismatch(f"backward root must be scalar, got {root.shape}")
    if not root.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))

    root.grad = np.ones((1, 1))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
