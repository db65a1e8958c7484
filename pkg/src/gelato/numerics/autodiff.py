"""Reverse-mode differentiation over dense float64 arrays.

A ``Var`` is a node in an implicitly recorded computation graph: the graph
built during a forward pass is the gradient tape. Operations are pure; a
node whose inputs all have ``requires_grad=False`` collapses to a constant
(no parents, no backward closure), so inference pays almost nothing for
running through the same code path as training.

Gradients propagate *through* frozen values (their contents appear inside
the backward closures of downstream nodes) but are only ever accumulated
*for* nodes created with ``requires_grad=True``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import DegenerateInputError, DimensionError, ZeroNormError
from ..profiles import NORM_FLOOR
from . import kernels


class Var:
    """One node of the gradient tape: a value plus backward bookkeeping."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.value.shape}")
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value: np.ndarray, parents: Sequence[Var], vjp: Callable) -> Var:
    """Create a graph node; collapses to a constant if no parent needs grads."""
    if any(p.requires_grad for p in parents):
        out = Var(value, requires_grad=True)
        out._parents = tuple(parents)
        out._vjp = vjp
        return out
    return Var(value)


def backward(root: Var) -> None:
    """Accumulate gradients of the scalar ``root`` into every reachable
    node that requires them. Deterministic: traversal order is fixed by
    graph construction order."""
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.value.shape}")
    if not root.requires_grad:
        return

    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g


# --------------------------------------------------------------------------
# elementwise and shape ops
# --------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add shapes differ: {a.value.shape} vs {b.value.shape}")

    def vjp(g):
        return g, g

    return _node(a.value + b.value, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"mul shapes differ: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return (g * bv if a.requires_grad else None,
                g * av if b.requires_grad else None)

    return _node(av * bv, (a, b), vjp)


def scale(a, c: float) -> Var:
    a = as_var(a)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _node(a.value * c, (a,), vjp)


def neg(a) -> Var:
    return scale(a, -1.0)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.value.shape

    def vjp(g):
        return (g.reshape(old),)

    return _node(a.value.reshape(shape), (a,), vjp)


def swapaxes(a, ax1: int, ax2: int) -> Var:
    a = as_var(a)

    def vjp(g):
        return (np.ascontiguousarray(g.swapaxes(ax1, ax2)),)

    return _node(np.ascontiguousarray(a.value.swapaxes(ax1, ax2)), (a,), vjp)


def transpose(a) -> Var:
    return swapaxes(a, -1, -2)


def concat_rows(pieces: Sequence) -> Var:
    """Stack 2D pieces along axis 0. A piece may appear several times; its
    gradient accumulates once per occurrence."""
    pieces = [as_var(p) for p in pieces]
    if not pieces:
        raise DimensionError("concat_rows needs at least one piece")
    for p in pieces:
        if p.value.ndim != 2:
            raise DimensionError(f"concat_rows expects 2D pieces, got {p.value.shape}")
    sizes = [p.value.shape[0] for p in pieces]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[offsets[i]:offsets[i + 1]] if p.requires_grad else None
            for i, p in enumerate(pieces)
        )

    return _node(np.concatenate([p.value for p in pieces], axis=0), pieces, vjp)


def stack_rows(vectors: Sequence) -> Var:
    """Stack 1D vectors into a matrix, one per row."""
    vectors = [as_var(v) for v in vectors]
    for v in vectors:
        if v.value.ndim != 1:
            raise DimensionError(f"stack_rows expects 1D vectors, got {v.value.shape}")

    def vjp(g):
        return tuple(g[i] if v.requires_grad else None for i, v in enumerate(vectors))

    return _node(np.stack([v.value for v in vectors]), vectors, vjp)


def last_row(a) -> Var:
    a = as_var(a)
    if a.value.ndim != 2 or a.value.shape[0] < 1:
        raise DimensionError(f"last_row expects a non-empty matrix, got {a.value.shape}")
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[-1] = g
        return (out,)

    return _node(a.value[-1].copy(), (a,), vjp)


def prefix_cols(a, k: int) -> Var:
    a = as_var(a)
    d = a.value.shape[-1]
    if not 1 <= k <= d:
        raise DimensionError(f"prefix length {k} out of range for width {d}")
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[..., :k] = g
        return (out,)

    return _node(np.ascontiguousarray(a.value[..., :k]), (a,), vjp)


def diagonal(a) -> Var:
    a = as_var(a)
    n, m = a.value.shape
    if n != m:
        raise DimensionError(f"diagonal needs a square matrix, got {a.value.shape}")

    def vjp(g):
        out = np.zeros((n, n))
        np.fill_diagonal(out, g)
        return (out,)

    return _node(np.diagonal(a.value).copy(), (a,), vjp)


def vsum(a) -> Var:
    a = as_var(a)
    shape = a.value.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.value.sum()), (a,), vjp)


def sum_squares(a) -> Var:
    a = as_var(a)
    av = a.value

    def vjp(g):
        return (2.0 * g * av,)

    return _node(np.asarray((av * av).sum()), (a,), vjp)


def gather_concat_rows(a, idx: np.ndarray) -> Var:
    """Gather row groups: out[i] = concat(a[idx[i, 0]], ..., a[idx[i, m-1]]).

    idx has shape (n_out, m). Backward scatter-adds, so repeated indices
    are safe.
    """
    a = as_var(a)
    n_out, m = idx.shape
    d = a.value.shape[1]
    rows = a.value.shape[0]
    value = a.value[idx.reshape(-1)].reshape(n_out, m * d)

    def vjp(g):
        out = np.zeros((rows, d))
        np.add.at(out, idx.reshape(-1), g.reshape(n_out * m, d))
        return (out,)

    return _node(value, (a,), vjp)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2] or av.shape[:-2] != bv.shape[:-2]:
        raise DimensionError(f"matmul shapes incompatible: {av.shape} vs {bv.shape}")

    def vjp(g):
        ga = g @ bv.swapaxes(-1, -2) if a.requires_grad else None
        gb = av.swapaxes(-1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(av @ bv, (a, b), vjp)


def affine(x, w, b=None) -> Var:
    """y = W x + b applied row-wise: x may be a single vector (d_in,) or a
    matrix (rows, d_in); W has shape (d_out, d_in)."""
    x, w = as_var(x), as_var(w)
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.ndim not in (1, 2) or xv.shape[-1] != wv.shape[1]:
        raise DimensionError(f"affine shapes incompatible: x {xv.shape} vs W {wv.shape}")
    single = xv.ndim == 1
    x2 = xv[None, :] if single else xv
    y = x2 @ wv.T
    parents = [x, w]
    if b is not None:
        b = as_var(b)
        if b.value.shape != (wv.shape[0],):
            raise DimensionError(
                f"affine bias shape {b.value.shape} does not match output width {wv.shape[0]}"
            )
        y = y + b.value
        parents.append(b)

    def vjp(g):
        g2 = g[None, :] if single else g
        gx = g2 @ wv if x.requires_grad else None
        if gx is not None and single:
            gx = gx[0]
        gw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(y[0] if single else y, parents, vjp)


# --------------------------------------------------------------------------
# kernel-backed nonlinearities
# --------------------------------------------------------------------------

def gelu(x) -> Var:
    x = as_var(x)
    xv = x.value

    def vjp(g):
        return (kernels.gelu_bwd(xv, np.ascontiguousarray(g)),)

    return _node(kernels.gelu_fwd(xv), (x,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Var:
    """Row-wise zero-mean unit-variance normalization with affine gain and
    shift. Accepts (rows, d) or a single (d,) vector."""
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    xv = x.value
    single = xv.ndim == 1
    x2 = np.ascontiguousarray(xv[None, :] if single else xv)
    d = x2.shape[1]
    if d < 2:
        raise DegenerateInputError(f"layer_norm needs at least 2 features, got {d}")
    if gamma.value.shape != (d,) or beta.value.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/shift shapes {gamma.value.shape}/{beta.value.shape} "
            f"do not match width {d}"
        )
    if eps <= 0:
        raise DegenerateInputError("layer_norm eps must be positive")
    y, mean, rstd = kernels.layernorm_fwd(x2, gamma.value, beta.value, eps)

    def vjp(g):
        g2 = np.ascontiguousarray(g[None, :] if single else g)
        dx, dgamma, dbeta = kernels.layernorm_bwd(x2, mean, rstd, gamma.value, g2)
        return (
            (dx[0] if single else dx) if x.requires_grad else None,
            dgamma if gamma.requires_grad else None,
            dbeta if beta.requires_grad else None,
        )

    return _node(y[0] if single else y, (x, gamma, beta), vjp)


def softmax_rows(x) -> Var:
    """Softmax over the last axis of a 2D or 3D array."""
    x = as_var(x)
    xv = x.value
    flat = np.ascontiguousarray(xv.reshape(-1, xv.shape[-1]))
    p = kernels.softmax_fwd(flat)

    def vjp(g):
        gf = np.ascontiguousarray(g.reshape(flat.shape))
        return (kernels.softmax_bwd(p, gf).reshape(xv.shape),)

    return _node(p.reshape(xv.shape), (x,), vjp)


def causal_softmax(scores) -> Var:
    """Softmax over the last axis where position t attends to columns
    [0, t]. Input shape (..., T, T)."""
    scores = as_var(scores)
    sv = scores.value
    t = sv.shape[-1]
    if sv.shape[-2] != t:
        raise DimensionError(f"causal_softmax needs (..., T, T), got {sv.shape}")
    flat = np.ascontiguousarray(sv.reshape(-1, t))
    reps = flat.shape[0] // t
    limits = np.tile(np.arange(1, t + 1, dtype=np.int64), reps)
    p = kernels.masked_softmax_fwd(flat, limits)

    def vjp(g):
        gf = np.ascontiguousarray(g.reshape(flat.shape))
        return (kernels.masked_softmax_bwd(p, limits, gf).reshape(sv.shape),)

    return _node(p.reshape(sv.shape), (scores,), vjp)


def log_softmax_rows(x) -> Var:
    x = as_var(x)
    xv = x.value
    m = xv.max(axis=-1, keepdims=True)
    z = xv - m
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(y, (x,), vjp)


def rotary(x, cos: np.ndarray, sin: np.ndarray) -> Var:
    """Rotate even/odd feature pairs by position-dependent angles.
    x: (heads, T, head_dim); cos/sin: (T, head_dim//2) constants."""
    x = as_var(x)
    h, t, hd = x.value.shape
    flat = np.ascontiguousarray(x.value.reshape(h * t, hd))
    cos_t = np.ascontiguousarray(np.tile(cos, (h, 1)))
    sin_t = np.ascontiguousarray(np.tile(sin, (h, 1)))
    y = kernels.rotary(flat, cos_t, sin_t, 1.0)

    def vjp(g):
        gf = np.ascontiguousarray(g.reshape(h * t, hd))
        return (kernels.rotary(gf, cos_t, sin_t, -1.0).reshape(h, t, hd),)

    return _node(y.reshape(h, t, hd), (x,), vjp)


# --------------------------------------------------------------------------
# normalization and similarity
# --------------------------------------------------------------------------

def l2_normalize(v) -> Var:
    """v / ||v|| for a single vector; errors when the norm is at or below
    the norm floor (degenerate input, not a value to smooth over)."""
    v = as_var(v)
    if v.value.ndim != 1:
        raise DimensionError(f"l2_normalize expects a vector, got {v.value.shape}")
    n = float(np.linalg.norm(v.value))
    if n <= NORM_FLOOR:
        raise ZeroNormError(f"cannot normalize vector with norm {n:.3e}")
    y = v.value / n

    def vjp(g):
        return ((g - y * float(y @ g)) / n,)

    return _node(y, (v,), vjp)


def normalize_rows(m) -> Var:
    """Row-wise L2 normalization of a matrix."""
    m = as_var(m)
    if m.value.ndim != 2:
        raise DimensionError(f"normalize_rows expects a matrix, got {m.value.shape}")
    norms = np.linalg.norm(m.value, axis=1)
    bad = np.nonzero(norms <= NORM_FLOOR)[0]
    if bad.size:
        raise ZeroNormError(f"row {bad[0]} has norm {norms[bad[0]]:.3e}")
    y = m.value / norms[:, None]

    def vjp(g):
        dots = (y * g).sum(axis=1, keepdims=True)
        return ((g - y * dots) / norms[:, None],)

    return _node(y, (m,), vjp)


def cosine(u, v) -> Var:
    """Cosine similarity of two vectors, as a scalar node."""
    u, v = as_var(u), as_var(v)
    if u.value.shape != v.value.shape or u.value.ndim != 1:
        raise DimensionError(f"cosine needs equal-length vectors, got {u.value.shape} vs {v.value.shape}")
    nu = float(np.linalg.norm(u.value))
    nv = float(np.linalg.norm(v.value))
    if nu <= NORM_FLOOR or nv <= NORM_FLOOR:
        raise ZeroNormError(f"cosine on degenerate input (norms {nu:.3e}, {nv:.3e})")
    uh, vh = u.value / nu, v.value / nv
    c = float(uh @ vh)

    def vjp(g):
        gs = float(g)
        gu = gs * (vh - c * uh) / nu if u.requires_grad else None
        gv = gs * (uh - c * vh) / nv if v.requires_grad else None
        return gu, gv

    return _node(np.asarray(c), (u, v), vjp)
