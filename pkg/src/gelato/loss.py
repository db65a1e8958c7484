"""Bidirectional in-batch InfoNCE over prefix cosines, summed across the
nested truncation dimensions.

Given left/right pooled states U, V of a batch of B pairs and a prefix
length k, the similarity matrix holds cosine(U[i, :k], V[j, :k]) / tau. The
loss averages the negated log-probability of each matched pair under a
row softmax (left to right) and a column softmax (right to left). Softmax
normalization subtracts the row max: at tau = 0.02 raw logits reach +-50
and would overflow single precision if exponentiated naively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, ZeroNormError
from .numerics import (
    Var,
    add,
    as_var,
    diagonal,
    log_softmax_rows,
    matmul,
    normalize_rows,
    prefix_cols,
    scale,
    transpose,
    vsum,
)
from .profiles import NORM_FLOOR


@dataclass
class ContrastiveBatch:
    """B left/right pooled states plus the temperature and prefix set."""

    U: object
    V: object
    tau: float = 0.02
    k_set: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.U = as_var(self.U)
        self.V = as_var(self.V)
        u, v = self.U.value, self.V.value
        if u.ndim != 2 or u.shape != v.shape:
            raise DimensionError(f"U and V must be equal (B, d) matrices, got {u.shape} vs {v.shape}")
        if u.shape[0] < 1:
            raise DimensionError("batch must hold at least one pair")
        if self.tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.tau}")
        ks = tuple(int(k) for k in self.k_set)
        if not ks or list(ks) != sorted(set(ks)):
            raise ConfigurationError(f"k_set must be non-empty strictly ascending, got {self.k_set}")
        if ks[-1] > u.shape[1]:
            raise ConfigurationError(f"largest prefix {ks[-1]} exceeds width {u.shape[1]}")
        self.k_set = ks


def _check_prefix_norms(m: np.ndarray, k: int, side: str) -> None:
    norms = np.linalg.norm(m[:, :k], axis=1)
    bad = np.nonzero(norms <= NORM_FLOOR)[0]
    if bad.size:
        raise ZeroNormError(
            f"{side} row {bad[0]} has a zero-norm {k}-prefix (norm {norms[bad[0]]:.3e})"
        )


def similarity_matrix(U, V, k: int, tau: float) -> Var:
    """(B, B) matrix of prefix cosines over the temperature."""
    U, V = as_var(U), as_var(V)
    if U.value.shape != V.value.shape or U.value.ndim != 2:
        raise DimensionError(
            f"similarity needs matching (B, d) matrices, got {U.value.shape} vs {V.value.shape}"
        )
    if not 1 <= k <= U.value.shape[1]:
        raise DimensionError(f"prefix {k} out of range for width {U.value.shape[1]}")
    _check_prefix_norms(U.value, k, "left")
    _check_prefix_norms(V.value, k, "right")
    u = normalize_rows(prefix_cols(U, k))
    v = normalize_rows(prefix_cols(V, k))
    return scale(matmul(u, transpose(v)), 1.0 / tau)


def infonce(U, V, k: int, tau: float) -> Var:
    """Matched-pair negative log-likelihood, averaged over both softmax
    directions; exactly zero for a single-pair batch."""
    s = similarity_matrix(U, V, k, tau)
    b = s.value.shape[0]
    left_to_right = diagonal(log_softmax_rows(s))
    right_to_left = diagonal(log_softmax_rows(transpose(s)))
    total = add(vsum(left_to_right), vsum(right_to_left))
    return scale(total, -1.0 / (2.0 * b))


def matryoshka_loss(batch: ContrastiveBatch) -> Var:
    """Sum of the contrastive term over every prefix dimension, in
    ascending order."""
    loss = None
    for k in batch.k_set:
        term = infonce(batch.U, batch.V, k, batch.tau)
        loss = term if loss is None else add(loss, term)
    return loss
