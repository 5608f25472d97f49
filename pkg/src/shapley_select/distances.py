"""Chunked pairwise-distance kernels with deterministic tie handling.

Everything here ranks or selects neighbors within a row, so kernels may
return *rank-equivalent* scores (squared euclidean minus the per-row norm,
or negated cosine similarity) instead of true distances: adding a per-row
constant never changes within-row comparisons. Ties between equal scores
are always resolved toward the smaller column index, which equals the
smaller point id as long as reference rows are stored in ascending-id
order (the package-wide convention).
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

EUCLIDEAN = "euclidean"
COSINE = "cosine"
METRICS = (EUCLIDEAN, COSINE)

# Rows per block in chunked kernels. Fixed so that results never depend on
# the thread count or pool size.
CHUNK_ROWS = 8192


def check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}, expected one of {METRICS}")
    return metric


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    norms[norms == 0.0] = 1.0  # zero vectors keep direction 0, distance 1 to everything
    return x / norms[:, None]


def ranking_scores(queries: np.ndarray, refs: np.ndarray, metric: str = EUCLIDEAN) -> np.ndarray:
    """(n_queries, n_refs) score matrix whose row-wise order matches the metric.

    euclidean: ||q-r||^2 - ||q||^2 (true squared distance minus a per-row
    constant); cosine: -cos(q, r). Use `true_sq_dists` when actual distance
    values are needed.
    """
    check_metric(metric)
    if metric == COSINE:
        return -(_unit_rows(queries) @ _unit_rows(refs).T)
    refs_sq = np.einsum("ij,ij->i", refs, refs)
    scores = queries @ refs.T
    scores *= -2.0
    scores += refs_sq[None, :]
    return scores


def true_sq_dists(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """True squared euclidean distances, clipped to be non-negative."""
    scores = ranking_scores(queries, refs, EUCLIDEAN)
    scores += np.einsum("ij,ij->i", queries, queries)[:, None]
    np.maximum(scores, 0.0, out=scores)
    return scores


def rank_columns(scores: np.ndarray) -> np.ndarray:
    """Row-wise ascending ranking of a score matrix, ties by column index.

    Stable sort keeps equal scores in original column order, which is
    ascending-id order by convention.
    """
    return np.argsort(scores, axis=1, kind="stable")


def k_smallest_columns(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row, ties by ascending column.

    Returns shape (n_rows, k); the columns of a row form the correct set
    but are not internally ordered. Uses argpartition with an exact fix-up
    pass on the (rare) rows where ties straddle the k-th position.
    """
    n_rows, n_cols = scores.shape
    if k <= 0:
        raise ValidationError(f"k must be positive, got {k}")
    if k >= n_cols:
        return np.broadcast_to(np.arange(n_cols), (n_rows, n_cols)).copy()

    part = np.argpartition(scores, k - 1, axis=1)[:, :k]
    part_scores = np.take_along_axis(scores, part, axis=1)
    tau = part_scores.max(axis=1)
    n_less = (scores < tau[:, None]).sum(axis=1)
    n_tied = (scores == tau[:, None]).sum(axis=1)
    ambiguous = np.flatnonzero(n_tied > k - n_less)
    for r in ambiguous:
        row = scores[r]
        tied = np.flatnonzero(row == tau[r])[: k - n_less[r]]
        part[r, : n_less[r]] = part[r][part_scores[r] < tau[r]]
        part[r, n_less[r] :] = tied
    return part
