"""Extrapolating Shapley values from labeled points to the unlabeled pool.

Per class, a nearest-neighbor regressor predicts a query's value as the
mean value of the k nearest labeled points of that class. Each pool point
is evaluated only for its candidate classes (the classes a KNN vote
considers plausible, all classes when there are no more than
candidate_limit of them) and the class-conditional predictions are then
aggregated, by default optimistically with max.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import parallel
from .distances import CHUNK_ROWS, check_metric, k_smallest_columns, ranking_scores
from .errors import ValidationError
from .valuation import METHOD_REGRESSED, ValuationResult

AGG_MAX = "max"
AGG_MEAN = "mean"
AGG_CONFIDENCE = "confidence-weighted"
AGGREGATIONS = (AGG_MAX, AGG_MEAN, AGG_CONFIDENCE)

DEFAULT_CANDIDATE_LIMIT = 10


@dataclass
class RegressionSpec:
    k_neighbors: int = 10
    metric: str = "euclidean"

    def __post_init__(self) -> None:
        if self.k_neighbors < 1:
            raise ValidationError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        check_metric(self.metric)


@dataclass
class _KnnRegressor:
    """Mean of the k nearest stored values; k truncated to the store size."""

    features: np.ndarray
    values: np.ndarray
    k: int
    metric: str

    def predict(self, queries: np.ndarray) -> np.ndarray:
        k_eff = min(self.k, self.values.size)
        if k_eff == self.values.size:
            return np.full(queries.shape[0], self.values.mean())
        out = np.empty(queries.shape[0])

        def run(start: int, stop: int) -> None:
            scores = ranking_scores(queries[start:stop], self.features, self.metric)
            if k_eff == 1:
                out[start:stop] = self.values[np.argmin(scores, axis=1)]
            else:
                idx = k_smallest_columns(scores, k_eff)
                out[start:stop] = self.values[idx].mean(axis=1)

        parallel.map_chunks(run, queries.shape[0], CHUNK_ROWS)
        return out


@dataclass
class ValueRegressors:
    """Per-class regressor bundle plus the pooled global fallback."""

    per_class: dict[int, _KnnRegressor]
    pooled: _KnnRegressor
    num_classes: int
    spec: RegressionSpec

    def has_class(self, c: int) -> bool:
        return c in self.per_class

    def predict_class(self, c: int, queries: np.ndarray) -> np.ndarray:
        return self.per_class[c].predict(queries)

    def predict_global(self, queries: np.ndarray) -> np.ndarray:
        return self.pooled.predict(queries)


def fit_value_regressors(
    lab_X: np.ndarray,
    lab_y: np.ndarray,
    lab_ids: np.ndarray,
    values: ValuationResult,
    num_classes: int,
    reg: RegressionSpec,
) -> ValueRegressors:
    """Fit one KNN value regressor per class with at least one labeled point.

    `values` must cover every labeled id; rows must be in ascending-id
    order so nearest-neighbor ties resolve toward smaller ids.
    """
    order = np.searchsorted(values.point_ids, lab_ids)
    if (
        values.point_ids.size < lab_ids.size
        or np.any(order >= values.point_ids.size)
        or np.any(values.point_ids[order] != lab_ids)
    ):
        raise ValidationError("valuation does not cover every labeled point")
    lab_values = values.values[order]

    per_class = {}
    for c in range(num_classes):
        rows = np.flatnonzero(lab_y == c)
        if rows.size == 0:
            continue  # absent regressor; predict_values skips this class
        per_class[c] = _KnnRegressor(
            features=np.ascontiguousarray(lab_X[rows]),
            values=lab_values[rows],
            k=reg.k_neighbors,
            metric=reg.metric,
        )
    pooled = _KnnRegressor(features=lab_X, values=lab_values, k=reg.k_neighbors, metric=reg.metric)
    return ValueRegressors(per_class=per_class, pooled=pooled, num_classes=num_classes, spec=reg)


@dataclass
class Candidates:
    """Per-point candidate class lists, padded with -1 to a common width."""

    classes: np.ndarray          # (n, width) int64, -1 past counts[i]
    counts: np.ndarray           # (n,)
    vote_fractions: np.ndarray | None = None  # aligned with classes where computed

    def __post_init__(self) -> None:
        if np.any(self.counts < 1):
            raise ValidationError("every point needs at least one candidate class")

    def as_list(self, i: int) -> list[int]:
        return [int(c) for c in self.classes[i, : self.counts[i]]]


def candidate_classes(
    query_X: np.ndarray,
    lab_X: np.ndarray,
    lab_y: np.ndarray,
    num_classes: int,
    K: int,
    limit: int,
    metric: str = "euclidean",
) -> Candidates:
    """Rank classes per query by the vote fraction among its K nearest
    labeled points, ties by ascending class id, truncated to `limit` and to
    the classes that received any vote."""
    if limit < 1:
        raise ValidationError(f"candidate limit must be >= 1, got {limit}")
    if lab_y.size == 0:
        raise ValidationError("labeled set must be nonempty")
    k_eff = min(K, lab_y.size)
    n = query_X.shape[0]
    width = min(limit, num_classes)
    classes = np.full((n, width), -1, dtype=np.int64)
    counts = np.empty(n, dtype=np.int64)
    fractions = np.zeros((n, width))

    def run(start: int, stop: int) -> None:
        scores = ranking_scores(query_X[start:stop], lab_X, metric)
        nearest = k_smallest_columns(scores, k_eff)
        votes = np.zeros((stop - start, num_classes), dtype=np.int64)
        rows = np.repeat(np.arange(stop - start), k_eff)
        np.add.at(votes, (rows, lab_y[nearest].ravel()), 1)
        # stable sort on -votes keeps ascending class id among ties
        ranked = np.argsort(-votes, axis=1, kind="stable")
        nonzero = (votes > 0).sum(axis=1)
        take = np.minimum(nonzero, width)
        ranked = ranked[:, :width]
        keep = np.arange(width)[None, :] < take[:, None]
        block = np.where(keep, ranked, -1)
        classes[start:stop] = block
        counts[start:stop] = take
        frac = np.take_along_axis(votes, ranked, axis=1) / k_eff
        fractions[start:stop] = np.where(keep, frac, 0.0)

    parallel.map_chunks(run, n, CHUNK_ROWS)
    return Candidates(classes=classes, counts=counts, vote_fractions=fractions)


def all_classes_candidates(n_points: int, num_classes: int, limit: int) -> Candidates:
    """Candidate lists when every class is a candidate (C <= limit).

    Vote fractions are not computed; only valid for aggregation modes that
    ignore them.
    """
    if num_classes > limit:
        raise ValidationError("all-classes shortcut requires num_classes <= limit")
    classes = np.broadcast_to(np.arange(num_classes, dtype=np.int64), (n_points, num_classes)).copy()
    counts = np.full(n_points, num_classes, dtype=np.int64)
    return Candidates(classes=classes, counts=counts, vote_fractions=None)


@dataclass
class ClassConditionalValues:
    """Sparse per-point map class id -> predicted value, stored dense with a mask."""

    point_ids: np.ndarray
    values: np.ndarray       # (n, C)
    mask: np.ndarray         # (n, C) bool, True where a prediction is stored
    candidate_limit: int
    confidences: np.ndarray | None = None  # (n, C) vote fractions where known
    fallback_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self) -> None:
        stored = self.mask.sum(axis=1)
        if np.any(stored == 0):
            raise ValidationError("every point needs at least one class-conditional value")
        if np.any(stored > self.candidate_limit):
            raise ValidationError("more stored classes than candidate_limit allows")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValidationError("non-finite predicted values")

    def as_map(self, i: int) -> dict[int, float]:
        cols = np.flatnonzero(self.mask[i])
        return {int(c): float(self.values[i, c]) for c in cols}


def predict_values(
    pool_X: np.ndarray,
    pool_ids: np.ndarray,
    regressors: ValueRegressors,
    candidates: Candidates,
) -> ClassConditionalValues:
    """Class-conditional value predictions for every pool point.

    Candidate classes without a regressor are skipped; if a point loses all
    its candidates this way it falls back to the pooled global regressor
    (stored under its first candidate class).
    """
    n = pool_X.shape[0]
    if candidates.classes.shape[0] != n:
        raise ValidationError("candidates do not cover the pool")
    C = regressors.num_classes
    values = np.zeros((n, C))
    mask = np.zeros((n, C), dtype=bool)

    for c in range(C):
        if not regressors.has_class(c):
            continue
        rows = np.flatnonzero((candidates.classes == c).any(axis=1))
        if rows.size == 0:
            continue
        values[rows, c] = regressors.predict_class(c, pool_X[rows])
        mask[rows, c] = True

    fallback_rows = np.flatnonzero(~mask.any(axis=1))
    if fallback_rows.size:
        preds = regressors.predict_global(pool_X[fallback_rows])
        first = candidates.classes[fallback_rows, 0]
        values[fallback_rows, first] = preds
        mask[fallback_rows, first] = True

    confidences = None
    if candidates.vote_fractions is not None:
        confidences = np.zeros((n, C))
        width = candidates.classes.shape[1]
        for j in range(width):
            cols = candidates.classes[:, j]
            valid = cols >= 0
            confidences[np.flatnonzero(valid), cols[valid]] = candidates.vote_fractions[valid, j]

    return ClassConditionalValues(
        point_ids=np.asarray(pool_ids, dtype=np.int64),
        values=values,
        mask=mask,
        candidate_limit=max(candidates.classes.shape[1], 1),
        confidences=confidences,
        fallback_rows=fallback_rows,
    )


@dataclass
class AggregatedValues:
    """One value per pool point after aggregating over candidate classes."""

    point_ids: np.ndarray
    values: np.ndarray
    aggregation: str

    def to_valuation_result(self) -> ValuationResult:
        return ValuationResult(
            point_ids=self.point_ids,
            values=self.values,
            method=METHOD_REGRESSED,
            utility_total=float(self.values.sum()),
            metadata={"aggregation": self.aggregation},
        )

    def value_map(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.point_ids, self.values)}


def aggregate(ccv: ClassConditionalValues, mode: str = AGG_MAX) -> AggregatedValues:
    """Collapse class-conditional predictions to one value per point."""
    if mode not in AGGREGATIONS:
        raise ValidationError(f"unknown aggregation {mode!r}, expected one of {AGGREGATIONS}")
    masked = np.where(ccv.mask, ccv.values, np.nan)
    if mode == AGG_MAX:
        out = np.nanmax(masked, axis=1)
    elif mode == AGG_MEAN:
        out = np.nanmean(masked, axis=1)
    else:
        if ccv.confidences is None:
            raise ValidationError("confidence-weighted aggregation needs vote fractions")
        weights = np.where(ccv.mask, ccv.confidences, 0.0)
        norm = weights.sum(axis=1)
        counts = ccv.mask.sum(axis=1)
        # zero-vote degenerate rows fall back to uniform weights
        weights = np.where(
            (norm == 0.0)[:, None], ccv.mask / counts[:, None], weights / np.where(norm == 0.0, 1.0, norm)[:, None]
        )
        out = np.nansum(np.where(ccv.mask, ccv.values, 0.0) * weights, axis=1)
    return AggregatedValues(point_ids=ccv.point_ids, values=out, aggregation=mode)
