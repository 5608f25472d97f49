"""Batch selectors: diversity algorithms plus the value-filtered wrapper.

All selectors are pure given (inputs, seed), return exactly
min(B, eligible pool) unique ids, and break every tie toward the smaller
point id (pool rows are conventionally in ascending-id order, so
first-occurrence numpy semantics implement that rule).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import parallel
from .distances import CHUNK_ROWS, k_smallest_columns, ranking_scores
from .errors import NumericError, ValidationError
from .extrapolation import AggregatedValues

ENTROPY_SMOOTHING = 1e-6


@dataclass
class SelectionBatch:
    """Ordered ids chosen for labeling in one round, with per-stage timings."""

    chosen: np.ndarray
    method_tag: str
    stage_timings: dict[str, float] = field(default_factory=dict)  # seconds

    def __post_init__(self) -> None:
        self.chosen = np.asarray(self.chosen, dtype=np.int64)
        if np.unique(self.chosen).size != self.chosen.size:
            raise ValidationError("selection batch contains duplicate ids")

    def to_json(self) -> str:
        doc = {
            "method_tag": self.method_tag,
            "chosen": self.chosen.tolist(),
            "stage_timings_us": {k: int(round(v * 1e6)) for k, v in self.stage_timings.items()},
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SelectionBatch":
        doc = json.loads(text)
        return cls(
            chosen=np.asarray(doc["chosen"], dtype=np.int64),
            method_tag=doc["method_tag"],
            stage_timings={k: v / 1e6 for k, v in doc.get("stage_timings_us", {}).items()},
        )


@dataclass
class PreselectSpec:
    """How much of the pool survives the value filter before diversification."""

    fraction: float = 0.1
    floor: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.fraction <= 1.0:
            raise ValidationError(f"preselect fraction must lie in (0, 1], got {self.fraction}")
        if self.floor < 0:
            raise ValidationError(f"preselect floor must be >= 0, got {self.floor}")

    def count(self, pool_size: int, batch_size: int) -> int:
        n = max(self.floor, math.ceil(self.fraction * pool_size))
        n = min(n, pool_size)
        return max(n, min(batch_size, pool_size))


def preselect(values: AggregatedValues, spec: PreselectSpec, batch_size: int) -> np.ndarray:
    """Ids of the top-valued points, count per the spec, ties by ascending id."""
    n = spec.count(values.point_ids.size, batch_size)
    order = np.argsort(-values.values, kind="stable")  # stable keeps ascending ids on ties
    return values.point_ids[order[:n]]


def _timed(method_tag: str, ids: np.ndarray, started: float) -> SelectionBatch:
    return SelectionBatch(
        chosen=ids,
        method_tag=method_tag,
        stage_timings={"diversify": time.perf_counter() - started},
    )


def coreset_greedy(
    pool_X: np.ndarray,
    pool_ids: np.ndarray,
    lab_X: np.ndarray,
    batch_size: int,
) -> SelectionBatch:
    """Greedy k-center: repeatedly take the pool point farthest from all
    centers (labeled points count as centers), 2-approximate for k-center."""
    if pool_ids.size == 0:
        raise ValidationError("pool must be nonempty")
    t0 = time.perf_counter()
    n = pool_X.shape[0]
    pool_sq = np.einsum("ij,ij->i", pool_X, pool_X)

    if lab_X.shape[0] > 0:
        cover = np.empty(n, dtype=pool_X.dtype)

        def init(start: int, stop: int) -> None:
            scores = ranking_scores(pool_X[start:stop], lab_X)
            cover[start:stop] = scores.min(axis=1) + pool_sq[start:stop]

        parallel.map_chunks(init, n, CHUNK_ROWS)
    else:
        cover = np.full(n, np.inf, dtype=pool_X.dtype)

    take = min(batch_size, n)
    picked = np.empty(take, dtype=np.int64)
    buf = np.empty(n, dtype=pool_X.dtype)
    for t in range(take):
        j = int(np.argmax(cover))  # first max = smallest id
        picked[t] = j
        center = pool_X[j]
        np.dot(pool_X, center, out=buf)
        buf *= -2.0
        buf += pool_sq
        buf += pool_sq[j]
        np.minimum(cover, buf, out=cover)
    return _timed("coreset", pool_ids[picked], t0)


def kcenter_cover_radius(pool_X: np.ndarray, center_X: np.ndarray) -> float:
    """Max over pool points of the distance to the nearest center."""
    if center_X.shape[0] == 0:
        return math.inf
    worst = 0.0
    pool_sq = np.einsum("ij,ij->i", pool_X, pool_X)

    def run(start: int, stop: int) -> float:
        scores = ranking_scores(pool_X[start:stop], center_X)
        return float((scores.min(axis=1) + pool_sq[start:stop]).max())

    parts = parallel.map_chunks(run, pool_X.shape[0], CHUNK_ROWS)
    worst = max(parts)
    return math.sqrt(max(worst, 0.0))


def _d2_sample(
    rng: np.random.Generator,
    feats: np.ndarray,
    take: int,
    first: int | None = None,
) -> np.ndarray:
    """k-means++ style D^2 sampling over rows; returns row indices in draw order."""
    n = feats.shape[0]
    chosen = np.empty(take, dtype=np.int64)
    taken = np.zeros(n, dtype=bool)
    feats_sq = np.einsum("ij,ij->i", feats, feats)

    j = int(rng.integers(n)) if first is None else int(first)
    chosen[0] = j
    taken[j] = True
    d2 = ranking_scores(feats, feats[j : j + 1]).ravel() + feats_sq
    np.maximum(d2, 0.0, out=d2)
    for t in range(1, take):
        weights = np.where(taken, 0.0, d2)
        total = weights.sum()
        if total > 0.0:
            j = int(rng.choice(n, p=weights / total))
        else:
            j = int(rng.choice(np.flatnonzero(~taken)))  # all remaining coincide with centers
        chosen[t] = j
        taken[j] = True
        nd = ranking_scores(feats, feats[j : j + 1]).ravel() + feats_sq
        np.maximum(nd, 0.0, out=nd)
        np.minimum(d2, nd, out=d2)
    return chosen


def k_medians(
    pool_X: np.ndarray,
    pool_ids: np.ndarray,
    batch_size: int,
    iters: int = 10,
    seed: int = 0,
) -> SelectionBatch:
    """K-medoids with D^2-sampled initialization and Lloyd-style refinement.

    Medoids are always real pool members. Assignment ties go to the
    earlier medoid in the list, medoid-update ties to the smaller id.
    """
    n = pool_X.shape[0]
    if batch_size > n:
        raise ValidationError(f"batch size {batch_size} exceeds pool size {n}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    medoids = _d2_sample(rng, pool_X, batch_size)

    for _ in range(iters):
        scores = ranking_scores(pool_X, pool_X[medoids])
        assign = np.argmin(scores, axis=1)
        changed = False
        for m in range(batch_size):
            members = np.flatnonzero(assign == m)
            if members.size == 0:
                continue
            inner = np.sqrt(
                np.maximum(
                    ranking_scores(pool_X[members], pool_X[members])
                    + np.einsum("ij,ij->i", pool_X[members], pool_X[members])[:, None],
                    0.0,
                )
            )
            best = members[int(np.argmin(inner.sum(axis=1)))]
            if best != medoids[m]:
                medoids[m] = best
                changed = True
        if not changed:
            break
    return _timed("kmedians", pool_ids[medoids], t0)


@dataclass
class ProbeSpec:
    """Linear softmax probe trained by full-batch gradient descent."""

    epochs: int = 100
    learning_rate: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0.0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def badge_select(
    pool_X: np.ndarray,
    pool_ids: np.ndarray,
    lab_X: np.ndarray,
    lab_y: np.ndarray,
    num_classes: int,
    batch_size: int,
    probe: ProbeSpec,
) -> SelectionBatch:
    """Gradient-embedding selection: train a probe, embed each pool point as
    (softmax - onehot(argmax)) outer feature vector, D^2-sample B of them.

    The first draw is uniform over nonzero embeddings (confident points have
    zero gradient and carry no signal); later draws are D^2 weighted.
    """
    if lab_y.size == 0:
        raise ValidationError("badge needs a nonempty labeled set to train its probe")
    t0 = time.perf_counter()
    init_rng, sample_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(probe.seed).spawn(2)]
    n_lab, d = lab_X.shape

    W = 0.01 * init_rng.standard_normal((d, num_classes))
    b = np.zeros(num_classes)
    X64 = lab_X.astype(np.float64)
    onehot = np.zeros((n_lab, num_classes))
    onehot[np.arange(n_lab), lab_y] = 1.0
    for epoch in range(probe.epochs):
        probs = _softmax(X64 @ W + b)
        grad = probs - onehot
        W -= probe.learning_rate * (X64.T @ grad) / n_lab
        b -= probe.learning_rate * grad.mean(axis=0)
    logits = X64 @ W + b
    probs = _softmax(logits)
    loss = -np.log(np.maximum(probs[np.arange(n_lab), lab_y], 1e-300)).mean()
    if not (np.isfinite(loss) and np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise NumericError(
            f"probe diverged: loss={loss!r} after {probe.epochs} epochs at lr={probe.learning_rate}"
        )

    pool_probs = _softmax(pool_X.astype(np.float64) @ W + b)
    hard = np.argmax(pool_probs, axis=1)
    grad_out = pool_probs.copy()
    grad_out[np.arange(pool_X.shape[0]), hard] -= 1.0
    embeddings = (grad_out[:, :, None] * pool_X[:, None, :].astype(np.float64)).reshape(pool_X.shape[0], -1)

    norms = np.einsum("ij,ij->i", embeddings, embeddings)
    nonzero = np.flatnonzero(norms > 0.0)
    take = min(batch_size, pool_X.shape[0])
    if nonzero.size:
        first = int(nonzero[sample_rng.integers(nonzero.size)])
    else:
        first = int(sample_rng.integers(pool_X.shape[0]))
    picked = _d2_sample(sample_rng, embeddings, take, first=first)
    return _timed("badge", pool_ids[picked], t0)


def entropy_select(
    pool_X: np.ndarray,
    pool_ids: np.ndarray,
    lab_X: np.ndarray,
    lab_y: np.ndarray,
    num_classes: int,
    batch_size: int,
    K: int,
) -> SelectionBatch:
    """Highest Shannon entropy of the Laplace-smoothed KNN vote distribution."""
    if lab_y.size == 0:
        raise ValidationError("entropy selection needs a nonempty labeled set")
    t0 = time.perf_counter()
    n = pool_X.shape[0]
    k_eff = min(K, lab_y.size)
    entropy = np.empty(n)

    def run(start: int, stop: int) -> None:
        scores = ranking_scores(pool_X[start:stop], lab_X)
        nearest = k_smallest_columns(scores, k_eff)
        votes = np.zeros((stop - start, num_classes))
        rows = np.repeat(np.arange(stop - start), k_eff)
        np.add.at(votes, (rows, lab_y[nearest].ravel()), 1.0)
        p = (votes / k_eff + ENTROPY_SMOOTHING) / (1.0 + num_classes * ENTROPY_SMOOTHING)
        entropy[start:stop] = -(p * np.log(p)).sum(axis=1)

    parallel.map_chunks(run, n, CHUNK_ROWS)
    order = np.argsort(-entropy, kind="stable")
    return _timed("entropy", pool_ids[order[: min(batch_size, n)]], t0)


def random_select(pool_ids: np.ndarray, batch_size: int, seed: int = 0) -> SelectionBatch:
    """Uniform sample without replacement, in draw order."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    take = min(batch_size, pool_ids.size)
    picked = rng.choice(pool_ids.size, size=take, replace=False)
    return _timed("random", pool_ids[picked], t0)


DiversityFn = Callable[[np.ndarray, np.ndarray], SelectionBatch]


def ads_enhanced(
    diversity_op: DiversityFn,
    values: AggregatedValues,
    spec: PreselectSpec,
    pool_X: np.ndarray,
    pool_ids: np.ndarray,
    batch_size: int,
) -> SelectionBatch:
    """Value filter in front of any diversity selector.

    `diversity_op(sub_X, sub_ids)` runs on the pre-selected subset only;
    preselect and diversify durations are recorded separately.
    """
    if values.point_ids.size != pool_ids.size or not np.array_equal(
        np.sort(values.point_ids), pool_ids
    ):
        raise ValidationError("aggregated values must cover exactly the pool")
    t0 = time.perf_counter()
    kept = np.sort(preselect(values, spec, batch_size))
    rows = np.searchsorted(pool_ids, kept)
    sub_X = np.ascontiguousarray(pool_X[rows])
    t_preselect = time.perf_counter() - t0

    inner = diversity_op(sub_X, kept)
    timings = {"preselect": t_preselect, "diversify": inner.stage_timings.get("diversify", 0.0)}
    return SelectionBatch(
        chosen=inner.chosen,
        method_tag=f"ads+{inner.method_tag}",
        stage_timings=timings,
    )
