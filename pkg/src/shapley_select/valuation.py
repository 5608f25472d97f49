"""Shapley-value data valuation under a K-nearest-neighbor soft-vote utility.

Three routes to the same quantity:

* `knn_shapley_exact` — closed-form backward recurrence over the
  distance-sorted training points, exact and near-linear per validation
  point. Production path.
* `tmc_shapley` — truncated Monte-Carlo permutation sampling. Reference
  estimator.
* `brute_force_shapley` — exhaustive subset enumeration of the Shapley
  definition. Ground-truth oracle for tests, guarded to small n.

The utility of a labeled subset for one validation point is the fraction
of its min(K, |subset|) nearest members (ties by ascending point id) whose
label matches, divided by K; the total utility is the mean over validation
points. The empty subset is worth `empty_set_value` (0 by default).
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import parallel
from .distances import EUCLIDEAN, check_metric, rank_columns, ranking_scores
from .errors import CapacityError, FormatError, NumericError, ValidationError

BRUTE_FORCE_MAX_POINTS = 20
EXHAUSTIVE_TMC_MAX_POINTS = 7
_VAL_CHUNK = 256

METHOD_KNN_EXACT = "knn-exact"
METHOD_TMC = "tmc"
METHOD_BRUTE_FORCE = "brute-force"
METHOD_REGRESSED = "regressed"

# methods whose values must satisfy the efficiency identity exactly
_EFFICIENT_METHODS = (METHOD_KNN_EXACT, METHOD_BRUTE_FORCE)
_EFFICIENCY_TOL = 1e-9


@dataclass
class UtilitySpec:
    """Parameters of the KNN soft-vote utility v(.)."""

    K: int = 3
    metric: str = EUCLIDEAN
    empty_set_value: float = 0.0

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValidationError(f"K must be >= 1, got {self.K}")
        check_metric(self.metric)


@dataclass
class ValuationResult:
    """Per-point values with provenance and the utility they divide up."""

    point_ids: np.ndarray
    values: np.ndarray
    method: str
    utility_total: float
    utility_empty: float = 0.0
    metadata: dict = field(default_factory=dict)
    std_errors: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.point_ids.shape != self.values.shape:
            raise ValidationError("one value per point id required")
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"non-finite values in {self.method} valuation")
        if self.method in _EFFICIENT_METHODS:
            gap = abs(self.values.sum() - (self.utility_total - self.utility_empty))
            if gap > _EFFICIENCY_TOL:
                raise NumericError(
                    f"{self.method} values violate the efficiency identity by {gap:.3e}"
                )

    def value_of(self, point_id: int) -> float:
        idx = int(np.searchsorted(self.point_ids, point_id))
        if idx >= self.point_ids.size or self.point_ids[idx] != point_id:
            raise ValidationError(f"no value for point id {point_id}")
        return float(self.values[idx])

    def to_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text())

    def to_csv_text(self) -> str:
        meta = {
            "method": self.method,
            "utility_total": self.utility_total,
            "utility_empty": self.utility_empty,
            **self.metadata,
        }
        if self.std_errors is not None:
            meta["std_errors"] = [float(s) for s in self.std_errors]
        buf = io.StringIO()
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["point_id", "value"])
        for pid, val in zip(self.point_ids, self.values):
            writer.writerow([int(pid), f"{float(val):.17g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path: str | Path) -> "ValuationResult":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# "):
            raise FormatError("valuation CSV must start with a '# ' JSON metadata line")
        try:
            meta = json.loads(lines[0][2:])
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad metadata header: {exc}") from exc
        reader = csv.reader(lines[1:])
        header = next(reader, None)
        if header != ["point_id", "value"]:
            raise FormatError(f"unexpected CSV header {header!r}")
        ids, vals = [], []
        for row in reader:
            if not row:
                continue
            ids.append(int(row[0]))
            vals.append(float(row[1]))
        std = meta.pop("std_errors", None)
        return cls(
            point_ids=np.asarray(ids),
            values=np.asarray(vals),
            method=meta.pop("method"),
            utility_total=meta.pop("utility_total"),
            utility_empty=meta.pop("utility_empty", 0.0),
            metadata=meta,
            std_errors=None if std is None else np.asarray(std, dtype=np.float64),
        )


def _check_inputs(lab_y: np.ndarray, val_y: np.ndarray) -> None:
    if val_y.size == 0:
        raise ValidationError("validation set must be nonempty")
    if lab_y.size == 0:
        raise ValidationError("labeled set must be nonempty")


def _ranked_matches(
    lab_X: np.ndarray,
    lab_y: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    metric: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Per validation point: labeled indices sorted by distance (ties by
    position, i.e. ascending id) and the match indicator in that order."""
    scores = ranking_scores(val_X.astype(np.float64), lab_X.astype(np.float64), metric)
    ranks = rank_columns(scores)
    matches = (lab_y[ranks] == val_y[:, None]).astype(np.float64)
    return ranks, matches


def knn_utility(
    subset_X: np.ndarray,
    subset_y: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    spec: UtilitySpec,
) -> float:
    """Soft-vote KNN utility of a labeled subset on the validation set."""
    if val_y.size == 0:
        raise ValidationError("validation set must be nonempty")
    if subset_y.size == 0:
        return spec.empty_set_value
    _, matches = _ranked_matches(subset_X, subset_y, val_X, val_y, spec.metric)
    k_eff = min(spec.K, subset_y.size)
    return float(matches[:, :k_eff].sum() / (spec.K * val_y.size))


def knn_shapley_exact(
    lab_X: np.ndarray,
    lab_y: np.ndarray,
    lab_ids: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    spec: UtilitySpec,
) -> ValuationResult:
    """Exact Shapley values of every labeled point under the KNN utility.

    For one validation point with the labeled points sorted by ascending
    distance (a_1 nearest), the value of a_n is match(a_n)/n and walking
    inward a_i picks up (match(a_i) - match(a_{i+1}))/K * min(K, i)/i on
    top of a_{i+1}'s value. The final value is the mean over validation
    points. Labeled rows must be in ascending-id order.
    """
    _check_inputs(lab_y, val_y)
    n = lab_y.size
    if spec.K > n:
        raise ValidationError(f"K={spec.K} exceeds labeled set size {n}")

    i = np.arange(1, n, dtype=np.float64)
    inward_factor = np.minimum(spec.K, i) / (spec.K * i)  # min(K,i)/(K*i), i = 1..n-1

    def chunk_sum(start: int, stop: int) -> np.ndarray:
        ranks, matches = _ranked_matches(lab_X, lab_y, val_X[start:stop], val_y[start:stop], spec.metric)
        s = np.empty_like(matches)
        s[:, n - 1] = matches[:, n - 1] / n
        if n > 1:
            steps = (matches[:, :-1] - matches[:, 1:]) * inward_factor[None, :]
            s[:, :-1] = s[:, n - 1 : n] + np.cumsum(steps[:, ::-1], axis=1)[:, ::-1]
        per_point = np.zeros((stop - start, n))
        np.put_along_axis(per_point, ranks, s, axis=1)
        return per_point.sum(axis=0)

    parts = parallel.map_chunks(chunk_sum, val_y.size, _VAL_CHUNK)
    values = parallel.tree_sum(parts) / val_y.size

    total = knn_utility(lab_X, lab_y, val_X, val_y, spec)
    return ValuationResult(
        point_ids=lab_ids,
        values=values,
        method=METHOD_KNN_EXACT,
        utility_total=total,
        utility_empty=spec.empty_set_value,
        metadata={"K": spec.K, "metric": spec.metric},
    )


class _SubsetUtility:
    """Shared fast subset-utility evaluator over precomputed rankings."""

    def __init__(self, lab_X, lab_y, val_X, val_y, spec: UtilitySpec):
        self.spec = spec
        self.n = lab_y.size
        self.m_val = val_y.size
        ranks, matches = _ranked_matches(lab_X, lab_y, val_X, val_y, spec.metric)
        self.rank_order = ranks
        self.match_by_rank = matches

    def of_members(self, members: np.ndarray) -> float:
        """Utility of the subset given a boolean membership vector."""
        size = int(members.sum())
        if size == 0:
            return self.spec.empty_set_value
        k_eff = min(self.spec.K, size)
        in_rank = members[self.rank_order]
        within_k = np.cumsum(in_rank, axis=1) <= k_eff
        hits = (in_rank & within_k) * self.match_by_rank
        return float(hits.sum() / (self.spec.K * self.m_val))


def brute_force_shapley(
    lab_X: np.ndarray,
    lab_y: np.ndarray,
    lab_ids: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    spec: UtilitySpec,
) -> ValuationResult:
    """Ground-truth Shapley values by full subset enumeration.

    phi_z = (1/n) * sum over subsets s of the others of
    [v(s + z) - v(s)] / C(n-1, |s|). Exponential; guarded to n <= 20.
    """
    _check_inputs(lab_y, val_y)
    n = lab_y.size
    if n > BRUTE_FORCE_MAX_POINTS:
        raise CapacityError(
            f"brute force limited to {BRUTE_FORCE_MAX_POINTS} labeled points, got {n}"
        )

    util = _SubsetUtility(lab_X, lab_y, val_X, val_y, spec)
    n_masks = 1 << n
    u_table = np.empty(n_masks)
    members = np.zeros(n, dtype=bool)
    for mask in range(n_masks):
        if mask:
            members[:] = False
            members[[b for b in range(n) if mask >> b & 1]] = True
            u_table[mask] = util.of_members(members)
        else:
            u_table[0] = spec.empty_set_value

    masks = np.arange(n_masks, dtype=np.int64)
    popcount = np.zeros(n_masks, dtype=np.int64)
    for b in range(n):
        popcount += (masks >> b) & 1
    size_weight = np.array([1.0 / math.comb(n - 1, s) for s in range(n)])

    values = np.empty(n)
    for z in range(n):
        bit = 1 << z
        without = masks[(masks & bit) == 0]
        marginals = u_table[without | bit] - u_table[without]
        values[z] = float(np.dot(marginals, size_weight[popcount[without]])) / n

    return ValuationResult(
        point_ids=lab_ids,
        values=values,
        method=METHOD_BRUTE_FORCE,
        utility_total=float(u_table[n_masks - 1]),
        utility_empty=spec.empty_set_value,
        metadata={"K": spec.K, "metric": spec.metric},
    )


@dataclass
class McSpec:
    """Monte-Carlo settings for the permutation estimator."""

    num_permutations: int = 500
    truncation_tol: float = 0.0
    seed: int = 0
    exhaustive: bool = False

    def __post_init__(self) -> None:
        if not self.exhaustive and self.num_permutations < 1:
            raise ValidationError(f"num_permutations must be >= 1, got {self.num_permutations}")
        if self.truncation_tol < 0.0:
            raise ValidationError(f"truncation_tol must be >= 0, got {self.truncation_tol}")


def tmc_shapley(
    lab_X: np.ndarray,
    lab_y: np.ndarray,
    lab_ids: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    spec: UtilitySpec,
    mc: McSpec,
) -> ValuationResult:
    """Truncated Monte-Carlo permutation estimate of the Shapley values.

    Averages prefix marginal contributions over sampled permutations; a
    permutation scan stops (remaining marginals are zero) once the prefix
    utility is within truncation_tol * |v(N)| of v(N). With
    mc.exhaustive=True every permutation is enumerated instead of sampled,
    which reproduces the exact values when truncation_tol is 0.
    """
    _check_inputs(lab_y, val_y)
    n = lab_y.size
    util = _SubsetUtility(lab_X, lab_y, val_X, val_y, spec)
    v_full = util.of_members(np.ones(n, dtype=bool))
    threshold = mc.truncation_tol * abs(v_full)

    if mc.exhaustive:
        if n > EXHAUSTIVE_TMC_MAX_POINTS:
            raise CapacityError(
                f"exhaustive permutation enumeration limited to {EXHAUSTIVE_TMC_MAX_POINTS} points, got {n}"
            )
        perms = itertools.permutations(range(n))
        n_perms = math.factorial(n)
    else:
        rng = np.random.default_rng(mc.seed)
        perms = (rng.permutation(n) for _ in range(mc.num_permutations))
        n_perms = mc.num_permutations

    total = np.zeros(n)
    total_sq = np.zeros(n)
    members = np.zeros(n, dtype=bool)
    for perm in perms:
        members[:] = False
        prev = spec.empty_set_value
        marginals = np.zeros(n)
        for z in perm:
            if abs(prev - v_full) < threshold:
                break  # truncation: the rest of this permutation contributes 0
            members[z] = True
            cur = util.of_members(members)
            marginals[z] = cur - prev
            prev = cur
        total += marginals
        total_sq += marginals * marginals

    values = total / n_perms
    if n_perms > 1:
        var = np.maximum(total_sq / n_perms - values * values, 0.0) * (n_perms / (n_perms - 1))
        std_errors = np.sqrt(var / n_perms)
    else:
        std_errors = np.zeros(n)

    return ValuationResult(
        point_ids=lab_ids,
        values=values,
        method=METHOD_TMC,
        utility_total=v_full,
        utility_empty=spec.empty_set_value,
        metadata={
            "K": spec.K,
            "metric": spec.metric,
            "num_permutations": n_perms,
            "truncation_tol": mc.truncation_tol,
            "seed": None if mc.exhaustive else mc.seed,
            "exhaustive": mc.exhaustive,
        },
        std_errors=std_errors,
    )
