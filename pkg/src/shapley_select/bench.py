"""Selection-efficiency benchmark: bare diversity vs value-filtered diversity.

For each pool size, times one full selection round both ways on the same
synthetic pool and reports the speedup ratio. The filtered side is charged
end to end: valuation, regressor fit and prediction, aggregation,
pre-selection, and the diversity pass over the surviving subset.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .data import ScenarioSpec, SplitSizes, generate_scenario
from .errors import ValidationError
from .extrapolation import (
    AGG_MAX,
    RegressionSpec,
    aggregate,
    all_classes_candidates,
    candidate_classes,
    fit_value_regressors,
    predict_values,
)
from .selection import (
    PreselectSpec,
    ProbeSpec,
    ads_enhanced,
    badge_select,
    coreset_greedy,
    entropy_select,
    k_medians,
    random_select,
)
from .valuation import UtilitySpec, knn_shapley_exact

BENCH_SELECTORS = ("coreset", "kmedians", "badge", "entropy", "random")


@dataclass
class BenchSpec:
    pool_sizes: list[int] = field(default_factory=lambda: [10_000, 100_000])
    selector: str = "coreset"
    batch_size: int = 1000
    fraction: float = 0.1
    floor: int = 0
    n_dims: int = 32
    labeled_size: int = 128
    val_size: int = 64
    num_classes: int = 2
    # k=1 keeps the per-class regressors on the vectorized argmin path, which
    # is what makes the filter overhead small on few-core machines
    k_neighbors: int = 1
    utility_k: int = 3
    repeats: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.pool_sizes:
            raise ValidationError("pool_sizes must be nonempty")
        if self.selector not in BENCH_SELECTORS:
            raise ValidationError(f"unknown selector {self.selector!r}")
        if self.repeats < 1:
            raise ValidationError("repeats must be >= 1")


def _diversity(spec: BenchSpec, lab_X, lab_y, seed: int):
    B = spec.batch_size

    def run(sub_X, sub_ids):
        if spec.selector == "coreset":
            return coreset_greedy(sub_X, sub_ids, lab_X, B)
        if spec.selector == "kmedians":
            return k_medians(sub_X, sub_ids, min(B, sub_ids.size), seed=seed)
        if spec.selector == "badge":
            return badge_select(sub_X, sub_ids, lab_X, lab_y, spec.num_classes, B, ProbeSpec(seed=seed))
        if spec.selector == "entropy":
            return entropy_select(sub_X, sub_ids, lab_X, lab_y, spec.num_classes, B, spec.utility_k)
        return random_select(sub_ids, B, seed=seed)

    return run


def bench_pool_size(spec: BenchSpec, pool_size: int) -> dict:
    """One (selector, pool size) comparison row; times are mean seconds."""
    scenario = generate_scenario(
        ScenarioSpec("identity", {"n_dims": spec.n_dims, "num_classes": spec.num_classes}, seed=spec.seed),
        SplitSizes(spec.labeled_size, pool_size, spec.val_size, 1),
    )
    ds, splits = scenario.dataset, scenario.splits
    lab_X = ds.features_for(splits.labeled)
    lab_y = ds.labels_for(splits.labeled)
    val_X = ds.features_for(splits.validation)
    val_y = ds.labels_for(splits.validation)
    pool_X = ds.features_for(splits.unlabeled)
    pool_ids = splits.unlabeled
    utility = UtilitySpec(K=min(spec.utility_k, spec.labeled_size))
    regression = RegressionSpec(k_neighbors=spec.k_neighbors)
    pre = PreselectSpec(fraction=spec.fraction, floor=spec.floor)
    diversity = _diversity(spec, lab_X, lab_y, spec.seed)

    def run_bare() -> float:
        t0 = time.perf_counter()
        diversity(pool_X, pool_ids)
        return time.perf_counter() - t0

    def run_filtered() -> tuple[float, dict[str, float]]:
        stage = {}
        t0 = time.perf_counter()
        valuation = knn_shapley_exact(lab_X, lab_y, splits.labeled, val_X, val_y, utility)
        stage["valuation"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        regs = fit_value_regressors(lab_X, lab_y, splits.labeled, valuation, ds.num_classes, regression)
        if ds.num_classes <= 10:
            cands = all_classes_candidates(pool_X.shape[0], ds.num_classes, 10)
        else:
            cands = candidate_classes(pool_X, lab_X, lab_y, ds.num_classes, utility.K, 10)
        agg = aggregate(predict_values(pool_X, pool_ids, regs, cands), AGG_MAX)
        stage["regress"] = time.perf_counter() - t0

        batch = ads_enhanced(diversity, agg, pre, pool_X, pool_ids, spec.batch_size)
        stage["preselect"] = batch.stage_timings["preselect"]
        stage["diversify"] = batch.stage_timings["diversify"]
        return sum(stage.values()), stage

    run_bare()  # warm allocators and code paths once
    run_filtered()

    bare_times, ads_times = [], []
    stages_acc: dict[str, float] = {}
    for _ in range(spec.repeats):
        bare_times.append(run_bare())
        total, stage = run_filtered()
        ads_times.append(total)
        for k, v in stage.items():
            stages_acc[k] = stages_acc.get(k, 0.0) + v

    bare_mean = float(np.mean(bare_times))
    ads_mean = float(np.mean(ads_times))
    row = {
        "method": spec.selector,
        "pool_size": pool_size,
        "bare_diversify_s": bare_mean,
        "ads_total_s": ads_mean,
        "ratio": bare_mean / ads_mean if ads_mean > 0 else float("inf"),
    }
    for k, v in stages_acc.items():
        row[f"ads_{k}_s"] = v / spec.repeats
    return row


def run_bench(spec: BenchSpec) -> list[dict]:
    return [bench_pool_size(spec, n) for n in spec.pool_sizes]


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([
        "method", "pool_size", "bare_diversify_us", "ads_total_us",
        "ads_valuation_us", "ads_regress_us", "ads_preselect_us", "ads_diversify_us", "ratio",
    ])
    for row in rows:
        writer.writerow([
            row["method"], row["pool_size"],
            int(round(row["bare_diversify_s"] * 1e6)),
            int(round(row["ads_total_s"] * 1e6)),
            int(round(row.get("ads_valuation_s", 0.0) * 1e6)),
            int(round(row.get("ads_regress_s", 0.0) * 1e6)),
            int(round(row.get("ads_preselect_s", 0.0) * 1e6)),
            int(round(row.get("ads_diversify_s", 0.0) * 1e6)),
            f"{row['ratio']:.4f}",
        ])
    return buf.getvalue()
