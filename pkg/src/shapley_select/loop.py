"""Multi-round batch active learning simulation.

Each round: value the labeled set, extrapolate values onto the pool,
select a batch (bare diversity or value-filtered), reveal labels, refit
the KNN proxy, and append a record. Valuation and extrapolation are
skipped for non-filtered methods. All randomness derives from the repeat
seed, so a full experiment is reproducible bit-for-bit.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import parallel
from .data import FeatureDataset, SplitAssignment, reveal_labels
from .distances import CHUNK_ROWS, k_smallest_columns, ranking_scores
from .errors import ValidationError
from .extrapolation import (
    AGG_CONFIDENCE,
    AGG_MAX,
    AGGREGATIONS,
    DEFAULT_CANDIDATE_LIMIT,
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
    SelectionBatch,
    ads_enhanced,
    badge_select,
    coreset_greedy,
    entropy_select,
    k_medians,
    random_select,
)
from .valuation import UtilitySpec, ValuationResult, knn_shapley_exact

SELECTORS = ("coreset", "kmedians", "badge", "entropy", "random")

REPORT_VERSION = 1
STAGES = ("valuation", "regress", "preselect", "diversify")


@dataclass
class MethodSpec:
    """Which selector runs each round and whether it is value-filtered."""

    selector: str = "coreset"
    ads: bool = False
    preselect: PreselectSpec | None = None
    kmedians_iters: int = 10
    probe: ProbeSpec | None = None

    def __post_init__(self) -> None:
        if self.selector not in SELECTORS:
            raise ValidationError(f"unknown selector {self.selector!r}, expected one of {SELECTORS}")

    def tag(self) -> str:
        return ("ads+" if self.ads else "") + self.selector


@dataclass
class LoopConfig:
    batch_size: int = 50
    num_rounds: int = 3
    method: MethodSpec = field(default_factory=MethodSpec)
    utility: UtilitySpec = field(default_factory=UtilitySpec)
    regression: RegressionSpec = field(default_factory=RegressionSpec)
    candidate_limit: int = DEFAULT_CANDIDATE_LIMIT
    aggregation: str = AGG_MAX
    eval_k: int | None = None  # proxy vote size; defaults to utility.K
    seed: int = 0
    record_timings: bool = True
    baseline_timing: bool = True  # also time the bare selector when ads is on

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.num_rounds < 1:
            raise ValidationError(f"num_rounds must be >= 1, got {self.num_rounds}")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"unknown aggregation {self.aggregation!r}")
        if self.method.ads and self.method.preselect is None:
            # default floor 2B honors the "a few times B" pre-selection sizing
            self.method.preselect = PreselectSpec(fraction=0.1, floor=2 * self.batch_size)


@dataclass
class RoundRecord:
    round_index: int
    chosen: np.ndarray
    accuracy: float
    timings: dict[str, float]
    value_stats: dict[str, float] | None = None
    terminal: bool = False


@dataclass
class LoopState:
    """Mutable loop state: current splits plus append-only round records."""

    splits: SplitAssignment
    initial_labeled: int
    round_index: int = 0
    records: list[RoundRecord] = field(default_factory=list)
    terminal: bool = False


def new_state(splits: SplitAssignment) -> LoopState:
    return LoopState(splits=copy.deepcopy(splits), initial_labeled=splits.labeled.size)


def evaluate_proxy(
    lab_X: np.ndarray,
    lab_y: np.ndarray,
    test_X: np.ndarray,
    test_y: np.ndarray,
    K: int,
    num_classes: int,
) -> float:
    """0-1 accuracy of the plurality K-NN vote, ties to the smallest class id."""
    if lab_y.size == 0 or test_y.size == 0:
        raise ValidationError("labeled and test sets must be nonempty")
    k_eff = min(K, lab_y.size)
    hits = 0

    def run(start: int, stop: int) -> int:
        scores = ranking_scores(test_X[start:stop], lab_X)
        nearest = k_smallest_columns(scores, k_eff)
        votes = np.zeros((stop - start, num_classes), dtype=np.int64)
        rows = np.repeat(np.arange(stop - start), k_eff)
        np.add.at(votes, (rows, lab_y[nearest].ravel()), 1)
        pred = np.argmax(votes, axis=1)  # first max = smallest class id
        return int((pred == test_y[start:stop]).sum())

    parts = parallel.map_chunks(run, test_y.size, CHUNK_ROWS)
    hits = sum(parts)
    return hits / test_y.size


def _round_seed(seed: int, round_index: int, purpose: int) -> int:
    return int(np.random.SeedSequence([seed, round_index, purpose]).generate_state(1)[0])


def _make_diversity(config: LoopConfig, dataset: FeatureDataset, lab_X, lab_y, seed: int):
    method = config.method
    B = config.batch_size

    def run(sub_X: np.ndarray, sub_ids: np.ndarray) -> SelectionBatch:
        if method.selector == "coreset":
            return coreset_greedy(sub_X, sub_ids, lab_X, B)
        if method.selector == "kmedians":
            return k_medians(sub_X, sub_ids, min(B, sub_ids.size), iters=method.kmedians_iters, seed=seed)
        if method.selector == "badge":
            probe = method.probe or ProbeSpec()
            probe = ProbeSpec(epochs=probe.epochs, learning_rate=probe.learning_rate, seed=seed)
            return badge_select(sub_X, sub_ids, lab_X, lab_y, dataset.num_classes, B, probe)
        if method.selector == "entropy":
            return entropy_select(sub_X, sub_ids, lab_X, lab_y, dataset.num_classes, B, config.utility.K)
        return random_select(sub_ids, B, seed=seed)

    return run


def run_round(dataset: FeatureDataset, state: LoopState, config: LoopConfig) -> LoopState:
    """Execute one acquisition round, mutating and returning the state."""
    if state.terminal:
        raise ValidationError("loop state is terminal; the pool is exhausted")
    splits = state.splits
    if splits.unlabeled.size == 0:
        raise ValidationError("unlabeled pool is empty")
    if splits.validation.size == 0 or splits.test.size == 0:
        raise ValidationError("validation and test splits must be nonempty")

    def clock(t0: float) -> float:
        return (time.perf_counter() - t0) if config.record_timings else 0.0

    lab_X = dataset.features_for(splits.labeled)
    lab_y = dataset.labels_for(splits.labeled)
    pool_X = dataset.features_for(splits.unlabeled)
    pool_ids = splits.unlabeled
    timings: dict[str, float] = {}
    value_stats = None
    seed = _round_seed(config.seed, state.round_index, 0)

    if config.method.ads:
        val_X = dataset.features_for(splits.validation)
        val_y = dataset.labels_for(splits.validation)
        t0 = time.perf_counter()
        valuation = knn_shapley_exact(lab_X, lab_y, splits.labeled, val_X, val_y, config.utility)
        timings["valuation"] = clock(t0)
        value_stats = {
            "mean": float(valuation.values.mean()),
            "min": float(valuation.values.min()),
            "max": float(valuation.values.max()),
        }

        t0 = time.perf_counter()
        regressors = fit_value_regressors(
            lab_X, lab_y, splits.labeled, valuation, dataset.num_classes, config.regression
        )
        if dataset.num_classes <= config.candidate_limit and config.aggregation != AGG_CONFIDENCE:
            cands = all_classes_candidates(pool_X.shape[0], dataset.num_classes, config.candidate_limit)
        else:
            cands = candidate_classes(
                pool_X, lab_X, lab_y, dataset.num_classes,
                config.utility.K, config.candidate_limit, config.utility.metric,
            )
        ccv = predict_values(pool_X, pool_ids, regressors, cands)
        agg = aggregate(ccv, config.aggregation)
        timings["regress"] = clock(t0)

        diversity = _make_diversity(config, dataset, lab_X, lab_y, seed)
        batch = ads_enhanced(diversity, agg, config.method.preselect, pool_X, pool_ids, config.batch_size)
        if config.record_timings:
            timings["preselect"] = batch.stage_timings.get("preselect", 0.0)
            timings["diversify"] = batch.stage_timings.get("diversify", 0.0)
        else:
            timings["preselect"] = timings["diversify"] = 0.0

        if config.baseline_timing and config.record_timings:
            t0 = time.perf_counter()
            _make_diversity(config, dataset, lab_X, lab_y, seed)(pool_X, pool_ids)
            timings["bare_diversify"] = clock(t0)
    else:
        diversity = _make_diversity(config, dataset, lab_X, lab_y, seed)
        batch = diversity(pool_X, pool_ids)
        timings["valuation"] = timings["regress"] = timings["preselect"] = 0.0
        timings["diversify"] = batch.stage_timings.get("diversify", 0.0) if config.record_timings else 0.0

    chosen = batch.chosen
    reveal_labels(dataset, splits, chosen)
    splits.reveal(chosen)

    new_lab_X = dataset.features_for(splits.labeled)
    new_lab_y = dataset.labels_for(splits.labeled)
    accuracy = evaluate_proxy(
        new_lab_X, new_lab_y,
        dataset.features_for(splits.test), dataset.labels_for(splits.test),
        config.eval_k or config.utility.K, dataset.num_classes,
    )

    state.round_index += 1
    terminal = splits.unlabeled.size == 0 or chosen.size < config.batch_size
    state.terminal = terminal
    state.records.append(
        RoundRecord(
            round_index=state.round_index,
            chosen=chosen,
            accuracy=accuracy,
            timings=timings,
            value_stats=value_stats,
            terminal=terminal,
        )
    )

    expected = state.initial_labeled + state.round_index * config.batch_size
    if not terminal and splits.labeled.size != expected:
        raise ValidationError(
            f"labeled set bookkeeping broke: {splits.labeled.size} points, expected {expected}"
        )
    return state


@dataclass
class ExperimentReport:
    method_tag: str
    config_doc: dict
    round_summaries: list[dict]
    repeat_records: list[dict]
    efficiency_ratio: float | None

    def to_json_text(self) -> str:
        doc = {
            "format_version": REPORT_VERSION,
            "method": self.method_tag,
            "config": self.config_doc,
            "rounds": self.round_summaries,
            "repeats": self.repeat_records,
            "efficiency_ratio": self.efficiency_ratio,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([
            "round", "method", "accuracy_mean", "accuracy_std",
            "t_valuation_us", "t_regress_us", "t_preselect_us", "t_diversify_us",
        ])
        for row in self.round_summaries:
            writer.writerow([
                row["round"], self.method_tag,
                f"{row['accuracy_mean']:.12g}", f"{row['accuracy_std']:.12g}",
                row["timings_us"]["valuation"], row["timings_us"]["regress"],
                row["timings_us"]["preselect"], row["timings_us"]["diversify"],
            ])
        return buf.getvalue()


def _us(seconds: float) -> int:
    return int(round(seconds * 1e6))


def run_experiment(
    dataset: FeatureDataset,
    splits: SplitAssignment,
    config: LoopConfig,
    repeats: int = 1,
    seeds: list[int] | None = None,
) -> ExperimentReport:
    """Run `repeats` independent seeded loops and aggregate their records.

    Per-round accuracies are summarized as mean and sample std over
    repeats; stage timings as means. For value-filtered methods the report
    also carries the efficiency ratio: bare diversify time over the total
    filtered selection time (valuation + regression + preselect +
    diversify), mirroring a with/without comparison on the same pool.
    """
    if repeats < 1:
        raise ValidationError(f"repeats must be >= 1, got {repeats}")
    if seeds is None:
        seeds = [config.seed + r for r in range(repeats)]
    if len(seeds) != repeats:
        raise ValidationError("need exactly one seed per repeat")

    all_states: list[LoopState] = []
    repeat_records = []
    for seed in seeds:
        run_config = copy.deepcopy(config)
        run_config.seed = seed
        state = new_state(splits)
        for _ in range(config.num_rounds):
            if state.terminal or state.splits.unlabeled.size == 0:
                break
            run_round(dataset, state, run_config)
        all_states.append(state)
        repeat_records.append({
            "seed": seed,
            "rounds": [
                {
                    "round": rec.round_index,
                    "chosen": rec.chosen.tolist(),
                    "accuracy": rec.accuracy,
                    "timings_us": {k: _us(v) for k, v in sorted(rec.timings.items())},
                    "value_stats": rec.value_stats,
                    "terminal": rec.terminal,
                }
                for rec in state.records
            ],
        })

    n_rounds = max(len(s.records) for s in all_states)
    round_summaries = []
    ads_totals, bare_totals = [], []
    for r in range(n_rounds):
        recs = [s.records[r] for s in all_states if len(s.records) > r]
        accs = np.array([rec.accuracy for rec in recs])
        timing_means = {
            stage: float(np.mean([rec.timings.get(stage, 0.0) for rec in recs]))
            for stage in STAGES
        }
        summary = {
            "round": r + 1,
            "accuracy_mean": float(accs.mean()),
            "accuracy_std": float(accs.std(ddof=1)) if accs.size > 1 else 0.0,
            "timings_us": {k: _us(v) for k, v in timing_means.items()},
        }
        bare = [rec.timings["bare_diversify"] for rec in recs if "bare_diversify" in rec.timings]
        if bare:
            summary["timings_us"]["bare_diversify"] = _us(float(np.mean(bare)))
            bare_totals.extend(bare)
            ads_totals.extend(sum(rec.timings[s] for s in STAGES) for rec in recs)
        round_summaries.append(summary)

    ratio = None
    if bare_totals and sum(ads_totals) > 0.0:
        ratio = float(np.mean(bare_totals) / np.mean(ads_totals))

    return ExperimentReport(
        method_tag=config.method.tag(),
        config_doc=config_to_doc(config, repeats, seeds),
        round_summaries=round_summaries,
        repeat_records=repeat_records,
        efficiency_ratio=ratio,
    )


def config_to_doc(config: LoopConfig, repeats: int, seeds: list[int]) -> dict:
    method = config.method
    doc = {
        "batch_size": config.batch_size,
        "num_rounds": config.num_rounds,
        "method": {
            "selector": method.selector,
            "ads": method.ads,
            "kmedians_iters": method.kmedians_iters,
        },
        "utility": {
            "K": config.utility.K,
            "metric": config.utility.metric,
            "empty_set_value": config.utility.empty_set_value,
        },
        "regression": {
            "k_neighbors": config.regression.k_neighbors,
            "metric": config.regression.metric,
        },
        "candidate_limit": config.candidate_limit,
        "aggregation": config.aggregation,
        "eval_k": config.eval_k,
        "seed": config.seed,
        "seeds": list(seeds),
        "repeats": repeats,
        "record_timings": config.record_timings,
    }
    if method.preselect is not None:
        doc["method"]["preselect"] = {
            "fraction": method.preselect.fraction,
            "floor": method.preselect.floor,
        }
    if method.probe is not None:
        doc["method"]["probe"] = {
            "epochs": method.probe.epochs,
            "learning_rate": method.probe.learning_rate,
        }
    return doc
