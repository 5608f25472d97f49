"""Command-line interface.

Subcommands: dataset gen|validate, value, select, loop, bench. Exit codes
are a stable contract: 0 success, 2 validation, 3 format, 4 capacity,
5 numeric. Reports are written atomically (temp file + rename) so an
interrupted run never leaves a torn file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import parallel
from .bench import BenchSpec, bench_csv, run_bench
from .data import (
    SCENARIO_KINDS,
    ScenarioSpec,
    SplitSizes,
    generate_scenario,
    load_dataset,
    save_dataset,
)
from .errors import FormatError, ShapleySelectError, ValidationError
from .extrapolation import (
    AGGREGATIONS,
    AggregatedValues,
    RegressionSpec,
    aggregate,
    all_classes_candidates,
    candidate_classes,
    fit_value_regressors,
    predict_values,
)
from .loop import SELECTORS, LoopConfig, MethodSpec, run_experiment
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
from .valuation import (
    METHOD_BRUTE_FORCE,
    METHOD_KNN_EXACT,
    METHOD_TMC,
    McSpec,
    UtilitySpec,
    ValuationResult,
    brute_force_shapley,
    knn_shapley_exact,
    tmc_shapley,
)

CONFIG_VERSION = 1


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_sizes(text: str) -> SplitSizes:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValidationError("--sizes expects labeled,unlabeled,validation,test")
    try:
        nums = [int(p) for p in parts]
    except ValueError as exc:
        raise ValidationError(f"bad --sizes value: {exc}") from exc
    return SplitSizes(*nums)


def _parse_params(text: str | None) -> dict:
    if not text:
        return {}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"--params is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("--params must be a JSON object")
    return doc


def cmd_dataset_gen(args: argparse.Namespace) -> int:
    spec = ScenarioSpec(kind=args.kind, parameters=_parse_params(args.params), seed=args.seed)
    sizes = _parse_sizes(args.sizes)
    result = generate_scenario(spec, sizes)
    save_dataset(result.dataset, result.splits, args.out)
    if args.extras_out:
        extras = {k: np.asarray(v).tolist() for k, v in result.extras.items()}
        atomic_write_text(Path(args.extras_out), json.dumps(extras, sort_keys=True))
    print(
        f"wrote {args.out}: {result.dataset.n_points} points, "
        f"d={result.dataset.n_dims}, C={result.dataset.num_classes}"
    )
    return 0


def cmd_dataset_validate(args: argparse.Namespace) -> int:
    dataset, splits = load_dataset(args.manifest)
    print(
        f"ok: {dataset.n_points} points, d={dataset.n_dims}, C={dataset.num_classes}, "
        f"splits labeled={splits.labeled.size} unlabeled={splits.unlabeled.size} "
        f"validation={splits.validation.size} test={splits.test.size}"
    )
    return 0


def cmd_value(args: argparse.Namespace) -> int:
    dataset, splits = load_dataset(args.manifest)
    if splits.labeled.size == 0 or splits.validation.size == 0:
        raise ValidationError("valuation needs nonempty labeled and validation splits")
    lab_X = dataset.features_for(splits.labeled)
    lab_y = dataset.labels_for(splits.labeled)
    val_X = dataset.features_for(splits.validation)
    val_y = dataset.labels_for(splits.validation)
    spec = UtilitySpec(K=args.K, metric=args.metric)

    if args.method == METHOD_KNN_EXACT:
        result = knn_shapley_exact(lab_X, lab_y, splits.labeled, val_X, val_y, spec)
    elif args.method == METHOD_BRUTE_FORCE:
        result = brute_force_shapley(lab_X, lab_y, splits.labeled, val_X, val_y, spec)
    else:
        mc = McSpec(
            num_permutations=args.permutations,
            truncation_tol=args.truncation_tol,
            seed=args.seed,
            exhaustive=args.exhaustive,
        )
        result = tmc_shapley(lab_X, lab_y, splits.labeled, val_X, val_y, spec, mc)

    if args.extrapolate:
        if splits.unlabeled.size == 0:
            raise ValidationError("--extrapolate needs a nonempty unlabeled pool")
        pool_X = dataset.features_for(splits.unlabeled)
        regs = fit_value_regressors(
            lab_X, lab_y, splits.labeled, result, dataset.num_classes,
            RegressionSpec(k_neighbors=args.k_neighbors, metric=args.metric),
        )
        if dataset.num_classes <= args.candidate_limit and args.aggregation != "confidence-weighted":
            cands = all_classes_candidates(pool_X.shape[0], dataset.num_classes, args.candidate_limit)
        else:
            cands = candidate_classes(
                pool_X, lab_X, lab_y, dataset.num_classes, spec.K, args.candidate_limit, spec.metric
            )
        agg = aggregate(predict_values(pool_X, splits.unlabeled, regs, cands), args.aggregation)
        result = agg.to_valuation_result()

    atomic_write_text(Path(args.out), result.to_csv_text())
    print(f"wrote {args.out}: {result.values.size} values, v(N)={result.utility_total:.6g}")
    return 0


def _load_pool_values(path: str, pool_ids: np.ndarray) -> AggregatedValues:
    result = ValuationResult.from_csv(path)
    if not np.array_equal(np.sort(result.point_ids), pool_ids):
        raise ValidationError("values CSV must cover exactly the unlabeled pool")
    order = np.argsort(result.point_ids, kind="stable")
    return AggregatedValues(
        point_ids=result.point_ids[order],
        values=result.values[order],
        aggregation=result.metadata.get("aggregation", "external"),
    )


def cmd_select(args: argparse.Namespace) -> int:
    dataset, splits = load_dataset(args.manifest)
    pool_ids = splits.unlabeled
    if pool_ids.size == 0:
        raise ValidationError("unlabeled pool is empty")
    pool_X = dataset.features_for(pool_ids)
    lab_X = dataset.features_for(splits.labeled)
    lab_y = dataset.labels_for(splits.labeled)
    B = args.batch_size

    def diversity(sub_X, sub_ids):
        if args.method == "coreset":
            return coreset_greedy(sub_X, sub_ids, lab_X, B)
        if args.method == "kmedians":
            return k_medians(sub_X, sub_ids, min(B, sub_ids.size), seed=args.seed)
        if args.method == "badge":
            return badge_select(sub_X, sub_ids, lab_X, lab_y, dataset.num_classes, B, ProbeSpec(seed=args.seed))
        if args.method == "entropy":
            return entropy_select(sub_X, sub_ids, lab_X, lab_y, dataset.num_classes, B, args.K)
        return random_select(sub_ids, B, seed=args.seed)

    if args.ads:
        if not args.values:
            raise ValidationError("--ads requires --values CSV covering the pool")
        values = _load_pool_values(args.values, pool_ids)
        pre = PreselectSpec(fraction=args.fraction, floor=args.floor)
        batch = ads_enhanced(diversity, values, pre, pool_X, pool_ids, B)
    else:
        batch = diversity(pool_X, pool_ids)

    atomic_write_text(Path(args.out), batch.to_json() + "\n")
    print(f"wrote {args.out}: {batch.chosen.size} ids via {batch.method_tag}")
    return 0


# ---------------------------------------------------------------------------
# loop config document
# ---------------------------------------------------------------------------

def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ValidationError(f"unknown fields in {where}: {sorted(unknown)}")


def parse_run_config(path: Path) -> dict:
    if not path.exists():
        raise ValidationError(f"config not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("config root must be an object")
    if doc.get("format_version") != CONFIG_VERSION:
        raise FormatError(f"config format_version must be {CONFIG_VERSION}")
    _reject_unknown(
        doc,
        {"format_version", "scenario", "manifest", "loop", "repeats", "seeds", "output"},
        "config",
    )
    if ("scenario" in doc) == ("manifest" in doc):
        raise ValidationError("config needs exactly one of 'scenario' or 'manifest'")
    if "manifest" in doc:
        manifest = (path.parent / doc["manifest"]).resolve()
        if not manifest.exists():
            raise ValidationError(f"config references missing manifest: {manifest}")
    if "scenario" in doc:
        _reject_unknown(doc["scenario"], {"kind", "parameters", "seed", "sizes"}, "config.scenario")
    out = doc.get("output", {})
    _reject_unknown(out, {"json", "csv"}, "config.output")
    return doc


def _loop_config_from_doc(doc: dict) -> tuple[LoopConfig, int, list[int] | None]:
    loop_doc = dict(doc.get("loop", {}))
    _reject_unknown(
        loop_doc,
        {"batch_size", "num_rounds", "method", "utility", "regression",
         "candidate_limit", "aggregation", "eval_k", "seed", "record_timings", "baseline_timing"},
        "config.loop",
    )
    method_doc = dict(loop_doc.get("method", {}))
    _reject_unknown(
        method_doc,
        {"selector", "ads", "preselect", "kmedians_iters", "probe"},
        "config.loop.method",
    )
    pre_doc = method_doc.pop("preselect", None)
    preselect = None
    if pre_doc is not None:
        _reject_unknown(pre_doc, {"fraction", "floor"}, "config.loop.method.preselect")
        preselect = PreselectSpec(**pre_doc)
    probe_doc = method_doc.pop("probe", None)
    probe = None
    if probe_doc is not None:
        _reject_unknown(probe_doc, {"epochs", "learning_rate", "seed"}, "config.loop.method.probe")
        probe = ProbeSpec(**probe_doc)
    method = MethodSpec(preselect=preselect, probe=probe, **method_doc)

    utility_doc = dict(loop_doc.pop("utility", {}))
    _reject_unknown(utility_doc, {"K", "metric", "empty_set_value"}, "config.loop.utility")
    regression_doc = dict(loop_doc.pop("regression", {}))
    _reject_unknown(regression_doc, {"k_neighbors", "metric"}, "config.loop.regression")

    loop_doc.pop("method", None)
    config = LoopConfig(
        method=method,
        utility=UtilitySpec(**utility_doc),
        regression=RegressionSpec(**regression_doc),
        **loop_doc,
    )
    repeats = doc.get("repeats", 1)
    if not isinstance(repeats, int) or repeats < 1:
        raise ValidationError(f"repeats must be a positive integer, got {repeats!r}")
    seeds = doc.get("seeds")
    if seeds is not None and (not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds)):
        raise ValidationError("seeds must be a list of integers")
    return config, repeats, seeds


def cmd_loop(args: argparse.Namespace) -> int:
    path = Path(args.config)
    doc = parse_run_config(path)
    config, repeats, seeds = _loop_config_from_doc(doc)
    if args.seed is not None:
        config.seed = args.seed
    if args.repeats is not None:
        repeats = args.repeats
        seeds = None

    if "scenario" in doc:
        sc = doc["scenario"]
        spec = ScenarioSpec(kind=sc["kind"], parameters=sc.get("parameters", {}), seed=sc.get("seed", 0))
        sizes_doc = sc.get("sizes", {})
        _reject_unknown(sizes_doc, {"labeled", "unlabeled", "validation", "test"}, "config.scenario.sizes")
        result = generate_scenario(spec, SplitSizes(**sizes_doc))
        dataset, splits = result.dataset, result.splits
    else:
        dataset, splits = load_dataset(path.parent / doc["manifest"])

    report = run_experiment(dataset, splits, config, repeats=repeats, seeds=seeds)

    out = doc.get("output", {})
    json_path = path.parent / out.get("json", path.stem + ".report.json")
    csv_path = path.parent / out.get("csv", path.stem + ".report.csv")
    atomic_write_text(json_path, report.to_json_text())
    atomic_write_text(csv_path, report.to_csv_text())
    last = report.round_summaries[-1]
    ratio = f", efficiency ratio {report.efficiency_ratio:.2f}" if report.efficiency_ratio else ""
    print(
        f"wrote {json_path} and {csv_path}: {len(report.round_summaries)} rounds, "
        f"final accuracy {last['accuracy_mean']:.4f} +/- {last['accuracy_std']:.4f}{ratio}"
    )
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        pool_sizes = [int(p) for p in args.pool_sizes.split(",") if p]
    except ValueError as exc:
        raise ValidationError(f"bad --pool-sizes: {exc}") from exc
    spec = BenchSpec(
        pool_sizes=pool_sizes,
        selector=args.method,
        batch_size=args.batch_size,
        fraction=args.fraction,
        n_dims=args.dims,
        labeled_size=args.labeled_size,
        val_size=args.val_size,
        k_neighbors=args.k_neighbors,
        repeats=args.repeats,
        seed=args.seed,
    )
    rows = run_bench(spec)
    text = bench_csv(rows)
    if args.out:
        atomic_write_text(Path(args.out), text)
        print(f"wrote {args.out}")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapley-select",
        description="Shapley-value data valuation and value-filtered batch active learning",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker threads for chunked kernels (default: ${parallel.THREADS_ENV_VAR} or 1); "
        "results are identical at any thread count",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="generate or validate dataset files")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)

    gen = ds_sub.add_parser("gen", help="generate a synthetic scenario dataset")
    gen.add_argument("--kind", choices=SCENARIO_KINDS, default="identity")
    gen.add_argument("--sizes", required=True, help="labeled,unlabeled,validation,test")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--params", default=None, help="scenario parameters as a JSON object")
    gen.add_argument("--out", required=True, help="manifest path (blob written alongside)")
    gen.add_argument("--extras-out", default=None, help="optional JSON with generator bookkeeping")
    gen.set_defaults(func=cmd_dataset_gen)

    val = ds_sub.add_parser("validate", help="validate a manifest + blob pair")
    val.add_argument("manifest")
    val.set_defaults(func=cmd_dataset_validate)

    value = sub.add_parser("value", help="compute Shapley values of the labeled split")
    value.add_argument("manifest")
    value.add_argument("--method", choices=(METHOD_KNN_EXACT, METHOD_TMC, METHOD_BRUTE_FORCE),
                       default=METHOD_KNN_EXACT)
    value.add_argument("--K", type=int, default=3)
    value.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean")
    value.add_argument("--permutations", type=int, default=500)
    value.add_argument("--truncation-tol", type=float, default=0.0)
    value.add_argument("--exhaustive", action="store_true", help="enumerate all permutations (tmc)")
    value.add_argument("--seed", type=int, default=0)
    value.add_argument("--extrapolate", action="store_true",
                       help="regress values onto the unlabeled pool and write those instead")
    value.add_argument("--k-neighbors", type=int, default=10, help="regression neighbors (with --extrapolate)")
    value.add_argument("--aggregation", choices=AGGREGATIONS, default="max")
    value.add_argument("--candidate-limit", type=int, default=10)
    value.add_argument("--out", required=True)
    value.set_defaults(func=cmd_value)

    select = sub.add_parser("select", help="select a batch from the unlabeled pool")
    select.add_argument("manifest")
    select.add_argument("--method", choices=SELECTORS, default="coreset")
    select.add_argument("--batch-size", type=int, required=True)
    select.add_argument("--ads", action="store_true", help="pre-filter the pool by value first")
    select.add_argument("--values", default=None, help="valuation CSV covering the pool (with --ads)")
    select.add_argument("--fraction", type=float, default=0.1)
    select.add_argument("--floor", type=int, default=0)
    select.add_argument("--K", type=int, default=3, help="vote size for entropy selection")
    select.add_argument("--seed", type=int, default=0)
    select.add_argument("--out", required=True)
    select.set_defaults(func=cmd_select)

    loop = sub.add_parser("loop", help="run a multi-round active learning experiment")
    loop.add_argument("config", help="JSON run config")
    loop.add_argument("--seed", type=int, default=None, help="override config.loop.seed")
    loop.add_argument("--repeats", type=int, default=None, help="override config.repeats")
    loop.set_defaults(func=cmd_loop)

    bench = sub.add_parser("bench", help="time bare vs value-filtered selection")
    bench.add_argument("--pool-sizes", required=True, help="comma separated pool sizes")
    bench.add_argument("--method", choices=SELECTORS, default="coreset")
    bench.add_argument("--batch-size", type=int, default=1000)
    bench.add_argument("--fraction", type=float, default=0.1)
    bench.add_argument("--dims", type=int, default=32)
    bench.add_argument("--labeled-size", type=int, default=128)
    bench.add_argument("--val-size", type=int, default=64)
    bench.add_argument("--k-neighbors", type=int, default=1)
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", default=None)
    bench.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads if args.threads is not None else parallel.threads_from_env(1)
    parallel.set_num_threads(threads)
    try:
        return args.func(args)
    except ShapleySelectError as exc:
        category = type(exc).__name__.removesuffix("Error").lower()
        print(f"error ({category}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
