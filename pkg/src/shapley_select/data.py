"""Feature-space datasets: containers, manifest/blob I/O, scenario generators.

A dataset is a dense float32 feature matrix plus integer labels and stable
point ids. Labels of pool points are stored (the simulator needs an oracle
to reveal) but can be flagged hidden so that nothing reads them outside
`reveal_labels`. On disk a dataset is a little-endian float32 row-major
blob next to a JSON manifest (shape, classes, labels, split id lists).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import FormatError, ValidationError

MANIFEST_VERSION = 1

SCENARIO_KINDS = (
    "identity",
    "gaussian-mixture-minority",
    "label-noise",
    "white-noise-beta",
    "domain-shift-mix",
)

SPLIT_NAMES = ("labeled", "unlabeled", "validation", "test")


def _as_id_array(ids: Iterable[int]) -> np.ndarray:
    arr = np.asarray(sorted(int(i) for i in ids), dtype=np.int64)
    if arr.size != np.unique(arr).size:
        raise ValidationError("duplicate point ids in id set")
    return arr


@dataclass
class FeatureDataset:
    """Immutable feature matrix with labels and stable point ids.

    `point_ids` must be strictly increasing; all row-index based helpers
    rely on it so that "ties broken by ascending id" coincides with
    first-occurrence tie breaking in the kernels.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    point_ids: np.ndarray
    _hidden: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValidationError("features must be a 2-d matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.point_ids.shape != (n,):
            raise ValidationError(
                f"row mismatch: {n} feature rows, {self.labels.shape[0]} labels, "
                f"{self.point_ids.shape[0]} point ids"
            )
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("label outside [0, num_classes)")
        if np.unique(self.point_ids).size != n:
            raise ValidationError("duplicate point_ids")
        if not np.all(np.diff(self.point_ids) > 0):
            raise ValidationError("point_ids must be sorted ascending")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("non-finite feature values")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)
        self.point_ids.setflags(write=False)

    @property
    def n_points(self) -> int:
        return self.features.shape[0]

    @property
    def n_dims(self) -> int:
        return self.features.shape[1]

    def rows_for(self, ids: np.ndarray) -> np.ndarray:
        """Row indices of the given point ids (ids must exist)."""
        ids = np.asarray(ids, dtype=np.int64)
        rows = np.searchsorted(self.point_ids, ids)
        bad = (rows >= self.n_points) | (self.point_ids[np.minimum(rows, self.n_points - 1)] != ids)
        if np.any(bad):
            missing = ids[bad][:5].tolist()
            raise ValidationError(f"unknown point ids: {missing}")
        return rows

    def hide_labels(self, ids: np.ndarray) -> None:
        """Flag labels as hidden; reading them via labels_for then raises."""
        if self._hidden is None:
            self._hidden = np.zeros(self.n_points, dtype=bool)
        self._hidden[self.rows_for(ids)] = True

    def unhide_labels(self, ids: np.ndarray) -> None:
        if self._hidden is not None:
            self._hidden[self.rows_for(ids)] = False

    def labels_for(self, ids: np.ndarray, *, bypass_hidden: bool = False) -> np.ndarray:
        rows = self.rows_for(ids)
        if not bypass_hidden and self._hidden is not None and np.any(self._hidden[rows]):
            raise ValidationError("attempted to read hidden labels outside reveal_labels")
        return self.labels[rows]

    def features_for(self, ids: np.ndarray) -> np.ndarray:
        return self.features[self.rows_for(ids)]


@dataclass
class SplitAssignment:
    """Pairwise-disjoint labeled / unlabeled / validation / test id sets."""

    labeled: np.ndarray
    unlabeled: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def __post_init__(self) -> None:
        for name in SPLIT_NAMES:
            setattr(self, name, _as_id_array(getattr(self, name)))
        self.check_disjoint()

    def check_disjoint(self) -> None:
        combined = np.concatenate([getattr(self, n) for n in SPLIT_NAMES])
        if combined.size != np.unique(combined).size:
            raise ValidationError("splits are not pairwise disjoint")

    def all_ids(self) -> np.ndarray:
        return np.sort(np.concatenate([getattr(self, n) for n in SPLIT_NAMES]))

    def reveal(self, ids: np.ndarray) -> None:
        """Move ids from the unlabeled pool into the labeled set."""
        ids = _as_id_array(ids)
        if ids.size and not np.all(np.isin(ids, self.unlabeled)):
            raise ValidationError("reveal target ids not in the unlabeled pool")
        self.unlabeled = np.setdiff1d(self.unlabeled, ids)
        self.labeled = np.union1d(self.labeled, ids)
        self.check_disjoint()


def reveal_labels(dataset: FeatureDataset, splits: SplitAssignment, ids: Iterable[int]) -> dict[int, int]:
    """Return true labels for pool ids. The caller moves them via splits.reveal.

    Also clears the hidden flag for the revealed ids.
    """
    ids = _as_id_array(ids)
    if ids.size and not np.all(np.isin(ids, splits.unlabeled)):
        raise ValidationError("can only reveal labels of unlabeled points")
    if ids.size == 0:
        return {}
    labels = dataset.labels_for(ids, bypass_hidden=True)
    dataset.unhide_labels(ids)
    return {int(i): int(y) for i, y in zip(ids, labels)}


# ---------------------------------------------------------------------------
# Manifest + blob I/O
# ---------------------------------------------------------------------------

def save_dataset(
    dataset: FeatureDataset,
    splits: SplitAssignment,
    manifest_path: str | Path,
    blob_name: str | None = None,
) -> None:
    manifest_path = Path(manifest_path)
    if blob_name is None:
        blob_name = manifest_path.stem + ".features.f32"
    blob = np.ascontiguousarray(dataset.features, dtype="<f4")
    (manifest_path.parent / blob_name).write_bytes(blob.tobytes())
    manifest = {
        "format_version": MANIFEST_VERSION,
        "feature_blob": blob_name,
        "n_points": dataset.n_points,
        "n_dims": dataset.n_dims,
        "num_classes": dataset.num_classes,
        "point_ids": dataset.point_ids.tolist(),
        "labels": dataset.labels.tolist(),
        "splits": {name: getattr(splits, name).tolist() for name in SPLIT_NAMES},
    }
    manifest_path.write_text(json.dumps(manifest))


def load_dataset(manifest_path: str | Path) -> tuple[FeatureDataset, SplitAssignment]:
    """Load and validate a manifest + feature blob pair.

    Labels of unlabeled points are loaded but flagged hidden; use
    `reveal_labels` to read them.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FormatError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError("manifest root must be an object")

    required = {"format_version", "feature_blob", "n_points", "n_dims",
                "num_classes", "labels", "splits"}
    missing = required - manifest.keys()
    if missing:
        raise FormatError(f"manifest missing fields: {sorted(missing)}")
    if manifest["format_version"] != MANIFEST_VERSION:
        raise FormatError(
            f"unsupported format_version {manifest['format_version']!r}, expected {MANIFEST_VERSION}"
        )

    n = int(manifest["n_points"])
    d = int(manifest["n_dims"])
    blob_path = manifest_path.parent / manifest["feature_blob"]
    if not blob_path.exists():
        raise FormatError(f"feature blob not found: {blob_path}")
    raw = blob_path.read_bytes()
    expected_bytes = n * d * 4
    if len(raw) != expected_bytes:
        raise FormatError(
            f"feature blob holds {len(raw)} bytes, manifest shape ({n}, {d}) needs {expected_bytes}"
        )
    features = np.frombuffer(raw, dtype="<f4").reshape(n, d)

    point_ids = manifest.get("point_ids", list(range(n)))
    dataset = FeatureDataset(
        features=features,
        labels=np.asarray(manifest["labels"]),
        num_classes=int(manifest["num_classes"]),
        point_ids=np.asarray(point_ids),
    )

    split_doc = manifest["splits"]
    unknown = set(split_doc) - set(SPLIT_NAMES)
    if unknown:
        raise FormatError(f"unknown split names in manifest: {sorted(unknown)}")
    splits = SplitAssignment(**{name: split_doc.get(name, []) for name in SPLIT_NAMES})
    union = splits.all_ids()
    if union.size and not np.all(np.isin(union, dataset.point_ids)):
        raise ValidationError("split ids reference unknown points")
    dataset.hide_labels(splits.unlabeled)
    return dataset, splits


# ---------------------------------------------------------------------------
# Scenario generation
# ---------------------------------------------------------------------------

@dataclass
class ScenarioSpec:
    """Declarative description of a synthetic pool construction."""

    kind: str
    parameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ValidationError(f"unknown scenario kind {self.kind!r}, expected one of {SCENARIO_KINDS}")
        defaults = dict(_SCENARIO_DEFAULTS[self.kind])
        unknown = set(self.parameters) - set(defaults)
        if unknown:
            raise ValidationError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        defaults.update(self.parameters)
        self.parameters = defaults
        p = self.parameters
        for key in ("corruption_fraction", "mix_ratio"):
            if key in p and not 0.0 <= p[key] <= 1.0:
                raise ValidationError(f"{key} must lie in [0, 1], got {p[key]}")
        for key in ("beta_a", "beta_b"):
            if key in p and p[key] <= 0.0:
                raise ValidationError(f"{key} must be positive, got {p[key]}")


@dataclass
class SplitSizes:
    labeled: int
    unlabeled: int
    validation: int
    test: int

    def __post_init__(self) -> None:
        for name in SPLIT_NAMES:
            if getattr(self, name) < 1:
                raise ValidationError(f"split size {name} must be >= 1")

    @property
    def total(self) -> int:
        return self.labeled + self.unlabeled + self.validation + self.test


@dataclass
class ScenarioResult:
    dataset: FeatureDataset
    splits: SplitAssignment
    extras: dict[str, np.ndarray]


_BASE_DEFAULTS = {
    "n_dims": 8,
    "num_classes": 2,
    "class_sep": 6.0,
    "class_std": 1.0,
    "layout": "axes",
}

_SCENARIO_DEFAULTS: dict[str, dict] = {
    "identity": dict(_BASE_DEFAULTS),
    "gaussian-mixture-minority": dict(
        _BASE_DEFAULTS,
        n_dims=2,
        minority_weight=0.1,
        minority_offset=(0.0, -0.35),
        minority_std=0.4,
        minority_in_labeled=True,
        minority_in_eval=False,
    ),
    "label-noise": dict(_BASE_DEFAULTS, corruption_fraction=0.2),
    "white-noise-beta": dict(
        _BASE_DEFAULTS,
        corruption_fraction=0.8,
        beta_a=1.0,
        beta_b=3.0,
        max_power=1.0,
    ),
    "domain-shift-mix": dict(
        _BASE_DEFAULTS,
        mix_ratio=0.5,
        shift_magnitude=2.0,
    ),
}


def _class_counts(n: int, num_classes: int) -> np.ndarray:
    """Deterministic near-equal class allocation: remainders go to low classes."""
    base = n // num_classes
    counts = np.full(num_classes, base, dtype=np.int64)
    counts[: n % num_classes] += 1
    return counts


def _class_means(num_classes: int, n_dims: int, class_sep: float, layout: str = "axes") -> np.ndarray:
    """Class centers: sparse axis placement, or a dense 2-d grid with `sep`
    spacing (compact layouts make displaced points land on foreign classes)."""
    means = np.zeros((num_classes, n_dims))
    if layout == "grid":
        if n_dims < 2:
            raise ValidationError("grid layout needs n_dims >= 2")
        side = int(np.ceil(np.sqrt(num_classes)))
        for c in range(num_classes):
            row, col = divmod(c, side)
            means[c, 0] = class_sep * (col - (side - 1) / 2.0)
            means[c, 1] = class_sep * (row - (side - 1) / 2.0)
        return means
    if layout == "ring":
        # every class has the same local geometry, so no class is
        # systematically easier than another
        if n_dims < 2:
            raise ValidationError("ring layout needs n_dims >= 2")
        radius = class_sep / (2.0 * np.sin(np.pi / num_classes)) if num_classes > 1 else 0.0
        angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
        return means
    if layout != "axes":
        raise ValidationError(f"unknown layout {layout!r}, expected 'axes', 'grid', or 'ring'")
    for c in range(num_classes):
        axis = c % n_dims
        ring = c // n_dims
        means[c, axis] = class_sep * (1.0 + ring)
        if ring % 2 == 1:
            means[c, axis] *= -1.0
    return means


def _gaussian_split(rng: np.random.Generator, n: int, means: np.ndarray, std: float) -> tuple[np.ndarray, np.ndarray]:
    counts = _class_counts(n, means.shape[0])
    labels = np.repeat(np.arange(means.shape[0]), counts)
    feats = means[labels] + std * rng.standard_normal((n, means.shape[1]))
    return feats.astype(np.float32), labels


def _assemble(
    rng: np.random.Generator,
    parts_feats: list[np.ndarray],
    parts_labels: list[np.ndarray],
    parts_flags: list[dict[str, np.ndarray]],
    sizes: SplitSizes,
    num_classes: int,
) -> tuple[FeatureDataset, SplitAssignment, dict[str, np.ndarray]]:
    """Shuffle each split (ids must not encode class or corruption order),
    concatenate, assign sequential ids, map row flags to id arrays."""
    shuffled_f, shuffled_y = [], []
    extras: dict[str, list[np.ndarray]] = {}
    offset = 0
    for feats, labels, flags in zip(parts_feats, parts_labels, parts_flags):
        perm = rng.permutation(feats.shape[0])
        shuffled_f.append(feats[perm])
        shuffled_y.append(labels[perm])
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        for name, mask in flags.items():
            extras.setdefault(name, []).append(offset + np.sort(inverse[mask]))
        offset += feats.shape[0]

    features = np.concatenate(shuffled_f, axis=0)
    labels = np.concatenate(shuffled_y)
    n = features.shape[0]
    ids = np.arange(n, dtype=np.int64)
    bounds = np.cumsum([0, sizes.labeled, sizes.unlabeled, sizes.validation, sizes.test])
    splits = SplitAssignment(
        labeled=ids[bounds[0]:bounds[1]],
        unlabeled=ids[bounds[1]:bounds[2]],
        validation=ids[bounds[2]:bounds[3]],
        test=ids[bounds[3]:bounds[4]],
    )
    dataset = FeatureDataset(features=features, labels=labels, num_classes=num_classes, point_ids=ids)
    merged = {name: np.concatenate(chunks).astype(np.int64) for name, chunks in extras.items()}
    return dataset, splits, merged


def generate_scenario(spec: ScenarioSpec, sizes: SplitSizes) -> ScenarioResult:
    """Generate a synthetic dataset per the scenario spec; bit-reproducible per seed.

    The base (clean) draw and the corruption draws use independent child
    streams of the seed, so corrupted scenarios share their base features
    with the identity scenario at the same seed and sizes.
    """
    base_rng, corrupt_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2)]
    p = spec.parameters
    num_classes = int(p["num_classes"])
    means = _class_means(num_classes, int(p["n_dims"]), float(p["class_sep"]), str(p["layout"]))
    std = float(p["class_std"])

    if spec.kind == "gaussian-mixture-minority":
        return _generate_minority(spec, sizes, base_rng, means, std)

    parts_f, parts_y = [], []
    for n in (sizes.labeled, sizes.unlabeled, sizes.validation, sizes.test):
        f, y = _gaussian_split(base_rng, n, means, std)
        parts_f.append(f)
        parts_y.append(y)
    parts_flags: list[dict[str, np.ndarray]] = [{} for _ in range(4)]
    loose_extras: dict[str, np.ndarray] = {}

    pool_f, pool_y = parts_f[1], parts_y[1]
    n_pool = sizes.unlabeled

    if spec.kind == "label-noise":
        n_noisy = int(round(p["corruption_fraction"] * n_pool))
        noisy = np.sort(corrupt_rng.choice(n_pool, size=n_noisy, replace=False))
        pool_y = pool_y.copy()
        pool_y[noisy] = corrupt_rng.integers(0, num_classes, size=n_noisy)
        parts_y[1] = pool_y
        mask = np.zeros(n_pool, dtype=bool)
        mask[noisy] = True
        parts_flags[1]["noisy_ids"] = mask

    elif spec.kind == "white-noise-beta":
        n_corrupt = int(round(p["corruption_fraction"] * n_pool))
        corrupt = np.sort(corrupt_rng.choice(n_pool, size=n_corrupt, replace=False))
        amplitudes = p["max_power"] * corrupt_rng.beta(p["beta_a"], p["beta_b"], size=n_corrupt)
        noise = corrupt_rng.standard_normal((n_corrupt, pool_f.shape[1]))
        pool_f = pool_f.copy()
        pool_f[corrupt] += (amplitudes[:, None] * noise).astype(np.float32)
        parts_f[1] = pool_f
        mask = np.zeros(n_pool, dtype=bool)
        mask[corrupt] = True
        parts_flags[1]["corrupted_ids"] = mask
        loose_extras["noise_amplitudes"] = amplitudes  # draw order, not id-aligned

    elif spec.kind == "domain-shift-mix":
        n_shift = int(round(p["mix_ratio"] * n_pool))
        shifted = np.sort(corrupt_rng.choice(n_pool, size=n_shift, replace=False))
        # Shifted clusters sit off the class manifold along an unused direction
        # (or the negative first axis in 1-d), keeping their class labels.
        shift_vec = np.zeros(pool_f.shape[1])
        if pool_f.shape[1] > 1:
            shift_vec[-1] = p["shift_magnitude"] * p["class_sep"]
        else:
            shift_vec[0] = -p["shift_magnitude"] * p["class_sep"]
        pool_f = pool_f.copy()
        pool_f[shifted] = (
            means[pool_y[shifted]] + shift_vec
            + std * corrupt_rng.standard_normal((n_shift, pool_f.shape[1]))
        ).astype(np.float32)
        parts_f[1] = pool_f
        mask = np.zeros(n_pool, dtype=bool)
        mask[shifted] = True
        parts_flags[1]["shifted_ids"] = mask

    dataset, splits, extras = _assemble(base_rng, parts_f, parts_y, parts_flags, sizes, num_classes)
    extras.update(loose_extras)
    return ScenarioResult(dataset, splits, extras)


def _generate_minority(
    spec: ScenarioSpec,
    sizes: SplitSizes,
    rng: np.random.Generator,
    means: np.ndarray,
    std: float,
) -> ScenarioResult:
    """Class 1 is a two-component mixture: a majority cluster plus a small,
    tight minority cluster displaced across the decision boundary into
    class 0 territory."""
    p = spec.parameters
    num_classes = int(p["num_classes"])
    offset = np.asarray(p["minority_offset"], dtype=float)
    if offset.shape != (means.shape[1],):
        raise ValidationError(
            f"minority_offset must have {means.shape[1]} components, got {offset.shape}"
        )
    minority_mean = means[0] + offset * float(p["class_sep"])
    minority_std = float(p["minority_std"])
    weight = float(p["minority_weight"])
    if not 0.0 < weight < 1.0:
        raise ValidationError(f"minority_weight must lie in (0, 1), got {weight}")

    parts_f, parts_y, parts_flags = [], [], []
    split_sizes = (sizes.labeled, sizes.unlabeled, sizes.validation, sizes.test)
    in_eval = bool(p["minority_in_eval"])
    in_labeled = bool(p["minority_in_labeled"])
    for split_idx, n in enumerate(split_sizes):
        counts = _class_counts(n, num_classes)
        if split_idx == 0:
            with_minority = in_labeled  # a curated initial pool can exclude it
        elif split_idx == 1:
            with_minority = True  # the raw pool always carries it
        else:
            with_minority = in_eval
        n_minority = int(round(weight * counts[1])) if with_minority else 0
        feats, labels, minor = [], [], []
        for c in range(num_classes):
            n_major = counts[c] - (n_minority if c == 1 else 0)
            feats.append(means[c] + std * rng.standard_normal((n_major, means.shape[1])))
            labels.append(np.full(n_major, c, dtype=np.int64))
            minor.append(np.zeros(n_major, dtype=bool))
            if c == 1 and n_minority:
                feats.append(minority_mean + minority_std * rng.standard_normal((n_minority, means.shape[1])))
                labels.append(np.ones(n_minority, dtype=np.int64))
                minor.append(np.ones(n_minority, dtype=bool))
        parts_f.append(np.concatenate(feats, axis=0).astype(np.float32))
        parts_y.append(np.concatenate(labels))
        parts_flags.append({"minority_ids": np.concatenate(minor)})

    dataset, splits, extras = _assemble(rng, parts_f, parts_y, parts_flags, sizes, num_classes)
    return ScenarioResult(dataset, splits, extras)
