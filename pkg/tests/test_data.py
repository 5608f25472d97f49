"""Dataset containers, manifest I/O, and scenario generators."""

import json

import numpy as np
import pytest

from shapley_select.data import (
    FeatureDataset,
    ScenarioSpec,
    SplitAssignment,
    SplitSizes,
    generate_scenario,
    load_dataset,
    reveal_labels,
    save_dataset,
)
from shapley_select.errors import FormatError, ValidationError


def small_scenario(kind="identity", params=None, seed=3, sizes=(10, 10, 5, 5)):
    return generate_scenario(ScenarioSpec(kind, params or {}, seed=seed), SplitSizes(*sizes))


class TestFeatureDataset:
    def test_row_count_mismatch(self):
        with pytest.raises(ValidationError):
            FeatureDataset(np.zeros((3, 2)), np.zeros(2, dtype=int), 2, np.arange(3))

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            FeatureDataset(np.zeros((2, 2)), np.array([0, 5]), 3, np.arange(2))

    def test_duplicate_ids(self):
        with pytest.raises(ValidationError):
            FeatureDataset(np.zeros((2, 2)), np.array([0, 1]), 2, np.array([4, 4]))

    def test_nan_features(self):
        bad = np.array([[0.0, np.nan]], dtype=np.float32)
        with pytest.raises(ValidationError):
            FeatureDataset(np.vstack([bad, bad + 1]), np.array([0, 1]), 2, np.arange(2))

    def test_features_are_immutable(self):
        ds = small_scenario().dataset
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0


class TestSplits:
    def test_disjointness_enforced(self):
        with pytest.raises(ValidationError):
            SplitAssignment(labeled=[0, 1], unlabeled=[1, 2], validation=[3], test=[4])

    def test_reveal_moves_ids(self):
        splits = SplitAssignment(labeled=[0], unlabeled=[1, 2, 3], validation=[4], test=[5])
        splits.reveal(np.array([2]))
        assert 2 in splits.labeled and 2 not in splits.unlabeled
        splits.check_disjoint()

    def test_reveal_rejects_non_pool_ids(self):
        splits = SplitAssignment(labeled=[0], unlabeled=[1], validation=[2], test=[3])
        with pytest.raises(ValidationError):
            splits.reveal(np.array([0]))


class TestManifestIO:
    def test_roundtrip(self, tmp_path):
        result = small_scenario()
        path = tmp_path / "ds.json"
        save_dataset(result.dataset, result.splits, path)
        ds, splits = load_dataset(path)
        np.testing.assert_array_equal(ds.features, result.dataset.features)
        np.testing.assert_array_equal(ds.labels, result.dataset.labels)
        np.testing.assert_array_equal(splits.unlabeled, result.splits.unlabeled)

    def test_blob_shape_mismatch_is_format_error(self, tmp_path):
        result = small_scenario()
        path = tmp_path / "ds.json"
        save_dataset(result.dataset, result.splits, path)
        manifest = json.loads(path.read_text())
        manifest["n_dims"] = manifest["n_dims"] + 1
        path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_label_out_of_range_is_validation_error(self, tmp_path):
        result = small_scenario()
        path = tmp_path / "ds.json"
        save_dataset(result.dataset, result.splits, path)
        manifest = json.loads(path.read_text())
        manifest["labels"][0] = manifest["num_classes"] + 2
        path.write_text(json.dumps(manifest))
        with pytest.raises(ValidationError):
            load_dataset(path)

    def test_bad_json_is_format_error(self, tmp_path):
        path = tmp_path / "ds.json"
        path.write_text("{not json")
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_unknown_version_rejected(self, tmp_path):
        result = small_scenario()
        path = tmp_path / "ds.json"
        save_dataset(result.dataset, result.splits, path)
        manifest = json.loads(path.read_text())
        manifest["format_version"] = 99
        path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_loaded_pool_labels_are_hidden(self, tmp_path):
        result = small_scenario()
        path = tmp_path / "ds.json"
        save_dataset(result.dataset, result.splits, path)
        ds, splits = load_dataset(path)
        with pytest.raises(ValidationError):
            ds.labels_for(splits.unlabeled[:1])
        labels = reveal_labels(ds, splits, splits.unlabeled[:1])
        assert len(labels) == 1


class TestRevealLabels:
    def test_reveal_returns_ground_truth(self):
        result = small_scenario()
        ids = result.splits.unlabeled[:2]
        revealed = reveal_labels(result.dataset, result.splits, ids)
        truth = result.dataset.labels_for(ids, bypass_hidden=True)
        assert [revealed[int(i)] for i in ids] == truth.tolist()

    def test_reveal_labeled_id_fails(self):
        result = small_scenario()
        with pytest.raises(ValidationError):
            reveal_labels(result.dataset, result.splits, result.splits.labeled[:1])

    def test_reveal_empty_is_empty(self):
        result = small_scenario()
        assert reveal_labels(result.dataset, result.splits, []) == {}

    def test_disjointness_preserved_after_reveal(self):
        result = small_scenario()
        ids = result.splits.unlabeled[:3]
        reveal_labels(result.dataset, result.splits, ids)
        result.splits.reveal(ids)
        result.splits.check_disjoint()


class TestScenarios:
    def test_identity_sizes_and_disjointness(self):
        result = small_scenario(sizes=(10, 10, 5, 5))
        assert result.dataset.n_points == 30
        result.splits.check_disjoint()
        assert result.splits.all_ids().size == 30

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioSpec("made-up-kind")

    def test_unknown_parameter_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioSpec("identity", {"not_a_param": 1})

    def test_parameter_ranges(self):
        with pytest.raises(ValidationError):
            ScenarioSpec("white-noise-beta", {"corruption_fraction": 1.5})
        with pytest.raises(ValidationError):
            ScenarioSpec("white-noise-beta", {"beta_a": 0.0})
        with pytest.raises(ValidationError):
            ScenarioSpec("domain-shift-mix", {"mix_ratio": -0.1})

    def test_bit_reproducible(self):
        a = small_scenario("white-noise-beta", seed=11, sizes=(8, 40, 6, 6))
        b = small_scenario("white-noise-beta", seed=11, sizes=(8, 40, 6, 6))
        assert a.dataset.features.tobytes() == b.dataset.features.tobytes()
        assert a.dataset.labels.tobytes() == b.dataset.labels.tobytes()
        np.testing.assert_array_equal(a.extras["corrupted_ids"], b.extras["corrupted_ids"])

    def test_white_noise_corrupts_exact_pool_fraction(self):
        sizes = (8, 50, 6, 6)
        clean = small_scenario("identity", {"n_dims": 4}, seed=5, sizes=sizes)
        noisy = small_scenario(
            "white-noise-beta", {"n_dims": 4, "corruption_fraction": 0.8}, seed=5, sizes=sizes
        )
        differing = np.flatnonzero(
            np.any(clean.dataset.features != noisy.dataset.features, axis=1)
        )
        assert differing.size == round(0.8 * 50)
        np.testing.assert_array_equal(np.sort(noisy.extras["corrupted_ids"]), differing)
        pool = noisy.splits.unlabeled
        assert np.all(np.isin(noisy.extras["corrupted_ids"], pool))

    def test_minority_counts_match_allocation(self):
        sizes = (40, 100, 20, 20)
        result = small_scenario("gaussian-mixture-minority", {"minority_weight": 0.1}, seed=2, sizes=sizes)
        minority = result.extras["minority_ids"]
        # labeled: class 1 gets 20 points -> 2 minority; pool: 50 -> 5
        in_labeled = np.isin(minority, result.splits.labeled).sum()
        in_pool = np.isin(minority, result.splits.unlabeled).sum()
        assert in_labeled == round(0.1 * 20)
        assert in_pool == round(0.1 * 50)
        # minority stays out of validation/test by default
        assert not np.any(np.isin(minority, result.splits.validation))
        assert not np.any(np.isin(minority, result.splits.test))

    def test_minority_labels_are_class_one(self):
        result = small_scenario("gaussian-mixture-minority", seed=2, sizes=(40, 100, 20, 20))
        labels = result.dataset.labels_for(result.extras["minority_ids"], bypass_hidden=True)
        assert np.all(labels == 1)

    def test_label_noise_touches_pool_only(self):
        sizes = (10, 40, 8, 8)
        clean = small_scenario("identity", seed=9, sizes=sizes)
        noisy = small_scenario("label-noise", {"corruption_fraction": 0.5}, seed=9, sizes=sizes)
        assert noisy.extras["noisy_ids"].size == 20
        assert np.all(np.isin(noisy.extras["noisy_ids"], noisy.splits.unlabeled))
        same = np.setdiff1d(noisy.dataset.point_ids, noisy.extras["noisy_ids"])
        np.testing.assert_array_equal(
            clean.dataset.labels[same], noisy.dataset.labels[same]
        )

    def test_domain_shift_moves_pool_points(self):
        sizes = (10, 40, 8, 8)
        result = small_scenario("domain-shift-mix", {"mix_ratio": 0.25}, seed=4, sizes=sizes)
        assert result.extras["shifted_ids"].size == 10
        assert np.all(np.isin(result.extras["shifted_ids"], result.splits.unlabeled))

    def test_ring_layout_symmetric(self):
        result = small_scenario(
            "identity", {"layout": "ring", "n_dims": 2, "num_classes": 6}, sizes=(60, 30, 12, 12)
        )
        feats = result.dataset.features
        labels = result.dataset.labels
        centers = np.array([feats[labels == c].mean(axis=0) for c in range(6)])
        radii = np.linalg.norm(centers, axis=1)
        assert radii.std() < radii.mean() * 0.2


def test_beta_amplitude_distribution():
    """Amplitudes lie in [0, max_power]; mean within 3 SE of a*mp/(a+b)."""
    a, b, mp = 1.0, 3.0, 2.0
    result = generate_scenario(
        ScenarioSpec("white-noise-beta",
                     {"corruption_fraction": 1.0, "beta_a": a, "beta_b": b, "max_power": mp},
                     seed=17),
        SplitSizes(2, 12_000, 2, 2),
    )
    amps = result.extras["noise_amplitudes"]
    assert amps.size == 12_000
    assert amps.min() >= 0.0 and amps.max() <= mp
    expected = mp * a / (a + b)
    se = amps.std(ddof=1) / np.sqrt(amps.size)
    assert abs(amps.mean() - expected) < 3 * se
