"""Loaders, scaling, splitting, schema rules, and synthetic generation."""

import struct

import numpy as np
import pytest

from fewfool.data import (DataError, Dataset, Feature, FeatureSchema, Scaler,
                          SplitSpec, apply_scaler, load_idx_images,
                          load_tabular, scale_minmax, split, synth_tabular)
from fewfool.targets import train_target


def kdd_like_schema() -> FeatureSchema:
    # 41 features: 9 symbolic (frozen), 32 continuous (mutable)
    feats = []
    for i in range(41):
        if i < 9:
            feats.append(Feature(f"sym{i}", "symbolic", False))
        else:
            feats.append(Feature(f"cont{i}", "continuous", True))
    return FeatureSchema(tuple(feats))


class TestSchema:
    def test_symbolic_features_are_never_mutable(self):
        with pytest.raises(DataError):
            Feature("proto", "symbolic", True)

    def test_kdd_like_mutable_count(self):
        schema = kdd_like_schema()
        assert schema.mutable_count == 32
        assert schema.frozen_indices.size == 9

    def test_attackable_guard(self):
        schema = FeatureSchema((Feature("a", "continuous", False),))
        with pytest.raises(DataError):
            schema.require_attackable()


class TestLoadTabular:
    def test_three_rows(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("0.1,0.2,yes\n0.3,0.4,no\n0.5,0.6,yes\n")
        ds = load_tabular(path, FeatureSchema.all_continuous(2))
        assert len(ds) == 3
        assert ds.n_classes == 2

    def test_arity_violation_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0.1,0.2,a\n0.3,b\n")
        with pytest.raises(DataError, match=":2"):
            load_tabular(path, FeatureSchema.all_continuous(2))

    def test_unknown_label_rejected(self, tmp_path):
        path = tmp_path / "u.csv"
        path.write_text("0.1,0.2,yes\n0.3,0.4,maybe\n")
        with pytest.raises(DataError, match="unknown label 'maybe'"):
            load_tabular(path, FeatureSchema.all_continuous(2),
                         labels=("yes", "no"))

    def test_declared_labels_fix_class_order(self, tmp_path):
        path = tmp_path / "l.csv"
        path.write_text("0.1,0.2,ok\n0.3,0.4,ok\n")
        ds = load_tabular(path, FeatureSchema.all_continuous(2),
                          labels=("atk", "ok"))
        assert ds.n_classes == 2
        np.testing.assert_array_equal(ds.y, [1, 1])

    def test_symbolic_label_encoding_is_deterministic(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("tcp,0.5,atk\nudp,0.2,ok\nicmp,0.9,atk\n")
        schema = FeatureSchema((Feature("proto", "symbolic", False),
                                Feature("x", "continuous", True)))
        ds = load_tabular(path, schema)
        # sorted order: icmp=0, tcp=1, udp=2
        np.testing.assert_array_equal(ds.X[:, 0], [1.0, 2.0, 0.0])

    def test_kdd_style_file(self, tmp_path):
        schema = kdd_like_schema()
        rng = np.random.default_rng(0)
        lines = []
        for i in range(10):
            symbolic = [f"v{rng.integers(0, 3)}" for _ in range(9)]
            continuous = [f"{v:.3f}" for v in rng.uniform(0, 100, size=32)]
            lines.append(",".join(symbolic + continuous + ["normal" if i % 2 else "attack"]))
        path = tmp_path / "kdd.csv"
        path.write_text("\n".join(lines) + "\n")
        ds = load_tabular(path, schema)
        assert ds.schema.mutable_count == 32
        assert len(ds) == 10


def write_idx_pair(tmp_path, images: np.ndarray, labels: np.ndarray):
    n, rows, cols = images.shape
    img_path = tmp_path / "imgs.idx"
    lbl_path = tmp_path / "lbls.idx"
    img_path.write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols)
                         + images.astype(np.uint8).tobytes())
    lbl_path.write_bytes(struct.pack(">II", 0x00000801, n)
                         + labels.astype(np.uint8).tobytes())
    return img_path, lbl_path


class TestLoadIdx:
    def test_28x28_gives_784_features(self, tmp_path):
        images = np.zeros((3, 28, 28), dtype=np.uint8)
        labels = np.array([0, 1, 2], dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, labels)
        ds = load_idx_images(img, lbl)
        assert ds.schema.dimension == 784
        assert len(ds) == 3

    def test_all_zero_image_maps_to_zeros(self, tmp_path):
        images = np.zeros((1, 4, 4), dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, np.array([0]))
        ds = load_idx_images(img, lbl)
        np.testing.assert_array_equal(ds.X[0], np.zeros(16))

    def test_pixel_255_maps_to_one(self, tmp_path):
        images = np.full((1, 2, 2), 255, dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, np.array([1]))
        ds = load_idx_images(img, lbl)
        np.testing.assert_array_equal(ds.X[0], np.ones(4))

    def test_bad_magic_rejected(self, tmp_path):
        img = tmp_path / "bad.idx"
        img.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 2, 2) + bytes(4))
        lbl = tmp_path / "l.idx"
        lbl.write_bytes(struct.pack(">II", 0x00000801, 1) + bytes(1))
        with pytest.raises(DataError, match="magic"):
            load_idx_images(img, lbl)


class TestScaling:
    def test_midpoint(self):
        scaler = Scaler(np.array([0.0]), np.array([10.0]))
        np.testing.assert_array_equal(scaler.transform(np.array([[5.0]])), [[0.5]])

    def test_constant_feature_maps_to_zero(self):
        ds = Dataset(np.array([[3.0], [3.0]]), np.array([0, 1]),
                     FeatureSchema.all_continuous(1), n_classes=2)
        scaled = scale_minmax(ds)
        np.testing.assert_array_equal(scaled.X, [[0.0], [0.0]])

    def test_test_values_above_train_max_clamp(self):
        train = Dataset(np.array([[0.0], [10.0]]), np.array([0, 1]),
                        FeatureSchema.all_continuous(1), n_classes=2)
        train = scale_minmax(train)
        test = Dataset(np.array([[20.0]]), np.array([0]),
                       FeatureSchema.all_continuous(1), n_classes=2)
        test = apply_scaler(test, train.scaler)
        np.testing.assert_array_equal(test.X, [[1.0]])

    def test_every_feature_in_unit_interval_after_scaling(self):
        rng = np.random.default_rng(3)
        ds = Dataset(rng.normal(50, 30, size=(200, 6)), rng.integers(0, 2, 200),
                     FeatureSchema.all_continuous(6), n_classes=2)
        scaled = scale_minmax(ds)
        assert scaled.X.min() >= 0.0 and scaled.X.max() <= 1.0


class TestSplit:
    def test_80_20(self):
        ds = Dataset(np.random.default_rng(0).uniform(size=(100, 3)),
                     np.arange(100) % 2, FeatureSchema.all_continuous(3), 2)
        train, test = split(ds, SplitSpec(0.8, seed=1, stratified=False))
        assert len(train) == 80 and len(test) == 20

    def test_same_seed_identical(self):
        ds = Dataset(np.random.default_rng(0).uniform(size=(50, 2)),
                     np.arange(50) % 2, FeatureSchema.all_continuous(2), 2)
        a1, b1 = split(ds, SplitSpec(0.8, seed=5))
        a2, b2 = split(ds, SplitSpec(0.8, seed=5))
        np.testing.assert_array_equal(a1.X, a2.X)
        np.testing.assert_array_equal(b1.y, b2.y)

    def test_stratified_balance_within_one(self):
        # Counting oracle: each class contributes round(0.8 * 50) = 40.
        ds = Dataset(np.random.default_rng(0).uniform(size=(100, 2)),
                     np.repeat([0, 1], 50), FeatureSchema.all_continuous(2), 2)
        train, test = split(ds, SplitSpec(0.8, seed=2, stratified=True))
        for label in (0, 1):
            assert abs(int((train.y == label).sum()) - 40) <= 1
            assert abs(int((test.y == label).sum()) - 10) <= 1

    def test_partition_property(self):
        ds = Dataset(np.random.default_rng(1).uniform(size=(37, 2)),
                     np.arange(37) % 3, FeatureSchema.all_continuous(2), 3)
        train, test = split(ds, SplitSpec(0.7, seed=3))
        assert len(train) + len(test) == 37
        combined = np.vstack([train.X, test.X])
        assert {tuple(r) for r in combined} == {tuple(r) for r in ds.X}

    def test_bad_fraction_rejected(self):
        with pytest.raises(DataError):
            SplitSpec(1.5, seed=0)


class TestSynthetic:
    def test_margin_zero_is_chance_level(self):
        # Chance-level oracle over seeds: accuracy should hover around 0.5.
        accs = []
        for seed in range(5):
            full = synth_tabular(n=1000, d=8, mutable_count=8, margin=0.0, seed=seed)
            train, test = split(full, SplitSpec(0.8, seed=seed))
            model, report = train_target("logistic", train,
                                         {"seed": seed, "epochs": 20}, test=test)
            accs.append(report.test_accuracy)
        assert abs(float(np.mean(accs)) - 0.5) < 0.05

    def test_same_seed_identical_dataset(self):
        a = synth_tabular(n=100, d=6, mutable_count=4, margin=2.0, seed=9)
        b = synth_tabular(n=100, d=6, mutable_count=4, margin=2.0, seed=9)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)

    def test_mutable_count_respected(self):
        ds = synth_tabular(n=50, d=10, mutable_count=6, margin=1.0, seed=1)
        assert ds.schema.mutable_count == 6
        assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0

    def test_margin_four_is_separable(self, reference):
        # The reference MLP doubles as the separability check.
        assert reference.mlp_report.test_accuracy >= 0.95
