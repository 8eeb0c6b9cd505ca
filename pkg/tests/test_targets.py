"""Target classifiers: training, the probability surface, detection rate, CART."""

import numpy as np
import pytest

from fewfool.data import Dataset, FeatureSchema
from fewfool.numerics import Tensor, cross_entropy_logits, grad_check
from fewfool.seeding import substream
from fewfool.targets import (TargetError, TreeTarget,
                             accuracy, detection_rate, load_target, predict,
                             predict_proba, save_target, train_target)


def separable_dataset(seed=0, n=200):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 2))
    y = (X[:, 0] > 0.5).astype(np.int64)
    return Dataset(X, y, FeatureSchema.all_continuous(2), n_classes=2)


class TestTrainTarget:
    def test_logistic_on_separable_data(self):
        ds = separable_dataset()
        # keep a gap around the boundary so the separator is clean
        keep = np.abs(ds.X[:, 0] - 0.5) > 0.15
        ds = ds.subset(np.flatnonzero(keep))
        model, report = train_target("logistic", ds,
                                     {"seed": 0, "epochs": 300, "lr": 0.05},
                                     test=ds)
        assert report.test_accuracy == 1.0

    def test_depth_one_tree_on_single_threshold_data(self):
        ds = separable_dataset(seed=1)
        model, report = train_target("tree", ds, {"max_depth": 1}, test=ds)
        assert report.test_accuracy == 1.0
        assert model.depth() == 1

    def test_mlp_reaches_95_percent_on_reference(self, reference):
        assert reference.mlp_report.test_accuracy >= 0.95

    def test_single_class_data_rejected(self):
        ds = separable_dataset()
        only_zero = ds.subset(np.flatnonzero(ds.y == 0))
        with pytest.raises(TargetError):
            train_target("logistic", only_zero)

    def test_unknown_kind_rejected(self):
        with pytest.raises(TargetError):
            train_target("xgboost", separable_dataset())


class TestPredictProba:
    def test_zero_weight_logistic_is_uniform(self):
        ds = separable_dataset()
        model, _ = train_target("logistic", ds, {"epochs": 0})
        probs = predict_proba(model, ds.X[:5])
        np.testing.assert_allclose(probs, 0.5, atol=1e-15)

    def test_pure_tree_leaf_is_one_hot(self):
        ds = separable_dataset(seed=2)
        model, _ = train_target("tree", ds, {"max_depth": 4})
        probs = predict_proba(model, ds.X)
        pure = np.isclose(probs.max(axis=1), 1.0)
        assert pure.all()

    def test_mlp_probabilities_on_simplex(self, reference):
        rng = substream(3, "test.simplex")
        X = rng.uniform(size=(1000, reference.train.schema.dimension))
        probs = predict_proba(reference.mlp_target, X)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert (probs >= 0).all()

    def test_dimension_mismatch_rejected(self, reference):
        with pytest.raises(TargetError):
            predict_proba(reference.mlp_target, np.zeros((2, 3)))


class _StubModel:
    """Detects a fixed count of rows as class 1."""

    def __init__(self, detected, total):
        self.detected = detected
        self.total = total
        self.n_classes = 2

    def predict_proba(self, X):
        out = np.zeros((X.shape[0], 2))
        out[:self.detected, 1] = 1.0
        out[self.detected:, 0] = 1.0
        return out


class TestDetectionRate:
    def test_all_detected(self, reference):
        att = reference.test.class_subset(1)
        stub = _StubModel(len(att), len(att))
        assert detection_rate(stub, att.X, 1) == 1.0

    def test_none_detected(self, reference):
        att = reference.test.class_subset(1)
        stub = _StubModel(0, len(att))
        assert detection_rate(stub, att.X, 1) == 0.0

    def test_fractional_detection_frozen_value(self):
        X = np.zeros((1000, 4))
        stub = _StubModel(996, 1000)
        assert detection_rate(stub, X, 1) == pytest.approx(0.996, abs=1e-12)

    def test_empty_input_rejected(self, reference):
        with pytest.raises(TargetError):
            detection_rate(reference.mlp_target, np.zeros((0, 20)), 1)


class TestTreeInternals:
    def walk(self, node, row):
        while not node.is_leaf:
            node = node.left if row[node.feature] <= node.threshold else node.right
        return int(np.argmax(node.proba))

    def test_prediction_equals_split_path_for_every_sample(self):
        ds = separable_dataset(seed=4, n=150)
        model, _ = train_target("tree", ds, {"max_depth": 3})
        preds = predict(model, ds.X)
        manual = np.array([self.walk(model.root, row) for row in ds.X])
        np.testing.assert_array_equal(preds, manual)

    def test_midpoint_thresholds(self):
        X = np.array([[0.0], [1.0], [0.2], [0.8]])
        y = np.array([0, 1, 0, 1])
        model = TreeTarget(2, 1, max_depth=1).fit(X, y)
        assert model.root.threshold == pytest.approx(0.5)

    def test_argmax_tie_breaks_low(self):
        # A 50/50 leaf must predict class 0.
        X = np.array([[0.3], [0.3]])
        y = np.array([0, 1])
        model = TreeTarget(2, 1, max_depth=2).fit(X, y)
        assert predict(model, np.array([[0.3]]))[0] == 0


class TestSerialization:
    @pytest.mark.parametrize("kind", ["logistic", "mlp", "tree"])
    def test_round_trip_is_exact(self, kind, tmp_path, reference):
        model = {"logistic": None, "mlp": reference.mlp_target,
                 "tree": reference.tree_target}[kind]
        if model is None:
            model, _ = train_target("logistic", reference.train,
                                    {"seed": 0, "epochs": 5})
        path = tmp_path / f"{kind}.json"
        save_target(path, model)
        loaded = load_target(path)
        X = reference.test.X[:64]
        np.testing.assert_array_equal(predict_proba(model, X),
                                      predict_proba(loaded, X))

    def test_wrong_kind_rejected(self, tmp_path):
        from fewfool.persist import save_model
        path = tmp_path / "gen.json"
        save_model(path, "generator", {})
        with pytest.raises(TargetError):
            load_target(path)


class TestNeuralTargetsPassGradCheck:
    @pytest.mark.parametrize("kind", ["logistic", "mlp"])
    def test_trained_net_grad_check(self, kind, reference):
        hp = {"seed": 1, "epochs": 2}
        if kind == "mlp":
            hp["hidden"] = [8, 8]
        model, _ = train_target(kind, reference.train, hp)
        rng = substream(2, "test.tgc")
        for _ in range(20):
            X = Tensor(rng.uniform(0.05, 0.95, size=(4, reference.train.schema.dimension)))
            labels = rng.integers(0, 2, size=4)
            model.net(X)
            if model.net.relu_kink_distance() > 1e-3:
                break
        report = grad_check(lambda: cross_entropy_logits(model.net(X), labels),
                            model.net.parameters(), tolerance=1e-4)
        assert report.passed, report


class TestAccuracy:
    def test_accuracy_on_train_split(self, reference):
        assert accuracy(reference.mlp_target, reference.train) >= 0.95
