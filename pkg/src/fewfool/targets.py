"""Target classifiers exposed to the attack as black boxes.

Three kinds: logistic (softmax regression), mlp, and a CART decision tree.
The attack side of this package only ever touches predict_proba and
n_classes; everything else here is training plumbing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import persist
from .data import Dataset
from .numerics import MLP, Adam, Tensor, cross_entropy_logits
from .seeding import substream

TARGET_KINDS = ("logistic", "mlp", "tree")


class TargetError(ValueError):
    pass


@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float
    wall_time_s: float


def _check_batch(X: np.ndarray, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != dim:
        raise TargetError(f"batch shape {X.shape} does not match feature dimension {dim}")
    return X


class _NeuralTarget:
    """Shared wrapper for logistic/mlp targets built on the autodiff MLP."""

    kind = ""

    def __init__(self, net: MLP, n_classes: int):
        self.net = net
        self.n_classes = n_classes
        self.dim = net.dims[0]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = _check_batch(X, self.dim)
        return self.net(Tensor(X)).softmax().data

    def to_payload(self) -> dict:
        return {"dims": self.net.dims, "n_classes": self.n_classes,
                "weights": self.net.weights_to_payload()}

    @classmethod
    def from_payload(cls, payload: dict) -> "_NeuralTarget":
        net = MLP(payload["dims"])
        net.weights_from_payload(payload["weights"])
        return cls(net, payload["n_classes"])


class LogisticTarget(_NeuralTarget):
    kind = "logistic"


class MLPTarget(_NeuralTarget):
    kind = "mlp"


@dataclass
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None
    proba: np.ndarray | None = None  # set on leaves

    @property
    def is_leaf(self) -> bool:
        return self.proba is not None


class TreeTarget:
    """CART classifier: Gini impurity, midpoint thresholds, deterministic ties."""

    kind = "tree"

    def __init__(self, n_classes: int, dim: int, max_depth: int = 8,
                 min_samples_leaf: int = 1):
        self.n_classes = n_classes
        self.dim = dim
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.root: _TreeNode | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "TreeTarget":
        self.root = self._build(X, y, depth=0)
        return self

    def _leaf(self, y: np.ndarray) -> _TreeNode:
        counts = np.bincount(y, minlength=self.n_classes).astype(np.float64)
        return _TreeNode(proba=counts / counts.sum())

    def _build(self, X: np.ndarray, y: np.ndarray, depth: int) -> _TreeNode:
        if depth >= self.max_depth or y.size < 2 * self.min_samples_leaf or \
                np.all(y == y[0]):
            return self._leaf(y)
        best = self._best_split(X, y)
        if best is None:
            return self._leaf(y)
        feature, threshold = best
        mask = X[:, feature] <= threshold
        node = _TreeNode(feature=feature, threshold=threshold)
        node.left = self._build(X[mask], y[mask], depth + 1)
        node.right = self._build(X[~mask], y[~mask], depth + 1)
        return node

    def _best_split(self, X: np.ndarray, y: np.ndarray) -> tuple[int, float] | None:
        n = y.size
        onehot = np.zeros((n, self.n_classes))
        onehot[np.arange(n), y] = 1.0
        parent_gini = self._gini(np.bincount(y, minlength=self.n_classes), n)
        best_score = parent_gini - 1e-12
        best: tuple[int, float] | None = None
        for feature in range(X.shape[1]):
            order = np.argsort(X[:, feature], kind="stable")
            xs = X[order, feature]
            # Candidate cuts sit between consecutive distinct values.
            cuts = np.flatnonzero(xs[1:] > xs[:-1]) + 1
            if cuts.size == 0:
                continue
            left_counts = np.cumsum(onehot[order], axis=0)
            total = left_counts[-1]
            nl = cuts.astype(np.float64)
            nr = n - nl
            lc = left_counts[cuts - 1]
            rc = total - lc
            gini_l = 1.0 - ((lc / nl[:, None]) ** 2).sum(axis=1)
            gini_r = 1.0 - ((rc / nr[:, None]) ** 2).sum(axis=1)
            score = (nl * gini_l + nr * gini_r) / n
            k = int(np.argmin(score))
            if score[k] < best_score:
                ok = self.min_samples_leaf <= nl[k] and self.min_samples_leaf <= nr[k]
                if ok:
                    best_score = float(score[k])
                    threshold = 0.5 * (xs[cuts[k] - 1] + xs[cuts[k]])
                    best = (feature, float(threshold))
        return best

    @staticmethod
    def _gini(counts: np.ndarray, n: int) -> float:
        p = counts / n
        return float(1.0 - (p * p).sum())

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = _check_batch(X, self.dim)
        if self.root is None:
            raise TargetError("tree is not fitted")
        out = np.empty((X.shape[0], self.n_classes))
        for i, row in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.feature] <= node.threshold else node.right
            out[i] = node.proba
        return out

    def depth(self) -> int:
        def walk(node):
            return 0 if node.is_leaf else 1 + max(walk(node.left), walk(node.right))
        return walk(self.root) if self.root else 0

    def to_payload(self) -> dict:
        def encode(node: _TreeNode):
            if node.is_leaf:
                return {"proba": node.proba.tolist()}
            return {"feature": node.feature, "threshold": node.threshold,
                    "left": encode(node.left), "right": encode(node.right)}
        return {"n_classes": self.n_classes, "dim": self.dim,
                "max_depth": self.max_depth, "tree": encode(self.root)}

    @classmethod
    def from_payload(cls, payload: dict) -> "TreeTarget":
        model = cls(payload["n_classes"], payload["dim"], payload["max_depth"])

        def decode(doc) -> _TreeNode:
            if "proba" in doc:
                return _TreeNode(proba=np.asarray(doc["proba"], dtype=np.float64))
            node = _TreeNode(feature=doc["feature"], threshold=doc["threshold"])
            node.left = decode(doc["left"])
            node.right = decode(doc["right"])
            return node

        model.root = decode(payload["tree"])
        return model


TargetModel = LogisticTarget | MLPTarget | TreeTarget


def predict_proba(model, X: np.ndarray) -> np.ndarray:
    """Black-box query surface: per-sample probability vectors."""
    return model.predict_proba(X)


def predict(model, X: np.ndarray) -> np.ndarray:
    # argmax ties break toward the lower class index (numpy argmax rule)
    return np.argmax(model.predict_proba(X), axis=1)


def accuracy(model, dataset: Dataset) -> float:
    return float(np.mean(predict(model, dataset.X) == dataset.y))


def detection_rate(model, X: np.ndarray, attack_class: int) -> float:
    """Fraction of the given attack samples classified as the attack class."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[0] == 0:
        raise TargetError("detection_rate needs at least one sample")
    return float(np.mean(predict(model, X) == attack_class))


def _train_neural(cls, train: Dataset, hp: dict, seed: int):
    hidden = list(hp.get("hidden", [64, 64])) if cls is MLPTarget else []
    lr = hp.get("lr", 1e-2 if cls is LogisticTarget else 1e-3)
    epochs = hp.get("epochs", 60)
    batch_size = hp.get("batch_size", 128)

    dims = [train.schema.dimension, *hidden, train.n_classes]
    net = MLP(dims, rng=substream(seed, f"target.{cls.kind}.init"), zero_output=True,
              name=cls.kind)
    opt = Adam(net.parameters(), lr=lr)
    rng = substream(seed, f"target.{cls.kind}.batches")
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            logits = net(Tensor(train.X[idx]))
            loss = cross_entropy_logits(logits, train.y[idx])
            loss.backward()
            opt.step()
    return cls(net, train.n_classes)


def train_target(kind: str, train: Dataset, hyperparams: dict | None = None,
                 test: Dataset | None = None) -> tuple[TargetModel, TrainReport]:
    """Train a target classifier and report accuracies.

    `test` is optional; without it the report's test accuracy is NaN.
    """
    hp = dict(hyperparams or {})
    seed = hp.get("seed", 0)
    if np.unique(train.y).size < 2:
        raise TargetError("training data contains a single class")

    t0 = time.perf_counter()
    if kind == "logistic":
        model: TargetModel = _train_neural(LogisticTarget, train, hp, seed)
    elif kind == "mlp":
        model = _train_neural(MLPTarget, train, hp, seed)
    elif kind == "tree":
        model = TreeTarget(train.n_classes, train.schema.dimension,
                           max_depth=hp.get("max_depth", 8),
                           min_samples_leaf=hp.get("min_samples_leaf", 1))
        model.fit(train.X, train.y)
    else:
        raise TargetError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")
    elapsed = time.perf_counter() - t0

    report = TrainReport(
        train_accuracy=accuracy(model, train),
        test_accuracy=accuracy(model, test) if test is not None else float("nan"),
        wall_time_s=elapsed,
    )
    return model, report


_TARGET_CLASSES = {"logistic": LogisticTarget, "mlp": MLPTarget, "tree": TreeTarget}


def save_target(path, model: TargetModel) -> None:
    persist.save_model(path, f"target.{model.kind}", model.to_payload())


def load_target(path) -> TargetModel:
    kind, payload = persist.load_model(path)
    if not kind.startswith("target."):
        raise TargetError(f"{path}: not a target model (kind {kind!r})")
    name = kind.split(".", 1)[1]
    if name not in _TARGET_CLASSES:
        raise TargetError(f"{path}: unknown target kind {name!r}")
    return _TARGET_CLASSES[name].from_payload(payload)
