"""Dataset ingestion, scaling, splitting, and synthetic data generation.

A dataset carries its feature schema: which features are continuous vs
symbolic, and which may be perturbed by an attack. Symbolic features are
label-encoded for classifier input and are always frozen.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np

from .seeding import substream


class DataError(ValueError):
    """Malformed input data or an invalid data request."""


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str  # "continuous" | "symbolic"
    mutable: bool

    def __post_init__(self):
        if self.kind not in ("continuous", "symbolic"):
            raise DataError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "symbolic" and self.mutable:
            raise DataError(f"feature {self.name!r}: symbolic features are never mutable")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise DataError("schema needs at least one feature")

    @property
    def dimension(self) -> int:
        return len(self.features)

    @property
    def mutable_indices(self) -> np.ndarray:
        return np.array([i for i, f in enumerate(self.features) if f.mutable], dtype=np.intp)

    @property
    def frozen_indices(self) -> np.ndarray:
        return np.array([i for i, f in enumerate(self.features) if not f.mutable], dtype=np.intp)

    @property
    def mutable_count(self) -> int:
        return int(self.mutable_indices.size)

    def require_attackable(self) -> None:
        if self.mutable_count == 0:
            raise DataError("schema has no mutable features; dataset is not attackable")

    @classmethod
    def all_continuous(cls, d: int, prefix: str = "f") -> "FeatureSchema":
        return cls(tuple(Feature(f"{prefix}{i}", "continuous", True) for i in range(d)))

    @classmethod
    def tabular(cls, names: list[str], symbolic: set[str] | list[str] = (),
                frozen: set[str] | list[str] = ()) -> "FeatureSchema":
        symbolic = set(symbolic)
        frozen = set(frozen) | symbolic
        feats = [Feature(n, "symbolic" if n in symbolic else "continuous", n not in frozen)
                 for n in names]
        return cls(tuple(feats))


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Scaler:
    """Per-feature (min, max); transform maps to [0,1] and clamps outliers."""

    min_: np.ndarray
    max_: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Scaler":
        return cls(X.min(axis=0), X.max(axis=0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        span = self.max_ - self.min_
        # Constant features map to 0; no classifier can use them anyway.
        safe = np.where(span > 0, span, 1.0)
        out = (X - self.min_) / safe
        out[:, span == 0] = 0.0
        return np.clip(out, 0.0, 1.0)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    schema: FeatureSchema
    n_classes: int
    scaler: Scaler | None = None
    label_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DataError(f"X {self.X.shape} and y {self.y.shape} do not line up")
        if self.X.shape[1] != self.schema.dimension:
            raise DataError(f"X has {self.X.shape[1]} columns, schema has "
                            f"{self.schema.dimension} features")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataError("labels out of range for the declared class count")

    def __len__(self) -> int:
        return self.X.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(self.X[i], int(self.y[i]))

    def subset(self, idx: np.ndarray) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx])

    def class_subset(self, label: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.y == label))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError(f"train fraction must be in (0,1), got {self.train_fraction}")


def load_tabular(path, schema: FeatureSchema, delimiter: str = ",",
                 labels: tuple[str, ...] | None = None) -> Dataset:
    """Parse delimited text: one sample per row, label in the last column.

    Returned features are raw (unscaled); symbolic columns are label-encoded
    to integers by sorted value order. When `labels` is given, rows with a
    label outside that set are rejected; otherwise labels are discovered.
    """
    d = schema.dimension
    rows: list[list[str]] = []
    row_lines: list[int] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and _looks_like_header(row, d):
                continue
            if len(row) != d + 1:
                raise DataError(f"{path}:{lineno}: expected {d + 1} columns, got {len(row)}")
            rows.append([c.strip() for c in row])
            row_lines.append(lineno)
    if not rows:
        raise DataError(f"{path}: no data rows")

    symbolic_cols = [i for i, f in enumerate(schema.features) if f.kind == "symbolic"]
    encoders = {i: {v: k for k, v in enumerate(sorted({r[i] for r in rows}))}
                for i in symbolic_cols}

    X = np.empty((len(rows), d))
    labels_raw = [r[-1] for r in rows]
    label_names = tuple(sorted(labels)) if labels is not None \
        else tuple(sorted(set(labels_raw)))
    label_map = {name: i for i, name in enumerate(label_names)}
    for value, lineno in zip(labels_raw, row_lines):
        if value not in label_map:
            raise DataError(f"{path}:{lineno}: unknown label {value!r} "
                            f"(expected one of {label_names})")
    y = np.array([label_map[v] for v in labels_raw], dtype=np.int64)

    for r, row in enumerate(rows):
        for c in range(d):
            if c in encoders:
                X[r, c] = encoders[c][row[c]]
            else:
                try:
                    X[r, c] = float(row[c])
                except ValueError as exc:
                    raise DataError(f"{path}:{r + 1}: bad value {row[c]!r} in column {c}") from exc

    return Dataset(X, y, schema, n_classes=len(label_names), label_names=label_names)


def _looks_like_header(row: list[str], d: int) -> bool:
    if len(row) != d + 1:
        return False
    for cell in row:
        try:
            float(cell)
            return False
        except ValueError:
            continue
    return True


_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def load_idx_images(images_path, labels_path) -> Dataset:
    """Load big-endian IDX image/label files: flattened pixels scaled to [0,1]."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != _IDX_IMAGES_MAGIC:
            raise DataError(f"{images_path}: bad magic 0x{magic:08x}, "
                            f"expected 0x{_IDX_IMAGES_MAGIC:08x}")
        raw = np.frombuffer(fh.read(n * rows * cols), dtype=np.uint8)
        if raw.size != n * rows * cols:
            raise DataError(f"{images_path}: truncated pixel data")
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", fh.read(8))
        if magic != _IDX_LABELS_MAGIC:
            raise DataError(f"{labels_path}: bad magic 0x{magic:08x}, "
                            f"expected 0x{_IDX_LABELS_MAGIC:08x}")
        y = np.frombuffer(fh.read(n_labels), dtype=np.uint8).astype(np.int64)
    if n != n_labels:
        raise DataError(f"{n} images but {n_labels} labels")

    X = raw.reshape(n, rows * cols).astype(np.float64) / 255.0
    schema = FeatureSchema.all_continuous(rows * cols, prefix="px")
    n_classes = int(y.max()) + 1 if y.size else 1
    scaler = Scaler(np.zeros(rows * cols), np.full(rows * cols, 255.0))
    return Dataset(X, y, schema, n_classes=n_classes, scaler=scaler)


def scale_minmax(dataset: Dataset) -> Dataset:
    """Fit per-feature min/max on this dataset and map it to [0,1]."""
    scaler = Scaler.fit(dataset.X)
    return replace(dataset, X=scaler.transform(dataset.X), scaler=scaler)


def apply_scaler(dataset: Dataset, scaler: Scaler) -> Dataset:
    """Scale with an already-fitted scaler (test data reuses train min/max)."""
    return replace(dataset, X=scaler.transform(dataset.X), scaler=scaler)


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Disjoint seeded train/test partition, optionally stratified by label."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    rng = substream(spec.seed, "data.split")
    if spec.stratified:
        train_idx: list[np.ndarray] = []
        test_idx: list[np.ndarray] = []
        for label in range(dataset.n_classes):
            idx = np.flatnonzero(dataset.y == label)
            if idx.size == 0:
                continue
            perm = idx[rng.permutation(idx.size)]
            cut = int(idx.size * spec.train_fraction + 0.5)
            train_idx.append(perm[:cut])
            test_idx.append(perm[cut:])
        train = np.sort(np.concatenate(train_idx))
        test = np.sort(np.concatenate(test_idx))
    else:
        perm = rng.permutation(n)
        cut = int(n * spec.train_fraction + 0.5)
        train = np.sort(perm[:cut])
        test = np.sort(perm[cut:])
    return dataset.subset(train), dataset.subset(test)


def synth_tabular(n: int, d: int, mutable_count: int, margin: float, seed: int,
                  n_informative: int | None = None) -> Dataset:
    """Two Gaussian blobs separated by `margin` along a few mutable features.

    The class means differ by `margin` in Euclidean norm, spread over
    n_informative randomly chosen mutable features; all other features are
    noise. Class 1 is the attack class. Features come back scaled to [0,1].
    """
    if mutable_count > d:
        raise DataError(f"mutable_count {mutable_count} exceeds dimension {d}")
    if mutable_count < 1:
        raise DataError("synthetic data needs at least one mutable feature")
    rng = substream(seed, "data.synth")
    if n_informative is None:
        n_informative = min(4, mutable_count)
    n_informative = min(n_informative, mutable_count)

    feats = tuple(Feature(f"f{i}", "continuous", i < mutable_count) for i in range(d))
    schema = FeatureSchema(feats)
    informative = rng.choice(np.arange(mutable_count), size=n_informative, replace=False)

    n1 = n // 2
    n0 = n - n1
    X = rng.standard_normal((n, d))
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    offset = margin / np.sqrt(n_informative) if n_informative else 0.0
    X[n0:, informative] += offset
    perm = rng.permutation(n)
    dataset = Dataset(X[perm], y[perm], schema, n_classes=2)
    return scale_minmax(dataset)
