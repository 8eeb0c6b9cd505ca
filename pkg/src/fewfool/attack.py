"""Perturbation application, domain clamping, and attack metrics.

Everything here treats the target model as an opaque probability oracle:
only predict_proba is ever called.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Sample

DEFAULT_TAU0 = 1e-6


class AttackError(ValueError):
    pass


class BypassUndefinedError(AttackError):
    """The black box detects none of the originals, so Eq-style bypass has no denominator."""


class AuditError(RuntimeError):
    """An emitted example violated a hard constraint."""


@dataclass(frozen=True)
class AttackConstraints:
    """Budgets: changed-feature count (eps1), amplitude (eps2), dead zone (tau0)."""

    eps1: int | None = None
    eps1_fraction: float | None = None
    eps2: float = 1.0
    tau0: float = DEFAULT_TAU0
    enforce_eps1: bool = False

    def __post_init__(self):
        if self.eps1 is not None and self.eps1 < 1:
            raise AttackError(f"eps1 must be >= 1, got {self.eps1}")
        if self.eps1_fraction is not None and not 0.0 < self.eps1_fraction <= 1.0:
            raise AttackError(f"eps1 fraction outside (0,1]: {self.eps1_fraction}")
        if not 0.0 < self.eps2 <= 1.0:
            raise AttackError(f"eps2 outside (0,1]: {self.eps2}")

    def resolve_eps1(self, mutable_count: int) -> int | None:
        if self.eps1 is not None:
            return self.eps1
        if self.eps1_fraction is not None:
            return max(1, int(np.floor(self.eps1_fraction * mutable_count + 1e-9)))
        return None


@dataclass(frozen=True)
class Perturbation:
    delta: np.ndarray
    tau0: float = DEFAULT_TAU0

    @property
    def nonzero_indices(self) -> np.ndarray:
        return np.flatnonzero(np.abs(self.delta) > self.tau0)

    @property
    def changed_count(self) -> int:
        return int(self.nonzero_indices.size)


@dataclass(frozen=True)
class AdversarialExample:
    original: np.ndarray
    label: int
    delta: np.ndarray
    attacked: np.ndarray


def attacked_features(X: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """X + delta clamped into the [0,1] feature domain."""
    return np.clip(np.asarray(X, dtype=np.float64) + delta, 0.0, 1.0)


def apply_perturbation(sample: Sample, p: Perturbation | np.ndarray) -> AdversarialExample:
    delta = p.delta if isinstance(p, Perturbation) else np.asarray(p, dtype=np.float64)
    if delta.shape != sample.features.shape:
        raise AttackError(f"delta shape {delta.shape} does not match sample "
                          f"shape {sample.features.shape}")
    attacked = attacked_features(sample.features, delta)
    # Untouched coordinates stay bit-equal to the original.
    untouched = delta == 0.0
    attacked[untouched] = sample.features[untouched]
    return AdversarialExample(sample.features, sample.label, delta, attacked)


def bypass_value(f_orig: float, f_attacked: float) -> float:
    """max(1 - f(X')/f(X), 0): the fractional drop in detection."""
    if f_orig <= 0.0:
        raise BypassUndefinedError("detection rate on originals is zero")
    return max(1.0 - f_attacked / f_orig, 0.0)


def _detection(blackbox, X: np.ndarray, attack_class: int) -> float:
    preds = np.argmax(blackbox.predict_proba(X), axis=1)
    return float(np.mean(preds == attack_class))


def bypass_rate(blackbox, originals: np.ndarray, attacked: np.ndarray,
                attack_class: int) -> float:
    """Detection drop between an original batch and its attacked counterpart."""
    originals = np.atleast_2d(np.asarray(originals, dtype=np.float64))
    attacked = np.atleast_2d(np.asarray(attacked, dtype=np.float64))
    if originals.shape != attacked.shape:
        raise AttackError(f"batch shapes disagree: {originals.shape} vs {attacked.shape}")
    if originals.shape[0] == 0:
        raise AttackError("empty batch")
    return bypass_value(_detection(blackbox, originals, attack_class),
                        _detection(blackbox, attacked, attack_class))


def changed_length(p: Perturbation | np.ndarray, tau0: float = DEFAULT_TAU0) -> int:
    """Number of perturbation entries above the dead-zone threshold."""
    delta = p.delta if isinstance(p, Perturbation) else np.asarray(p, dtype=np.float64)
    return int((np.abs(delta) > tau0).sum())


def topk_truncate(deltas: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest-magnitude entries per row, zero the rest."""
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64)).copy()
    if k >= deltas.shape[1]:
        return deltas
    order = np.argsort(np.abs(deltas), axis=1)
    for i in range(deltas.shape[0]):
        deltas[i, order[i, :deltas.shape[1] - k]] = 0.0
    return deltas


class CountingBlackBox:
    """Prediction-only wrapper that counts queried rows."""

    def __init__(self, model):
        self._predict = model.predict_proba
        self.n_classes = model.n_classes
        self.queries = 0

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.queries += X.shape[0]
        return self._predict(X)


@dataclass(frozen=True)
class AttackMetrics:
    bypass_rate: float
    post_attack_accuracy: float
    mean_changed: float
    mean_time_per_sample_s: float
    eps1_violation_fraction: float
    n_samples: int
    # detection rates behind the bypass figure, from the same predictions
    detection_original: float = float("nan")
    detection_attacked: float = float("nan")


def evaluate_attack(gen, blackbox, subset: Dataset, constraints: AttackConstraints,
                    goal, timing_samples: int = 128) -> AttackMetrics:
    """Amortized evaluation: one generator forward pass per sample.

    Raises AuditError if any emitted delta exceeds the amplitude budget;
    the changed-count budget is reported as a violation fraction instead.
    """
    n = len(subset)
    if n == 0:
        raise AttackError("empty evaluation subset")
    if not np.all(subset.y == goal.attack_class):
        raise AttackError("evaluation subset must contain only attack-class samples")
    X = subset.X
    mutable_count = subset.schema.mutable_count

    deltas = gen.generate(X)
    k = constraints.resolve_eps1(mutable_count)
    if constraints.enforce_eps1 and k is not None:
        deltas = topk_truncate(deltas, k)

    worst = float(np.max(np.abs(deltas))) if deltas.size else 0.0
    if worst > constraints.eps2 + 1e-12:
        raise AuditError(f"amplitude audit failed: |delta| reached {worst:.6g} "
                         f"with eps2={constraints.eps2}")

    attacked = attacked_features(X, deltas)
    preds_orig = np.argmax(blackbox.predict_proba(X), axis=1)
    preds_att = np.argmax(blackbox.predict_proba(attacked), axis=1)

    f_orig = float(np.mean(preds_orig == goal.attack_class))
    f_att = float(np.mean(preds_att == goal.attack_class))
    bypass = bypass_value(f_orig, f_att)

    if goal.mode == "targeted":
        fooled = preds_att == goal.target_class
    else:
        fooled = preds_att != goal.attack_class
    acc_star = float(1.0 - np.mean(fooled))

    changed = (np.abs(deltas) > constraints.tau0).sum(axis=1)
    mean_changed = float(changed.mean())
    eps1_violations = float(np.mean(changed > k)) if k is not None else 0.0

    reps = min(timing_samples, n)
    t0 = time.perf_counter()
    for i in range(reps):
        gen.generate(X[i:i + 1])
    per_sample = (time.perf_counter() - t0) / reps

    return AttackMetrics(bypass, acc_star, mean_changed, per_sample,
                         eps1_violations, n,
                         detection_original=f_orig, detection_attacked=f_att)
