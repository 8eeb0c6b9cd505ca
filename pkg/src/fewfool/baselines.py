"""Non-learning comparison attacks.

A differential-evolution few-feature attack (the classic few-pixels recipe:
candidates are (index, value) gene pairs) and an exhaustive greedy oracle
for tiny instances. Both query the target only through predict_proba.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attack import AdversarialExample, CountingBlackBox, apply_perturbation
from .data import FeatureSchema, Sample
from .seeding import substream

_SINGLE_BUDGET = 10 ** 6
_PAIR_BUDGET = 10 ** 7
_CHUNK = 8192


class BaselineError(ValueError):
    pass


class OracleBudgetError(BaselineError):
    """Instance too large for exhaustive search."""


@dataclass(frozen=True)
class DEConfig:
    k: int
    pop_size: int = 40
    iterations: int = 75
    f: float = 0.5
    cr: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise BaselineError(f"feature budget must be >= 1, got {self.k}")
        if self.pop_size < 4:
            raise BaselineError("rand/1/bin needs a population of at least 4")
        if self.iterations < 1:
            raise BaselineError("need at least one iteration")
        if not 0.0 < self.cr <= 1.0:
            raise BaselineError(f"crossover rate outside (0,1]: {self.cr}")


@dataclass(frozen=True)
class CandidateSolution:
    indices: tuple[int, ...]  # positions within the mutable index list
    values: tuple[float, ...]
    fitness: float


@dataclass(frozen=True)
class DEResult:
    example: AdversarialExample
    best: CandidateSolution
    fooled: bool
    queries: int
    wall_time_s: float


@dataclass(frozen=True)
class OracleResult:
    example: AdversarialExample
    indices: tuple[int, ...]
    values: tuple[float, ...]
    fitness: float
    fooled: bool
    candidates: int


def _fitness_from_probs(probs: np.ndarray, goal) -> np.ndarray:
    # Lower is better: chase the target class or flee the attack class.
    if goal.mode == "targeted":
        return -probs[:, goal.target_class]
    return probs[:, goal.attack_class]


def _fooled(probs_row: np.ndarray, goal) -> bool:
    pred = int(np.argmax(probs_row))
    return pred == goal.target_class if goal.mode == "targeted" else \
        pred != goal.attack_class


def _decode(genes: np.ndarray, sample: Sample, mutable: np.ndarray, k: int) -> np.ndarray:
    """Gene rows [i_1..i_k, v_1..v_k] -> full-dimension deltas (set-to-value)."""
    n = genes.shape[0]
    deltas = np.zeros((n, sample.features.size))
    pos = np.minimum(genes[:, :k].astype(np.intp), mutable.size - 1)
    for row in range(n):
        for g in range(k):
            j = mutable[pos[row, g]]
            deltas[row, j] = genes[row, k + g] - sample.features[j]
    return deltas


def de_attack(blackbox, sample: Sample, schema: FeatureSchema, goal,
              config: DEConfig) -> DEResult:
    """rand/1/bin differential evolution over k (index, value) genes.

    Never early-stops, so the query count is exactly pop_size*(iterations+1).
    """
    schema.require_attackable()
    mutable = schema.mutable_indices
    if config.k > mutable.size:
        raise BaselineError(f"budget k={config.k} exceeds {mutable.size} mutable features")

    t0 = time.perf_counter()
    bb = CountingBlackBox(blackbox)
    rng = substream(config.seed, "de.attack")
    k, pop_size = config.k, config.pop_size
    lo = np.concatenate([np.zeros(k), np.zeros(k)])
    hi = np.concatenate([np.full(k, mutable.size - 1e-9), np.ones(k)])

    def evaluate(genes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        deltas = _decode(genes, sample, mutable, k)
        attacked = np.clip(sample.features + deltas, 0.0, 1.0)
        probs = bb.predict_proba(attacked)
        return _fitness_from_probs(probs, goal), probs

    pop = rng.uniform(lo, hi, size=(pop_size, 2 * k))
    fitness, probs = evaluate(pop)

    for _ in range(config.iterations):
        trials = np.empty_like(pop)
        for j in range(pop_size):
            choices = [c for c in range(pop_size) if c != j]
            a, b, c = rng.choice(choices, size=3, replace=False)
            mutant = pop[a] + config.f * (pop[b] - pop[c])
            mutant = np.clip(mutant, lo, hi)
            cross = rng.random(2 * k) < config.cr
            cross[rng.integers(2 * k)] = True
            trials[j] = np.where(cross, mutant, pop[j])
        trial_fitness, trial_probs = evaluate(trials)
        better = trial_fitness <= fitness
        pop[better] = trials[better]
        fitness[better] = trial_fitness[better]
        probs[better] = trial_probs[better]

    best_row = int(np.argmin(fitness))
    best_delta = _decode(pop[best_row:best_row + 1], sample, mutable, k)[0]
    example = apply_perturbation(sample, best_delta)
    best = CandidateSolution(
        indices=tuple(int(min(i, mutable.size - 1)) for i in pop[best_row, :k]),
        values=tuple(float(v) for v in pop[best_row, k:]),
        fitness=float(fitness[best_row]))
    return DEResult(example=example, best=best,
                    fooled=_fooled(probs[best_row], goal),
                    queries=bb.queries,
                    wall_time_s=time.perf_counter() - t0)


def _sweep(blackbox, sample: Sample, goal, build_batch, total: int):
    """Evaluate candidate deltas in chunks; return (best_fit, best_id, best_probs)."""
    best_fit = np.inf
    best_id = -1
    best_probs = None
    for start in range(0, total, _CHUNK):
        stop = min(start + _CHUNK, total)
        deltas = build_batch(start, stop)
        attacked = np.clip(sample.features + deltas, 0.0, 1.0)
        probs = blackbox.predict_proba(attacked)
        fit = _fitness_from_probs(probs, goal)
        j = int(np.argmin(fit))
        if fit[j] < best_fit:
            best_fit = float(fit[j])
            best_id = start + j
            best_probs = probs[j]
    return best_fit, best_id, best_probs


def greedy_oracle(blackbox, sample: Sample, schema: FeatureSchema, goal,
                  grid, pairs: bool = False) -> OracleResult:
    """Exhaustive single-feature (optionally feature-pair) grid attack.

    Exact within the grid; refuses instances beyond the sweep budget.
    """
    schema.require_attackable()
    mutable = schema.mutable_indices
    grid = np.asarray(list(grid), dtype=np.float64)
    m, g = mutable.size, grid.size
    if g == 0:
        raise BaselineError("empty value grid")

    if pairs:
        total = m * (m - 1) // 2 * g * g
        if m * m * g * g > _PAIR_BUDGET:
            raise OracleBudgetError(f"pair sweep needs {m * m * g * g} evaluations "
                                    f"(budget {_PAIR_BUDGET}): m={m}, grid={g}")
        combos = [(i, j) for i in range(m) for j in range(i + 1, m)]

        def build(start: int, stop: int) -> np.ndarray:
            out = np.zeros((stop - start, sample.features.size))
            for row, cand in enumerate(range(start, stop)):
                pair_id, rem = divmod(cand, g * g)
                vi, vj = divmod(rem, g)
                i, j = combos[pair_id]
                out[row, mutable[i]] = grid[vi] - sample.features[mutable[i]]
                out[row, mutable[j]] = grid[vj] - sample.features[mutable[j]]
            return out

        best_fit, best_id, best_probs = _sweep(blackbox, sample, goal, build, total)
        pair_id, rem = divmod(best_id, g * g)
        vi, vj = divmod(rem, g)
        i, j = combos[pair_id]
        indices, values = (i, j), (float(grid[vi]), float(grid[vj]))
        delta = build(best_id, best_id + 1)[0]
        candidates = total
    else:
        total = m * g
        if total > _SINGLE_BUDGET:
            raise OracleBudgetError(f"single sweep needs {total} evaluations "
                                    f"(budget {_SINGLE_BUDGET}): m={m}, grid={g}")

        def build(start: int, stop: int) -> np.ndarray:
            out = np.zeros((stop - start, sample.features.size))
            for row, cand in enumerate(range(start, stop)):
                i, vi = divmod(cand, g)
                out[row, mutable[i]] = grid[vi] - sample.features[mutable[i]]
            return out

        best_fit, best_id, best_probs = _sweep(blackbox, sample, goal, build, total)
        i, vi = divmod(best_id, g)
        indices, values = (i,), (float(grid[vi]),)
        delta = build(best_id, best_id + 1)[0]
        candidates = total

    example = apply_perturbation(sample, delta)
    return OracleResult(example=example, indices=indices, values=values,
                        fitness=best_fit, fooled=_fooled(best_probs, goal),
                        candidates=candidates)
