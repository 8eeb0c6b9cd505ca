"""Masked-generator GAN that learns sparse, low-amplitude perturbations.

The generator encodes the mutable slice of a sample into a latent vector and
splits into two heads: a mask head (final ReLU, so outputs are nonnegative
gates) and a perturbation head (tanh squashed to the amplitude budget). The
elementwise product of the heads, clamped and zero-padded to full dimension,
is the perturbation. A substitute discriminator is distilled from black-box
predictions so classification gradients can flow to the generator. Training
alternates distillation and generator steps under a phased loss-weight
schedule: classification-heavy early (wide exploration), sparsity-heavy late.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .attack import attacked_features, bypass_value
from .data import Dataset, FeatureSchema
from .numerics import (MLP, Adam, NonFiniteError, Tensor, cross_entropy_logits,
                       scatter_columns)
from .seeding import substream

MASK_SURROGATE_BETA = 0.01
UNTARGETED_CE_CEILING = 10.0
DEFAULT_TAU0 = 1e-6


class GanConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_clf: float
    w_perturb: float
    w_mask: float

    def __post_init__(self):
        if min(self.w_clf, self.w_perturb, self.w_mask) < 0:
            raise GanConfigError(f"loss weights must be nonnegative: {self}")
        if self.w_clf == self.w_perturb == self.w_mask == 0:
            raise GanConfigError("all loss weights are zero")


@dataclass(frozen=True)
class StopCondition:
    bypass_threshold: float = 0.9
    changed_fraction: float = 0.075
    max_epochs: int = 25000

    def __post_init__(self):
        if not 0.0 <= self.bypass_threshold <= 1.0:
            raise GanConfigError(f"bypass threshold outside [0,1]: {self.bypass_threshold}")
        if not 0.0 < self.changed_fraction <= 1.0:
            raise GanConfigError(f"changed fraction outside (0,1]: {self.changed_fraction}")
        if self.max_epochs < 0:
            raise GanConfigError("max_epochs must be nonnegative")


# Boundaries of the five training phases as fractions of the epoch budget;
# the 1.0 point is the budget itself. Weights move classification-heavy to
# sparsity-heavy, never the other way.
PHASE_FRACTIONS = (0.0, 0.25, 0.375, 0.5, 0.75)
DESK_PHASE_WEIGHTS = (
    LossWeights(1.0, 0.05, 0.002),
    LossWeights(1.0, 0.05, 0.02),
    LossWeights(0.8, 0.05, 0.06),
    LossWeights(0.6, 0.05, 0.15),
    LossWeights(0.5, 0.05, 0.3),
)


@dataclass(frozen=True)
class PhaseSchedule:
    phases: tuple[tuple[int, LossWeights], ...]
    stop: StopCondition = field(default_factory=StopCondition)

    def __post_init__(self):
        if not self.phases:
            raise GanConfigError("schedule needs at least one phase")
        object.__setattr__(self, "phases", tuple((int(e), w) for e, w in self.phases))
        epochs = [e for e, _ in self.phases]
        if epochs[0] != 0:
            raise GanConfigError("first phase must start at epoch 0")
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise GanConfigError(f"phase boundaries must be strictly increasing: {epochs}")
        masks = [w.w_mask for _, w in self.phases]
        clfs = [w.w_clf for _, w in self.phases]
        if any(b < a for a, b in zip(masks, masks[1:])):
            raise GanConfigError("w_mask must be nondecreasing across phases")
        if any(b > a for a, b in zip(clfs, clfs[1:])):
            raise GanConfigError("w_clf must be nonincreasing across phases")

    def weights_at(self, epoch: int) -> LossWeights:
        if epoch < 0:
            raise GanConfigError(f"epoch must be nonnegative, got {epoch}")
        current = self.phases[0][1]
        for boundary, weights in self.phases:
            if boundary <= epoch:
                current = weights
            else:
                break
        return current

    @classmethod
    def desk_scale(cls, max_epochs: int,
                   weights: tuple[LossWeights, ...] = DESK_PHASE_WEIGHTS,
                   bypass_threshold: float = 0.9,
                   changed_fraction: float = 0.075) -> "PhaseSchedule":
        """Five phases at the standard boundary fractions of `max_epochs`."""
        boundaries = [int(round(f * max_epochs)) for f in PHASE_FRACTIONS]
        phases: dict[int, LossWeights] = {}
        for b, w in zip(boundaries, weights):
            phases[b] = w  # collapsing duplicates keeps the later (heavier-mask) weights
        stop = StopCondition(bypass_threshold, changed_fraction, max_epochs)
        return cls(tuple(sorted(phases.items())), stop)


def schedule_weights(schedule: PhaseSchedule, epoch: int) -> LossWeights:
    """Piecewise-constant lookup: weights of the last boundary <= epoch."""
    return schedule.weights_at(epoch)


@dataclass(frozen=True)
class AttackGoal:
    mode: str  # "targeted" | "untargeted"
    attack_class: int
    target_class: int | None = None

    def __post_init__(self):
        if self.mode not in ("targeted", "untargeted"):
            raise GanConfigError(f"unknown goal mode {self.mode!r}")
        if self.mode == "targeted":
            if self.target_class is None:
                raise GanConfigError("targeted goal needs a target class")
            if self.target_class == self.attack_class:
                raise GanConfigError("target class must differ from the attack class")


@dataclass(frozen=True)
class LossBreakdown:
    l_clf: float
    l_perturb: float
    l_mask_surrogate: float
    l_mask_true_l0: float
    total: float


def compose_perturbation(mask: np.ndarray, perturb: np.ndarray,
                         eps2: float | None = None) -> np.ndarray:
    """Elementwise product of mask gates and raw deltas, optionally capped."""
    raw = np.asarray(mask, dtype=np.float64) * np.asarray(perturb, dtype=np.float64)
    if eps2 is None:
        return raw
    return np.clip(raw, -eps2, eps2)


class GeneratorNet:
    """Two-headed masked generator over the mutable feature slice."""

    def __init__(self, schema: FeatureSchema, eps2: float = 1.0,
                 latent_dim: int = 64, encoder_hidden: tuple[int, ...] = (128, 128),
                 head_hidden: tuple[int, ...] = (64,),
                 rng: np.random.Generator | None = None):
        schema.require_attackable()
        if not 0.0 < eps2 <= 1.0:
            raise GanConfigError(f"eps2 must be in (0,1], got {eps2}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dimension = schema.dimension
        self.mutable_indices = schema.mutable_indices
        self.eps2 = float(eps2)
        self.latent_dim = latent_dim
        self.encoder_hidden = tuple(encoder_hidden)
        self.head_hidden = tuple(head_hidden)
        m = self.mutable_indices.size
        self.encoder = MLP([m, *encoder_hidden, latent_dim], rng=rng, name="gen.encoder")
        # Mask bias starts positive so every feature begins switched on.
        self.mask_head = MLP([latent_dim, *head_hidden, m], output_activation="relu",
                             rng=rng, output_bias=0.5, name="gen.mask")
        self.perturb_head = MLP([latent_dim, *head_hidden, m], output_activation="tanh",
                                rng=rng, name="gen.perturb")

    def forward_parts(self, x_mut: Tensor) -> dict[str, Tensor]:
        """Tape-recorded forward pass. Keys: mask, perturb, p_mut, p_full."""
        z = self.encoder(x_mut)
        mask = self.mask_head(z)
        perturb = self.perturb_head(z) * self.eps2
        p_mut = (mask * perturb).clip(-self.eps2, self.eps2)
        p_full = scatter_columns(p_mut, self.mutable_indices, self.dimension)
        return {"mask": mask, "perturb": perturb, "p_mut": p_mut, "p_full": p_full}

    def generate(self, X: np.ndarray) -> np.ndarray:
        """Full-dimension deltas for a batch of full feature vectors."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return self.forward_parts(Tensor(X[:, self.mutable_indices]))["p_full"].data

    def parameters(self):
        return (self.encoder.parameters() + self.mask_head.parameters()
                + self.perturb_head.parameters())

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snapshot: list[np.ndarray]) -> None:
        for p, data in zip(self.parameters(), snapshot):
            p.data = data.copy()

    def to_payload(self) -> dict:
        return {
            "dimension": self.dimension,
            "mutable_indices": self.mutable_indices.tolist(),
            "eps2": self.eps2,
            "latent_dim": self.latent_dim,
            "encoder_hidden": list(self.encoder_hidden),
            "head_hidden": list(self.head_hidden),
            "encoder": self.encoder.weights_to_payload(),
            "mask_head": self.mask_head.weights_to_payload(),
            "perturb_head": self.perturb_head.weights_to_payload(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "GeneratorNet":
        from .data import Feature  # local import to keep module load light

        mutable = set(payload["mutable_indices"])
        feats = tuple(Feature(f"f{i}", "continuous", i in mutable)
                      for i in range(payload["dimension"]))
        gen = cls(FeatureSchema(feats), eps2=payload["eps2"],
                  latent_dim=payload["latent_dim"],
                  encoder_hidden=tuple(payload["encoder_hidden"]),
                  head_hidden=tuple(payload["head_hidden"]))
        gen.encoder.weights_from_payload(payload["encoder"])
        gen.mask_head.weights_from_payload(payload["mask_head"])
        gen.perturb_head.weights_from_payload(payload["perturb_head"])
        return gen


class DiscriminatorNet:
    """Substitute classifier distilled from black-box predictions."""

    def __init__(self, dimension: int, n_classes: int,
                 hidden: tuple[int, ...] = (128, 128),
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dimension = dimension
        self.n_classes = n_classes
        self.hidden = tuple(hidden)
        self.net = MLP([dimension, *hidden, n_classes], rng=rng, zero_output=True,
                       name="disc")

    def logits(self, x: Tensor) -> Tensor:
        return self.net(x)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return self.net(Tensor(X)).softmax().data

    def parameters(self):
        return self.net.parameters()

    def to_payload(self) -> dict:
        return {"dimension": self.dimension, "n_classes": self.n_classes,
                "hidden": list(self.hidden), "weights": self.net.weights_to_payload()}

    @classmethod
    def from_payload(cls, payload: dict) -> "DiscriminatorNet":
        disc = cls(payload["dimension"], payload["n_classes"],
                   hidden=tuple(payload["hidden"]))
        disc.net.weights_from_payload(payload["weights"])
        return disc


def generator_forward(gen: GeneratorNet, batch_mutable: np.ndarray,
                      schema: FeatureSchema) -> np.ndarray:
    """Perturbation batch (full dimension) for mutable-slice inputs."""
    batch_mutable = np.asarray(batch_mutable, dtype=np.float64)
    if batch_mutable.ndim == 1:
        batch_mutable = batch_mutable.reshape(1, -1)
    if not np.array_equal(schema.mutable_indices, gen.mutable_indices) or \
            schema.dimension != gen.dimension:
        raise GanConfigError("generator was built for a different schema")
    if batch_mutable.shape[1] != gen.mutable_indices.size:
        raise GanConfigError(f"batch has {batch_mutable.shape[1]} columns, "
                             f"generator expects {gen.mutable_indices.size}")
    return gen.forward_parts(Tensor(batch_mutable))["p_full"].data


def _clf_loss_tensor(logits: Tensor, goal: AttackGoal, n: int) -> Tensor:
    if goal.mode == "targeted":
        labels = np.full(n, goal.target_class, dtype=np.intp)
        return cross_entropy_logits(logits, labels)
    labels = np.full(n, goal.attack_class, dtype=np.intp)
    per_sample = cross_entropy_logits(logits, labels, reduction="none")
    # Push away from the attack class; the ceiling keeps -CE from diverging.
    return -(per_sample.clip(None, UNTARGETED_CE_CEILING).mean())


def _mask_surrogate_tensor(mask: Tensor) -> Tensor:
    # Smooth stand-in for the nonzero count: m/(m+beta) per gate, summed per
    # sample, averaged over the batch.
    return (mask / (mask + MASK_SURROGATE_BETA)).sum(axis=1).mean()


def true_l0(p_mut: np.ndarray, tau0: float = DEFAULT_TAU0) -> float:
    """Mean count of perturbation entries above the dead zone."""
    p_mut = np.atleast_2d(np.asarray(p_mut, dtype=np.float64))
    return float((np.abs(p_mut) > tau0).sum(axis=1).mean())


def compute_losses(p_mut: np.ndarray, disc_probs: np.ndarray, goal: AttackGoal,
                   weights: LossWeights, mask: np.ndarray,
                   tau0: float = DEFAULT_TAU0) -> LossBreakdown:
    """Loss breakdown from arrays (mirrors the differentiable training path)."""
    p_mut = np.atleast_2d(np.asarray(p_mut, dtype=np.float64))
    disc_probs = np.atleast_2d(np.asarray(disc_probs, dtype=np.float64))
    mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
    if p_mut.shape[0] == 0:
        raise GanConfigError("empty batch")
    if disc_probs.shape[0] != p_mut.shape[0]:
        raise GanConfigError(f"batch sizes disagree: p {p_mut.shape} vs "
                             f"disc output {disc_probs.shape}")

    logp = np.log(np.maximum(disc_probs, 1e-300))
    if goal.mode == "targeted":
        l_clf = float(np.mean(-logp[:, goal.target_class]))
    else:
        per = np.minimum(-logp[:, goal.attack_class], UNTARGETED_CE_CEILING)
        l_clf = float(-np.mean(per))
    l_perturb = float(np.mean(np.abs(p_mut)))
    surrogate = float((mask / (mask + MASK_SURROGATE_BETA)).sum(axis=1).mean())
    l0 = true_l0(p_mut, tau0)
    total = weights.w_clf * l_clf + weights.w_perturb * l_perturb + weights.w_mask * surrogate
    return LossBreakdown(l_clf, l_perturb, surrogate, l0, total)


def distill_step(disc: DiscriminatorNet, batch: np.ndarray, blackbox,
                 opt: Adam) -> float:
    """One cross-entropy step toward the black box's hard labels."""
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.argmax(blackbox.predict_proba(batch), axis=1)
    opt.zero_grad()
    loss = cross_entropy_logits(disc.logits(Tensor(batch)), labels)
    loss.backward()
    opt.step()
    return loss.item()


def generator_step(gen: GeneratorNet, disc: DiscriminatorNet, batch: np.ndarray,
                   goal: AttackGoal, weights: LossWeights, opt: Adam,
                   tau0: float = DEFAULT_TAU0) -> LossBreakdown:
    """One generator update against the frozen discriminator.

    Gradients flow through clamp-and-compose into both heads; the
    discriminator's parameters are not touched.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise GanConfigError("empty batch")
    parts = gen.forward_parts(Tensor(batch[:, gen.mutable_indices]))
    attacked = (Tensor(batch) + parts["p_full"]).clip(0.0, 1.0)
    logits = disc.logits(attacked)

    l_clf = _clf_loss_tensor(logits, goal, batch.shape[0])
    l_perturb = parts["p_mut"].abs().mean()
    l_mask = _mask_surrogate_tensor(parts["mask"])
    total = (weights.w_clf * l_clf + weights.w_perturb * l_perturb
             + weights.w_mask * l_mask)
    if not np.isfinite(total.data).all():
        raise NonFiniteError("generator loss is not finite; aborting epoch")

    opt.zero_grad()
    total.backward()
    opt.step()
    return LossBreakdown(l_clf.item(), l_perturb.item(), l_mask.item(),
                         true_l0(parts["p_mut"].data, tau0), total.item())


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    w_clf: float
    w_perturb: float
    w_mask: float
    l_clf: float
    l_perturb: float
    l_mask_surrogate: float
    l_mask_true_l0: float
    total: float
    distill_loss: float
    bypass: float
    mean_l0: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    converged: bool = False
    epochs_run: int = 0
    best_epoch: int = -1
    warm_start_agreement: float = float("nan")

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(asdict(rec)) + "\n")

    def summary(self) -> dict:
        return {"converged": self.converged, "epochs_run": self.epochs_run,
                "best_epoch": self.best_epoch,
                "warm_start_agreement": self.warm_start_agreement}


class _Cycler:
    """Deterministic minibatch stream: reshuffles each full pass."""

    def __init__(self, X: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.X = X
        self.batch_size = min(batch_size, len(X))
        self.rng = rng
        self._order = rng.permutation(len(X))
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self.X):
            self._order = self.rng.permutation(len(self.X))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.X[idx]


def distill_warmup(disc: DiscriminatorNet, X: np.ndarray, blackbox, opt: Adam,
                   passes: int, batch_size: int, rng: np.random.Generator) -> None:
    """Pre-train the discriminator on black-box labels before the GAN loop."""
    n = len(X)
    for _ in range(passes):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            distill_step(disc, X[order[start:start + batch_size]], blackbox, opt)


def _agreement(disc: DiscriminatorNet, blackbox, X: np.ndarray) -> float:
    if len(X) == 0:
        return float("nan")
    return float(np.mean(np.argmax(disc.predict_proba(X), axis=1)
                         == np.argmax(blackbox.predict_proba(X), axis=1)))


def train_attack(gen: GeneratorNet, disc: DiscriminatorNet, blackbox,
                 data: Dataset, goal: AttackGoal, schedule: PhaseSchedule,
                 seed: int, *, batch_size: int = 128, gen_lr: float = 1e-3,
                 disc_lr: float = 1e-3, warm_start_passes: int = 5,
                 val_fraction: float = 0.2,
                 tau0: float = DEFAULT_TAU0) -> tuple[GeneratorNet, TrainingLog]:
    """Adversarial training loop: alternate distillation and generator steps.

    Each epoch is one minibatch iteration. Stops when the validation bypass
    rate reaches the threshold while the mean changed-feature fraction is
    under the bound; otherwise runs to max_epochs and restores the
    best-seen generator (log.converged says which happened).
    """
    attack_X = data.X[data.y == goal.attack_class]
    normal_X = data.X[data.y != goal.attack_class]
    if len(attack_X) < 2:
        raise GanConfigError("need at least two attack-class samples to train")
    m = gen.mutable_indices.size

    perm = substream(seed, "gan.val").permutation(len(attack_X))
    n_val = max(1, min(512, int(round(val_fraction * len(attack_X)))))
    val_X = attack_X[perm[:n_val]]
    train_X = attack_X[perm[n_val:]]
    if len(train_X) == 0:
        train_X = val_X

    f_orig = float(np.mean(np.argmax(blackbox.predict_proba(val_X), axis=1)
                           == goal.attack_class))
    if f_orig == 0.0:
        raise GanConfigError("black box detects none of the validation attack "
                             "samples; bypass rate is undefined")

    gen_opt = Adam(gen.parameters(), lr=gen_lr)
    disc_opt = Adam(disc.parameters(), lr=disc_lr)

    distill_warmup(disc, data.X, blackbox, disc_opt,
                   passes=warm_start_passes, batch_size=batch_size,
                   rng=substream(seed, "gan.warmstart"))

    log = TrainingLog()
    holdout = np.vstack([val_X, normal_X[:n_val]]) if len(normal_X) else val_X
    log.warm_start_agreement = _agreement(disc, blackbox, holdout)

    attack_batches = _Cycler(train_X, batch_size, substream(seed, "gan.batches"))
    normal_batches = _Cycler(normal_X, batch_size, substream(seed, "gan.distill")) \
        if len(normal_X) else None

    best = (-1.0, np.inf)  # (bypass, mean_l0), lexicographic
    best_snapshot = gen.snapshot()
    stop = schedule.stop

    for epoch in range(stop.max_epochs):
        weights = schedule.weights_at(epoch)
        batch = attack_batches.next()

        # Distill on what the generator currently emits plus normal traffic,
        # labeled by the black box.
        adversarial = attacked_features(batch, gen.generate(batch))
        distill_batch = np.vstack([adversarial, normal_batches.next()]) \
            if normal_batches else adversarial
        distill_loss = distill_step(disc, distill_batch, blackbox, disc_opt)

        breakdown = generator_step(gen, disc, batch, goal, weights, gen_opt, tau0)

        # Validation slice: bypass against the real black box plus sparsity.
        val_delta = gen.generate(val_X)
        val_attacked = attacked_features(val_X, val_delta)
        f_att = float(np.mean(np.argmax(blackbox.predict_proba(val_attacked), axis=1)
                              == goal.attack_class))
        bypass = bypass_value(f_orig, f_att)
        mean_l0 = true_l0(val_delta[:, gen.mutable_indices], tau0)

        log.records.append(EpochRecord(
            epoch, weights.w_clf, weights.w_perturb, weights.w_mask,
            breakdown.l_clf, breakdown.l_perturb, breakdown.l_mask_surrogate,
            breakdown.l_mask_true_l0, breakdown.total, distill_loss,
            bypass, mean_l0))
        log.epochs_run = epoch + 1

        if (bypass, -mean_l0) > (best[0], -best[1]):
            best = (bypass, mean_l0)
            best_snapshot = gen.snapshot()
            log.best_epoch = epoch

        if bypass >= stop.bypass_threshold and mean_l0 / m <= stop.changed_fraction:
            log.converged = True
            break

    if not log.converged:
        gen.restore(best_snapshot)
    return gen, log
