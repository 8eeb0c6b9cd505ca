"""Shared fixtures: the reference synthetic experiment, trained once per session."""

import time
from dataclasses import dataclass

import pytest

from fewfool.attack import AttackConstraints
from fewfool.data import Dataset, SplitSpec, split, synth_tabular
from fewfool.gan import (AttackGoal, DiscriminatorNet, GeneratorNet,
                         PhaseSchedule, TrainingLog, train_attack)
from fewfool.seeding import substream
from fewfool.targets import train_target

REFERENCE_SEED = 7


@dataclass
class ReferenceRun:
    train: Dataset
    test: Dataset
    goal: AttackGoal
    mlp_target: object
    mlp_report: object
    tree_target: object
    tree_report: object
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    log: TrainingLog
    tree_generator: GeneratorNet
    tree_log: TrainingLog
    constraints: AttackConstraints
    train_seconds: float


def make_schedule(max_epochs: int = 2500) -> PhaseSchedule:
    return PhaseSchedule.desk_scale(max_epochs, bypass_threshold=0.95,
                                    changed_fraction=0.2)


def train_reference_attack(target, train, goal, seed=REFERENCE_SEED,
                           max_epochs=2500):
    gen = GeneratorNet(train.schema, eps2=1.0,
                       rng=substream(seed, "gan.generator_init"))
    disc = DiscriminatorNet(train.schema.dimension, target.n_classes,
                            rng=substream(seed, "gan.discriminator_init"))
    gen, log = train_attack(gen, disc, target, train, goal,
                            make_schedule(max_epochs), seed=seed)
    return gen, disc, log


@pytest.fixture(scope="session")
def reference() -> ReferenceRun:
    """Reference experiment: synthetic tabular data, MLP and tree targets."""
    t0 = time.perf_counter()
    full = synth_tabular(n=4000, d=20, mutable_count=16, margin=4.0,
                         seed=REFERENCE_SEED)
    train, test = split(full, SplitSpec(0.8, seed=REFERENCE_SEED, stratified=True))
    goal = AttackGoal("targeted", attack_class=1, target_class=0)

    mlp, mlp_report = train_target("mlp", train, {"seed": REFERENCE_SEED}, test=test)
    tree, tree_report = train_target("tree", train, {"seed": REFERENCE_SEED}, test=test)

    gen, disc, log = train_reference_attack(mlp, train, goal)
    tree_gen, _, tree_log = train_reference_attack(tree, train, goal)

    return ReferenceRun(
        train=train, test=test, goal=goal,
        mlp_target=mlp, mlp_report=mlp_report,
        tree_target=tree, tree_report=tree_report,
        generator=gen, discriminator=disc, log=log,
        tree_generator=tree_gen, tree_log=tree_log,
        constraints=AttackConstraints(eps1_fraction=0.25, eps2=1.0),
        train_seconds=time.perf_counter() - t0,
    )


@pytest.fixture(scope="session")
def tiny_problem():
    """Small separable dataset plus a logistic target, for oracle/DE tests."""
    full = synth_tabular(n=600, d=5, mutable_count=5, margin=5.0, seed=11)
    train, test = split(full, SplitSpec(0.8, seed=11, stratified=True))
    model, report = train_target("logistic", train, {"seed": 11}, test=test)
    goal = AttackGoal("targeted", attack_class=1, target_class=0)
    return train, test, model, goal
