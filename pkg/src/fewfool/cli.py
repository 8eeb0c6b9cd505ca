"""Command-line entry points: train-target, train-attack, evaluate, compare, grad-check.

Every run is driven by one JSON config file plus optional --set overrides;
all randomness flows from the config's seed through named substreams. Exit
codes: 0 success, 1 runtime failure, 2 invalid input, 3 not converged.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConstraints, bypass_value, evaluate_attack
from .baselines import DEConfig, de_attack
from .data import (DataError, Dataset, Feature, FeatureSchema, SplitSpec,
                   apply_scaler, load_idx_images, load_tabular, scale_minmax,
                   split, synth_tabular)
from .gan import (AttackGoal, DiscriminatorNet, GanConfigError, GeneratorNet,
                  LossWeights, PhaseSchedule, StopCondition, train_attack)
from .numerics import MLP, Tensor, cross_entropy_logits, grad_check
from .persist import PersistError, load_model, save_model
from .seeding import substream
from .targets import accuracy, load_target, save_target, train_target

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3

REPORT_FORMAT_VERSION = 1
OUT_DIR_ENV = "FEWFOOL_OUT"


class ConfigError(ValueError):
    pass


# -- config ------------------------------------------------------------------

_DEFAULTS = {
    "split": {"train_fraction": 0.8, "stratified": True},
    "constraints": {"eps1_fraction": None, "eps1": None, "eps2": 1.0,
                    "tau0": 1e-6, "enforce_eps1": False},
    "attack": {"max_epochs": 2500, "batch_size": 128, "gen_lr": 1e-3,
               "disc_lr": 1e-3, "warm_start_passes": 5, "val_fraction": 0.2,
               "bypass_threshold": 0.9, "changed_fraction": 0.075,
               "latent_dim": 64, "encoder_hidden": [128, 128],
               "head_hidden": [64], "disc_hidden": [128, 128], "phases": None},
    "compare": {"budget_k": 3, "pop_size": 40, "iterations": 150,
                "max_samples": 32, "timing_samples": 64},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _apply_override(cfg: dict, dotted: str, raw: str) -> None:
    *path, leaf = dotted.split(".")
    node = cfg
    for part in path:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {part} is not a table")
    try:
        node[leaf] = json.loads(raw)
    except json.JSONDecodeError:
        node[leaf] = raw  # bare strings are convenient on the command line


class RunConfig:
    """Validated run configuration plus its canonical digest."""

    def __init__(self, raw: dict):
        if "seed" not in raw:
            raise ConfigError("config must set an explicit seed (no wall-clock seeding)")
        cfg = {k: _merge(_DEFAULTS[k], raw.get(k, {})) if k in _DEFAULTS else raw.get(k)
               for k in set(raw) | set(_DEFAULTS)}
        self.raw = cfg
        self.seed = int(cfg["seed"])
        out = os.environ.get(OUT_DIR_ENV) or cfg.get("out_dir")
        if not out:
            raise ConfigError("config must set out_dir (or export "
                              f"{OUT_DIR_ENV})")
        self.out_dir = Path(out)
        self.digest = hashlib.sha256(
            json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
        self._validate()

    @classmethod
    def from_file(cls, path, overrides: list[str] = ()) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            _apply_override(raw, *item.split("=", 1))
        return cls(raw)

    def _validate(self) -> None:
        ds = self.raw.get("dataset")
        if not isinstance(ds, dict) or "kind" not in ds:
            raise ConfigError("config needs a dataset table with a kind")
        kind = ds["kind"]
        if kind == "synthetic":
            for key in ("n", "d", "mutable", "margin"):
                if key not in ds:
                    raise ConfigError(f"synthetic dataset needs {key!r}")
        elif kind == "tabular":
            if "path" not in ds or "features" not in ds:
                raise ConfigError("tabular dataset needs path and features")
            if not Path(ds["path"]).exists():
                raise ConfigError(f"dataset path does not exist: {ds['path']}")
        elif kind == "idx":
            for key in ("images", "labels"):
                if key not in ds:
                    raise ConfigError(f"idx dataset needs {key!r}")
                if not Path(ds[key]).exists():
                    raise ConfigError(f"dataset path does not exist: {ds[key]}")
        else:
            raise ConfigError(f"unknown dataset kind {kind!r}")

        tgt = self.raw.get("target")
        if not isinstance(tgt, dict) or "kind" not in tgt:
            raise ConfigError("config needs a target table with a kind")

        goal = self.raw.get("goal")
        if not isinstance(goal, dict) or "mode" not in goal or "attack_class" not in goal:
            raise ConfigError("config needs a goal table with mode and attack_class")
        self.goal = AttackGoal(goal["mode"], int(goal["attack_class"]),
                               goal.get("target_class"))

        c = self.raw["constraints"]
        self.constraints = AttackConstraints(
            eps1=c["eps1"], eps1_fraction=c["eps1_fraction"], eps2=c["eps2"],
            tau0=c["tau0"], enforce_eps1=c["enforce_eps1"])

    # -- derived objects --------------------------------------------------

    def datasets(self) -> tuple[Dataset, Dataset]:
        """(train, test), scaled to [0,1]."""
        ds = self.raw["dataset"]
        sp = self.raw["split"]
        spec = SplitSpec(sp["train_fraction"], self.seed, sp["stratified"])
        kind = ds["kind"]
        if kind == "synthetic":
            full = synth_tabular(ds["n"], ds["d"], ds["mutable"], ds["margin"],
                                 self.seed, n_informative=ds.get("informative"))
            return split(full, spec)
        if kind == "tabular":
            feats = tuple(Feature(f["name"], f.get("kind", "continuous"),
                                  f.get("mutable", f.get("kind", "continuous")
                                        == "continuous"))
                          for f in ds["features"])
            full = load_tabular(ds["path"], FeatureSchema(feats),
                                ds.get("delimiter", ","),
                                labels=tuple(ds["labels"]) if "labels" in ds
                                else None)
            train, test = split(full, spec)
            train = scale_minmax(train)
            return train, apply_scaler(test, train.scaler)
        if kind == "idx":
            full = load_idx_images(ds["images"], ds["labels"])
            if "test_images" in ds:
                test = load_idx_images(ds["test_images"], ds["test_labels"])
                return full, test
            return split(full, spec)
        raise ConfigError(f"unknown dataset kind {kind!r}")

    def schedule(self) -> PhaseSchedule:
        a = self.raw["attack"]
        if a["phases"] is not None:
            phases = tuple((int(e), LossWeights(*w)) for e, w in a["phases"])
            return PhaseSchedule(phases, StopCondition(
                a["bypass_threshold"], a["changed_fraction"], a["max_epochs"]))
        return PhaseSchedule.desk_scale(
            a["max_epochs"], bypass_threshold=a["bypass_threshold"],
            changed_fraction=a["changed_fraction"])

    def target_path(self) -> Path:
        return self.out_dir / f"target-{self.raw['target']['kind']}.json"

    def generator_path(self) -> Path:
        return self.out_dir / "generator.json"

    def discriminator_path(self) -> Path:
        return self.out_dir / "discriminator.json"


# -- report plumbing -----------------------------------------------------------


def _report_row(cfg: RunConfig, kind: str, acc: float, metrics, extra: dict | None = None) -> dict:
    goal = cfg.goal
    row = {
        "model_kind": kind,
        "goal": goal.mode if goal.mode == "untargeted"
                else f"targeted:{goal.target_class}",
        "acc": round(acc, 6),
        "acc_star": round(metrics.post_attack_accuracy, 6),
        "len_mean": round(metrics.mean_changed, 6),
        "bypass": round(metrics.bypass_rate, 6),
        "time_per_sample_ms": round(metrics.mean_time_per_sample_s * 1e3, 4),
        "seed": cfg.seed,
        "eps1_violation_fraction": round(metrics.eps1_violation_fraction, 6),
        "n_samples": metrics.n_samples,
        "config_digest": cfg.digest,
        "format_version": REPORT_FORMAT_VERSION,
        "version": __version__,
    }
    if extra:
        row.update(extra)
    return row


def _append_jsonl(path: Path, row: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(row) + "\n")


# -- commands -------------------------------------------------------------------


def cmd_train_target(cfg: RunConfig) -> int:
    train, test = cfg.datasets()
    tgt = dict(cfg.raw["target"])
    kind = tgt.pop("kind")
    tgt.setdefault("seed", cfg.seed)
    model, report = train_target(kind, train, tgt, test=test)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_target(cfg.target_path(), model)
    report_doc = {"kind": kind, "train_accuracy": report.train_accuracy,
                  "test_accuracy": report.test_accuracy,
                  "wall_time_s": report.wall_time_s, "seed": cfg.seed,
                  "config_digest": cfg.digest}
    (cfg.out_dir / f"target-{kind}-report.json").write_text(
        json.dumps(report_doc, sort_keys=True) + "\n")
    print(f"trained {kind}: train acc {report.train_accuracy:.4f}, "
          f"test acc {report.test_accuracy:.4f} -> {cfg.target_path()}")
    return EXIT_OK


def cmd_train_attack(cfg: RunConfig) -> int:
    if not cfg.target_path().exists():
        raise ConfigError(f"target model not found: {cfg.target_path()} "
                          "(run train-target first)")
    blackbox = load_target(cfg.target_path())
    train, _ = cfg.datasets()
    a = cfg.raw["attack"]
    gen = GeneratorNet(train.schema, eps2=cfg.constraints.eps2,
                       latent_dim=a["latent_dim"],
                       encoder_hidden=tuple(a["encoder_hidden"]),
                       head_hidden=tuple(a["head_hidden"]),
                       rng=substream(cfg.seed, "gan.generator_init"))
    disc = DiscriminatorNet(train.schema.dimension, blackbox.n_classes,
                            hidden=tuple(a["disc_hidden"]),
                            rng=substream(cfg.seed, "gan.discriminator_init"))
    gen, log = train_attack(gen, disc, blackbox, train, cfg.goal, cfg.schedule(),
                            cfg.seed, batch_size=a["batch_size"],
                            gen_lr=a["gen_lr"], disc_lr=a["disc_lr"],
                            warm_start_passes=a["warm_start_passes"],
                            val_fraction=a["val_fraction"],
                            tau0=cfg.constraints.tau0)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_model(cfg.generator_path(), "generator", gen.to_payload())
    save_model(cfg.discriminator_path(), "discriminator", disc.to_payload())
    log.to_jsonl(cfg.out_dir / "train-log.jsonl")
    (cfg.out_dir / "train-summary.json").write_text(
        json.dumps(log.summary(), sort_keys=True) + "\n")
    last = log.records[-1] if log.records else None
    status = "converged" if log.converged else "max epochs reached (best-so-far saved)"
    tail = (f", final bypass {last.bypass:.3f}, mean L0 {last.mean_l0:.2f}"
            if last else "")
    print(f"{status} after {log.epochs_run} epochs{tail}")
    return EXIT_OK if log.converged else EXIT_NOT_CONVERGED


def _load_generator(cfg: RunConfig) -> GeneratorNet:
    if not cfg.generator_path().exists():
        raise ConfigError(f"generator not found: {cfg.generator_path()} "
                          "(run train-attack first)")
    kind, payload = load_model(cfg.generator_path())
    if kind != "generator":
        raise ConfigError(f"{cfg.generator_path()}: not a generator file")
    return GeneratorNet.from_payload(payload)


def cmd_evaluate(cfg: RunConfig) -> int:
    blackbox = load_target(cfg.target_path()) if cfg.target_path().exists() else None
    if blackbox is None:
        raise ConfigError(f"target model not found: {cfg.target_path()}")
    gen = _load_generator(cfg)
    _, test = cfg.datasets()
    if test.schema.dimension != gen.dimension:
        raise ConfigError(f"generator dimension {gen.dimension} does not match "
                          f"dataset dimension {test.schema.dimension}")
    attack_subset = test.class_subset(cfg.goal.attack_class)
    metrics = evaluate_attack(gen, blackbox, attack_subset, cfg.constraints, cfg.goal)
    row = _report_row(cfg, cfg.raw["target"]["kind"], accuracy(blackbox, test), metrics)
    _append_jsonl(cfg.out_dir / "metrics.jsonl", row)
    print(json.dumps(row))
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    blackbox = load_target(cfg.target_path())
    gen = _load_generator(cfg)
    _, test = cfg.datasets()
    attack_subset = test.class_subset(cfg.goal.attack_class)
    cmp_cfg = cfg.raw["compare"]
    n = min(cmp_cfg["max_samples"], len(attack_subset))
    if n == 0:
        raise ConfigError("no attack-class samples in the test split")
    subset = attack_subset.subset(np.arange(n))

    metrics = evaluate_attack(gen, blackbox, subset, cfg.constraints, cfg.goal,
                              timing_samples=cmp_cfg["timing_samples"])
    gan_row = _report_row(cfg, cfg.raw["target"]["kind"],
                          accuracy(blackbox, test), metrics,
                          extra={"attack": "masked-gan"})

    de_conf = DEConfig(k=cmp_cfg["budget_k"], pop_size=cmp_cfg["pop_size"],
                       iterations=cmp_cfg["iterations"], seed=cfg.seed)
    fooled = 0
    queries = 0
    de_time = 0.0
    preds_att = []
    for i in range(n):
        result = de_attack(blackbox, subset.sample(i), subset.schema, cfg.goal,
                           DEConfig(k=de_conf.k, pop_size=de_conf.pop_size,
                                    iterations=de_conf.iterations,
                                    seed=cfg.seed + i))
        fooled += int(result.fooled)
        queries += result.queries
        de_time += result.wall_time_s
        preds_att.append(result.example.attacked)
    de_attacked = np.vstack(preds_att)
    de_preds = np.argmax(blackbox.predict_proba(de_attacked), axis=1)
    f_orig = float(np.mean(np.argmax(blackbox.predict_proba(subset.X), axis=1)
                           == cfg.goal.attack_class))
    f_att = float(np.mean(de_preds == cfg.goal.attack_class))
    de_bypass = bypass_value(f_orig, f_att)
    if cfg.goal.mode == "targeted":
        de_acc_star = float(np.mean(de_preds != cfg.goal.target_class))
    else:
        de_acc_star = float(np.mean(de_preds == cfg.goal.attack_class))

    de_row = {
        "model_kind": cfg.raw["target"]["kind"],
        "goal": gan_row["goal"],
        "acc": gan_row["acc"],
        "acc_star": round(de_acc_star, 6),
        "len_mean": float(de_conf.k),
        "bypass": round(de_bypass, 6),
        "time_per_sample_ms": round(de_time / n * 1e3, 4),
        "seed": cfg.seed,
        "attack": "differential-evolution",
        "queries": queries,
        "budget_k": de_conf.k,
        "iterations": de_conf.iterations,
        "n_samples": n,
        "config_digest": cfg.digest,
        "format_version": REPORT_FORMAT_VERSION,
    }
    speedup = de_row["time_per_sample_ms"] / max(gan_row["time_per_sample_ms"], 1e-9)
    _append_jsonl(cfg.out_dir / "compare.jsonl", gan_row)
    _append_jsonl(cfg.out_dir / "compare.jsonl", de_row)
    print(json.dumps(gan_row))
    print(json.dumps(de_row))
    print(f"amortized speedup: {speedup:.1f}x "
          f"(gan {gan_row['time_per_sample_ms']:.3f} ms/sample vs "
          f"de {de_row['time_per_sample_ms']:.1f} ms/sample)")
    return EXIT_OK


def cmd_grad_check(seeds: int, tolerance: float) -> int:
    """Finite-difference audit of every layer and loss used by the pipeline."""
    failures = 0
    for seed in range(seeds):
        rng = substream(seed, "gradcheck.cli")
        x = Tensor(rng.uniform(-2, 2, size=(4, 6)))
        for activation in ("relu", "sigmoid", "tanh", "identity", "softmax"):
            net = MLP([6, 8, 3], hidden_activation="relu",
                      output_activation=activation, rng=rng, name=activation)
            labels = rng.integers(0, 3, size=4)

            def loss_fn(net=net, labels=labels, activation=activation):
                out = net(x)
                if activation == "softmax":
                    return (out * out).mean()
                return cross_entropy_logits(out, labels)

            report = grad_check(loss_fn, net.parameters(), tolerance=tolerance)
            if not report.passed:
                failures += 1
                print(f"seed {seed} {activation}: FAIL "
                      f"(max rel error {report.max_rel_error:.2e})")
    if failures == 0:
        print(f"grad check passed: {seeds} seeds x 5 layer types "
              f"at tolerance {tolerance:g}")
        return EXIT_OK
    print(f"{failures} grad-check failures")
    return EXIT_RUNTIME


# -- entry point -----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewfool",
        description="Sparse adversarial perturbations against black-box "
                    "classifiers via a masked-generator GAN.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_command(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to the JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path, JSON value)")
        return p

    add_config_command("train-target", "train a black-box target classifier")
    add_config_command("train-attack", "train the masked-generator attack GAN")
    add_config_command("evaluate", "evaluate the trained generator on the test split")
    add_config_command("compare", "side-by-side with the differential-evolution baseline")

    g = sub.add_parser("grad-check", help="finite-difference audit of the autodiff core")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--tolerance", type=float, default=1e-4)
    return parser


_COMMANDS = {
    "train-target": cmd_train_target,
    "train-attack": cmd_train_attack,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "grad-check":
            return cmd_grad_check(args.seeds, args.tolerance)
        cfg = RunConfig.from_file(args.config, args.set)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, DataError, GanConfigError, PersistError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
