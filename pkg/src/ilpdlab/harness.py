"""Experiment orchestration: config files, model training with a
content-addressed cache, transfer evaluation, and CSV report emission.

Config files are flat key = value text; '#' starts a comment.  Fractions
like 8/255 are accepted wherever a float is.  See docs in the README for
the full key list.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, run_attack
from .data import Dataset, generate_synthetic, train_test_split
from .network import (
    ARCHITECTURES,
    Model,
    init_params,
    load_model,
    save_model,
    train_head,
    train_sgd,
)

CACHE_ENV = "ILPDLAB_CACHE"


class ConfigError(ValueError):
    """Invalid experiment config; message names the offending field."""


@dataclass(frozen=True)
class VictimSpec:
    arch: str
    seed: int
    shared_h: bool = False  # reuse the substitute's feature layers


@dataclass
class ExperimentConfig:
    data_seed: int = 0
    data_n: int = 5000
    data_classes: int = 8
    data_size: int = 16
    data_noise: float = 0.5
    train_count: int = 4000
    substitute_arch: str = "smallnet"
    substitute_seed: int = 1
    victims: tuple = ()
    train_epochs: int = 30
    train_lr: float = 0.1
    train_batch: int = 64
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval_count: int = 250
    output_dir: str = "out"
    cache_dir: str | None = None

    def fingerprint(self):
        blob = json.dumps(
            {
                "data": [self.data_seed, self.data_n, self.data_classes, self.data_size,
                         self.data_noise, self.train_count],
                "sub": [self.substitute_arch, self.substitute_seed],
                "victims": [[v.arch, v.seed, v.shared_h] for v in self.victims],
                "train": [self.train_epochs, self.train_lr, self.train_batch],
                "attack": {k: v for k, v in self.attack.__dict__.items()},
                "eval": self.eval_count,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_number(text, key):
    text = text.strip()
    try:
        if "/" in text:
            num, den = text.split("/")
            return float(num) / float(den)
        return float(text)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"{key}: not a number: {text!r}") from e


def parse_config_text(text):
    """Flat key = value lines into an ExperimentConfig, validating every
    field and reporting errors by field path."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()

    cfg = ExperimentConfig()

    def take_int(key, default, minimum=None):
        if key not in raw:
            return default
        v = raw.pop(key)
        try:
            iv = int(v)
        except ValueError:
            raise ConfigError(f"{key}: not an integer: {v!r}")
        if minimum is not None and iv < minimum:
            raise ConfigError(f"{key}: must be >= {minimum}, got {iv}")
        return iv

    def take_float(key, default):
        if key not in raw:
            return default
        return parse_number(raw.pop(key), key)

    cfg.data_seed = take_int("data.seed", cfg.data_seed)
    cfg.data_n = take_int("data.n", cfg.data_n, 2)
    cfg.data_classes = take_int("data.classes", cfg.data_classes, 2)
    cfg.data_size = take_int("data.size", cfg.data_size, 8)
    cfg.data_noise = take_float("data.noise", cfg.data_noise)
    cfg.train_count = take_int("data.train_count", cfg.train_count, 1)
    cfg.substitute_arch = raw.pop("substitute.arch", cfg.substitute_arch)
    if cfg.substitute_arch not in ARCHITECTURES:
        raise ConfigError(f"substitute.arch: unknown architecture {cfg.substitute_arch!r}")
    cfg.substitute_seed = take_int("substitute.seed", cfg.substitute_seed)
    cfg.train_epochs = take_int("train.epochs", cfg.train_epochs, 0)
    cfg.train_lr = take_float("train.lr", cfg.train_lr)
    cfg.train_batch = take_int("train.batch", cfg.train_batch, 1)
    cfg.eval_count = take_int("eval.count", cfg.eval_count, 1)
    cfg.output_dir = raw.pop("output.dir", cfg.output_dir)
    cfg.cache_dir = raw.pop("cache.dir", cfg.cache_dir)

    if "victims" in raw:
        victims = []
        for item in raw.pop("victims").split(","):
            item = item.strip()
            if not item:
                continue
            parts = item.split(":")
            if len(parts) not in (2, 3):
                raise ConfigError(f"victims: expected arch:seed[:shared_h], got {item!r}")
            arch, seed = parts[0], parts[1]
            if arch not in ARCHITECTURES:
                raise ConfigError(f"victims: unknown architecture {arch!r}")
            try:
                seed = int(seed)
            except ValueError:
                raise ConfigError(f"victims: seed not an integer in {item!r}")
            shared = len(parts) == 3 and parts[2] == "shared_h"
            victims.append(VictimSpec(arch, seed, shared))
        cfg.victims = tuple(victims)

    akw = {}
    for key, attr in [
        ("attack.epsilon", "epsilon"), ("attack.eta", "eta"), ("attack.gamma", "gamma"),
        ("attack.momentum_mu", "momentum_mu"), ("attack.noise_sigma", "noise_sigma"),
    ]:
        if key in raw:
            akw[attr] = parse_number(raw.pop(key), key)
    for key, attr in [
        ("attack.steps", "steps"), ("attack.guide_steps", "guide_steps"),
        ("attack.split", "split"), ("attack.linbp_from", "linbp_from"),
        ("attack.seed", "seed"),
    ]:
        if key in raw:
            v = raw.pop(key)
            try:
                akw[attr] = int(v)
            except ValueError:
                raise ConfigError(f"{key}: not an integer: {v!r}")
    if "attack.method" in raw:
        akw["method"] = raw.pop("attack.method")
    try:
        cfg.attack = replace(cfg.attack, **akw)
    except ValueError as e:
        raise ConfigError(f"attack config: {e}") from e

    if raw:
        raise ConfigError(f"unknown config keys: {sorted(raw)}")
    return cfg


def parse_config_file(path):
    with open(path) as f:
        return parse_config_text(f.read())


# ---------------------------------------------------------------------------
# model preparation with caching


def _cache_dir(cfg):
    return cfg.cache_dir or os.environ.get(CACHE_ENV) or os.path.join(cfg.output_dir, "cache")


def _train_key(cfg, arch, seed, shared_h):
    blob = json.dumps([
        arch, seed, bool(shared_h), cfg.data_seed, cfg.data_n, cfg.data_classes,
        cfg.data_size, cfg.data_noise, cfg.train_count, cfg.train_epochs,
        cfg.train_lr, cfg.train_batch,
        cfg.substitute_seed if shared_h else None,
        cfg.attack.split if shared_h else None,
    ])
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def load_dataset(cfg) -> tuple[Dataset, Dataset]:
    ds = generate_synthetic(cfg.data_seed, cfg.data_n, cfg.data_classes,
                            cfg.data_size, cfg.data_noise)
    return train_test_split(ds, cfg.train_count)


def prepare_model(cfg, arch, seed, train_ds, shared_h=False, substitute=None):
    """Train (or load from the content-addressed cache) one model."""
    cache = _cache_dir(cfg)
    os.makedirs(cache, exist_ok=True)
    path = os.path.join(cache, _train_key(cfg, arch, seed, shared_h) + ".model")
    if os.path.exists(path):
        spec, params = load_model(path)
        return Model(spec, params)
    spec = ARCHITECTURES[arch](cfg.data_classes, cfg.data_size)
    if shared_h:
        if substitute is None:
            raise ConfigError("shared-h victim requires the substitute model")
        if arch != cfg.substitute_arch:
            raise ConfigError("shared-h victim must match the substitute architecture")
        beta = cfg.attack.split
        if beta is None:
            raise ConfigError("shared-h victim requires attack.split")
        params = train_head(spec, substitute.params, train_ds, cfg.train_epochs,
                            cfg.train_lr, beta, head_seed=seed, batch_size=cfg.train_batch)
    else:
        params = train_sgd(spec, init_params(spec, seed), train_ds, cfg.train_epochs,
                           cfg.train_lr, batch_size=cfg.train_batch, seed=seed)
    save_model(spec, params, path)
    return Model(spec, params)


# ---------------------------------------------------------------------------
# transfer evaluation


@dataclass
class TransferReport:
    victim_names: list
    per_victim_rate: list
    per_victim_clean_error: list
    per_victim_rate_filtered: list  # over substitute-correct examples only
    average_rate: float
    substitute_whitebox_rate: float
    n_examples: int
    config_fingerprint: str = ""

    def rows(self):
        for name, rate, clean, filt in zip(
            self.victim_names, self.per_victim_rate,
            self.per_victim_clean_error, self.per_victim_rate_filtered,
        ):
            yield name, rate, clean, filt


def _misclassified(model, x, y):
    """Strict success rule: the true class must lose the argmax, and a tie
    that includes the true class does not count."""
    logits = model.forward(x)
    top = logits.max(axis=1)
    true = logits[np.arange(len(y)), y]
    return true < top


def transfer_eval(substitute: Model, victims, dataset: Dataset, attack_cfg: AttackConfig,
                  victim_names=None, fingerprint="", result=None):
    """Craft perturbations on the substitute, count victim misclassification.

    Reports, per victim: unfiltered success rate (primary), clean error
    rate, and the rate over examples the substitute classifies correctly.
    A precomputed AttackResult may be passed to avoid re-running the attack.
    """
    x, y = dataset.images, dataset.labels
    if result is None:
        result = run_attack(substitute, x, y, attack_cfg)
    adv = x + result.delta
    sub_correct = ~_misclassified(substitute, x, y)
    names = list(victim_names) if victim_names else [f"victim{i}" for i in range(len(victims))]
    rates, cleans, filtered = [], [], []
    for victim in victims:
        success = _misclassified(victim, adv, y)
        rates.append(float(success.mean()))
        cleans.append(float(_misclassified(victim, x, y).mean()))
        filtered.append(float(success[sub_correct].mean()) if sub_correct.any() else 0.0)
    return TransferReport(
        victim_names=names,
        per_victim_rate=rates,
        per_victim_clean_error=cleans,
        per_victim_rate_filtered=filtered,
        average_rate=float(np.mean(rates)) if rates else 0.0,
        substitute_whitebox_rate=float(_misclassified(substitute, adv, y).mean()),
        n_examples=len(y),
        config_fingerprint=fingerprint,
    )


# ---------------------------------------------------------------------------
# report / trace emission


def write_report_csv(report: TransferReport, path):
    with open(path, "w") as f:
        f.write("victim,success_rate,clean_error,success_rate_substitute_correct\n")
        for name, rate, clean, filt in report.rows():
            f.write(f"{name},{rate:.10f},{clean:.10f},{filt:.10f}\n")
        f.write(f"average,{report.average_rate:.10f},,\n")


def write_trace_csv(result, path):
    """Flat per-iteration trace: one row per (example, iteration); empty
    columns where an attack does not record that quantity."""
    trace = result.trace
    iters = len(trace.loss)
    n = len(trace.loss[0]) if iters else 0
    with open(path, "w") as f:
        f.write("example,iteration,loss,feature_norm,projection,cosine\n")
        for j in range(iters):
            for i in range(n):
                cells = [str(i), str(j), f"{np.atleast_1d(trace.loss[j])[i]:.8f}"]
                for col in (trace.feature_norm, trace.projection, trace.cosine):
                    cells.append(f"{np.atleast_1d(col[j])[i]:.8f}" if j < len(col) else "")
                f.write(",".join(cells) + "\n")


def write_summary(report: TransferReport, cfg, path):
    lines = [
        f"config fingerprint: {report.config_fingerprint}",
        f"examples attacked: {report.n_examples}",
        f"attack: {cfg.attack.method} eps={cfg.attack.epsilon:.6f} eta={cfg.attack.eta:.6f} "
        f"steps={cfg.attack.steps} gamma={cfg.attack.gamma} sigma={cfg.attack.noise_sigma}",
        f"substitute white-box success: {report.substitute_whitebox_rate:.4f}",
        "",
        f"{'victim':<16}{'success':>10}{'clean err':>11}{'filtered':>10}",
    ]
    for name, rate, clean, filt in report.rows():
        lines.append(f"{name:<16}{rate:>10.4f}{clean:>11.4f}{filt:>10.4f}")
    lines.append(f"{'average':<16}{report.average_rate:>10.4f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def run_experiment(config_path):
    """Train/load everything the config names, run the attack, and write
    report.csv, trace.csv and summary.txt into the output directory.
    Re-running with the same config hits the model cache and reproduces
    byte-identical reports."""
    cfg = parse_config_file(config_path)
    if not cfg.victims:
        raise ConfigError("victims: at least one victim is required")
    os.makedirs(cfg.output_dir, exist_ok=True)
    train_ds, test_ds = load_dataset(cfg)
    substitute = prepare_model(cfg, cfg.substitute_arch, cfg.substitute_seed, train_ds)
    victims, names = [], []
    for v in cfg.victims:
        victims.append(prepare_model(cfg, v.arch, v.seed, train_ds,
                                     shared_h=v.shared_h, substitute=substitute))
        names.append(f"{v.arch}-{v.seed}" + ("-sharedh" if v.shared_h else ""))
    subset = test_ds.slice(0, min(cfg.eval_count, len(test_ds)))
    result = run_attack(substitute, subset.images, subset.labels, cfg.attack)
    report = transfer_eval(substitute, victims, subset, cfg.attack,
                           victim_names=names, fingerprint=cfg.fingerprint(), result=result)
    write_report_csv(report, os.path.join(cfg.output_dir, "report.csv"))
    write_trace_csv(result, os.path.join(cfg.output_dir, "trace.csv"))
    write_summary(report, cfg, os.path.join(cfg.output_dir, "summary.txt"))
    return report
