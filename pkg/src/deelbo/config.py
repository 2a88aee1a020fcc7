"""Experiment configuration: an INI-style ``key = value`` file with one section per concern.

Example::

    [model]
    hidden_sizes = 64
    repr_dim = 64

    [synthetic]
    seed = 0
    train_per_class = 25

    [train]
    steps = 1000
    lr_grid = 0.1, 0.01, 0.001, 0.0001

    [prior]
    family = l2sp
    checkpoint = prior.ckpt

Data comes either from a ``[data]`` section (``source_csv``,
``target_train_csv``, ``target_test_csv``) or from ``[synthetic]``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from deelbo import dataio, gridsearch, trainer
from deelbo.errors import ConfigurationError
from deelbo.nnet import ModelSpec
from deelbo.objective import KAPPA_D_OVER_N

RESULTS_ENV = "DEELBO_RESULTS_DIR"
PRIOR_FAMILIES = ("l2zero", "l2sp", "ptyl")
METHODS = ("de-elbo", "map-gs")


def _floats(text):
    """Comma-separated numbers; an item ``logspace:lo:hi:n`` expands in place."""
    values = []
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if item.startswith("logspace:"):
            _, lo, hi, n = item.split(":")
            values.extend(float(v) for v in np.logspace(float(lo), float(hi), int(n)))
        elif item:
            values.append(float(item))
    return tuple(values)


def _ints(text):
    return tuple(int(v) for v in text.replace(";", ",").split(",") if v.strip())


@dataclass
class SyntheticSpec:
    seed: int = 0
    num_classes: int = 4
    input_dim: int = 20
    latent_dim: int = 4
    clusters_per_class: int = 2
    n_source: int = 2000
    pool_per_class: int = 200
    n_test: int = 2000
    separation: float = 2.5
    shift: float = 0.3
    noise: float = 0.6
    train_per_class: int = 25


@dataclass
class PretrainSpec:
    steps: int = 1500
    lr: float = 0.05
    batch_size: int = 64
    weight_decay: float = 1e-4
    swag_k: int = 0
    snapshot_interval: int = 25
    warmup_fraction: float = 0.5
    swag_steps: int = 500


@dataclass
class ExperimentConfig:
    hidden_sizes: tuple = (64,)
    repr_dim: int = 64
    input_dim: int | None = None
    num_classes: int | None = None
    source_csv: str | None = None
    target_train_csv: str | None = None
    target_test_csv: str | None = None
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    prior_family: str = "l2sp"
    prior_checkpoint: str | None = None
    method: str = "de-elbo"
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    lr_grid: tuple = trainer.DEFAULT_LR_GRID
    grid: gridsearch.GridSpec = field(default_factory=gridsearch.GridSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    out: str | None = None
    seed: int = 0
    workers: int = 1
    threads: int = 1

    def validate(self):
        if self.prior_family not in PRIOR_FAMILIES:
            raise ConfigurationError(f"prior family must be one of {PRIOR_FAMILIES}")
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        if self.synthetic is None and not self.target_train_csv:
            raise ConfigurationError("need either a [synthetic] section or data.target_train_csv")
        if self.workers < 1 or self.threads < 1:
            raise ConfigurationError("workers and threads must be >= 1")

    def output_dir(self):
        out = self.out or os.environ.get(RESULTS_ENV) or "results"
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def model_spec(self, input_dim, num_classes):
        return ModelSpec(
            self.input_dim or input_dim,
            self.hidden_sizes,
            self.repr_dim,
            self.num_classes or num_classes,
        )

    def load_source(self):
        if self.source_csv:
            return dataio.load_csv(self.source_csv)
        if self.synthetic is None:
            raise ConfigurationError("no source data configured")
        return self._task().source

    def load_target(self, seed):
        """Target training set for ``seed`` and the fixed test set (both raw)."""
        if self.target_train_csv:
            train = dataio.load_csv(self.target_train_csv, self.num_classes)
            C = self.num_classes or train.num_classes
            test = dataio.load_csv(self.target_test_csv, C) if self.target_test_csv else None
            if test is not None:
                C = max(C, test.num_classes)
                train = dataio.Dataset(train.X, train.y, C)
                test = dataio.Dataset(test.X, test.y, C)
            return train, test
        task = self._task()
        syn = self.synthetic
        train = dataio.balanced_subsample(task.target_train, syn.train_per_class, seed)
        return train, task.target_test

    def _task(self):
        syn = self.synthetic
        return dataio.make_transfer_task(
            num_classes=syn.num_classes,
            input_dim=syn.input_dim,
            latent_dim=syn.latent_dim,
            clusters_per_class=syn.clusters_per_class,
            n_source=syn.n_source,
            n_target_per_class=syn.pool_per_class,
            n_test=syn.n_test,
            separation=syn.separation,
            shift=syn.shift,
            noise=syn.noise,
            seed=syn.seed,
        )


def load_config(path=None):
    """Parse a config file (or return defaults when ``path`` is None)."""
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    try:
        _apply(cfg, parser)
    except (ValueError, KeyError) as exc:
        raise ConfigurationError(f"bad value in {path}: {exc}") from exc
    return cfg


def _apply(cfg, parser):
    if parser.has_section("model"):
        m = parser["model"]
        if "hidden_sizes" in m:
            cfg.hidden_sizes = _ints(m["hidden_sizes"])
        cfg.repr_dim = m.getint("repr_dim", cfg.repr_dim)
        if "input_dim" in m:
            cfg.input_dim = m.getint("input_dim")
        if "num_classes" in m:
            cfg.num_classes = m.getint("num_classes")

    if parser.has_section("data"):
        d = parser["data"]
        cfg.source_csv = d.get("source_csv")
        cfg.target_train_csv = d.get("target_train_csv")
        cfg.target_test_csv = d.get("target_test_csv")
        if cfg.target_train_csv:
            cfg.synthetic = None

    if parser.has_section("synthetic"):
        s = parser["synthetic"]
        syn = SyntheticSpec()
        for name, kind in SyntheticSpec.__annotations__.items():
            if name in s:
                setattr(syn, name, float(s[name]) if kind == "float" else int(s[name]))
        cfg.synthetic = syn

    if parser.has_section("prior"):
        p = parser["prior"]
        cfg.prior_family = p.get("family", cfg.prior_family)
        cfg.prior_checkpoint = p.get("checkpoint", cfg.prior_checkpoint)

    if parser.has_section("run"):
        r = parser["run"]
        cfg.seed = r.getint("seed", cfg.seed)
        cfg.method = r.get("method", cfg.method)
        cfg.out = r.get("out", cfg.out)
        cfg.workers = r.getint("workers", cfg.workers)
        cfg.threads = r.getint("threads", cfg.threads)

    changes = {}
    if parser.has_section("train"):
        t = parser["train"]
        for name in ("steps", "batch_size", "mc_train", "mc_final"):
            if name in t:
                changes[name] = t.getint(name)
        for name in ("lr_init", "momentum", "sigma_init"):
            if name in t:
                changes[name] = t.getfloat(name)
        if "kappa" in t:
            changes["kappa"] = parse_kappa(t["kappa"])
        if "lr_grid" in t:
            cfg.lr_grid = _floats(t["lr_grid"])
    cfg.train = cfg.train.replace(**changes)

    if parser.has_section("grid"):
        g = parser["grid"]
        cfg.grid = gridsearch.GridSpec(
            lr_grid=_floats(g["lr_grid"]) if "lr_grid" in g else cfg.grid.lr_grid,
            penalty_grid=_floats(g["penalty_grid"]) if "penalty_grid" in g else cfg.grid.penalty_grid,
            lambda_grid=_floats(g["lambda_grid"]) if "lambda_grid" in g else cfg.grid.lambda_grid,
        )

    if parser.has_section("pretrain"):
        p = parser["pretrain"]
        pre = cfg.pretrain
        for name, kind in PretrainSpec.__annotations__.items():
            if name in p:
                setattr(pre, name, float(p[name]) if kind == "float" else int(p[name]))


def parse_kappa(text):
    text = str(text).strip()
    if text.lower() in ("d/n", "d-over-n", "d_over_n"):
        return KAPPA_D_OVER_N
    value = float(text)
    if value < 1.0:
        raise ConfigurationError(f"kappa must be >= 1, got {value}")
    return value
