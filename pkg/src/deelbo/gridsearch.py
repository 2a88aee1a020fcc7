"""MAP + grid search baseline with a class-balanced validation holdout."""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from deelbo import nnet
from deelbo import objective as obj
from deelbo import trainer
from deelbo.errors import ConfigurationError, DataFormatError, TrainingDivergedError

DEFAULT_PENALTY_GRID = (0.01, 0.001, 0.0001, 1e-5, 1e-6, 0.0)
DEFAULT_PTYL_LAMBDA_GRID = tuple(np.logspace(0.0, 9.0, 10))
TABLE_COLUMNS = ("lr", "alpha", "beta_or_lambda", "val_nll", "val_acc", "seconds")


@dataclass(frozen=True)
class GridSpec:
    """Candidate values.

    For L2-zero / L2-SP each ``penalty_grid`` entry sets alpha/N = beta/N.
    For PTYL, ``lambda_grid`` holds the backbone prior scales (alpha = 1/lam)
    and ``penalty_grid`` holds the head penalty 1/(tau N).
    """

    lr_grid: tuple = trainer.DEFAULT_LR_GRID
    penalty_grid: tuple = DEFAULT_PENALTY_GRID
    lambda_grid: tuple = DEFAULT_PTYL_LAMBDA_GRID

    def __post_init__(self):
        for name in ("lr_grid", "penalty_grid", "lambda_grid"):
            values = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, values)
        if not self.lr_grid or not self.penalty_grid:
            raise ConfigurationError("grids must be nonempty")
        if any(v < 0 for v in self.penalty_grid) or any(v <= 0 for v in self.lr_grid):
            raise ConfigurationError("penalties must be >= 0 and learning rates > 0")
        if any(v <= 0 for v in self.lambda_grid):
            raise ConfigurationError("lambda grid values must be positive")

    def configs(self, prior_kind):
        """Grid points as dicts with ``lr``, ``alpha_over_n``, ``beta_over_n``, ``lam``."""
        out = []
        if prior_kind == "ptyl":
            if not self.lambda_grid:
                raise ConfigurationError("PTYL needs a nonempty lambda grid")
            for lr, lam, pen in itertools.product(self.lr_grid, self.lambda_grid, self.penalty_grid):
                out.append({"lr": lr, "lam": lam, "alpha_over_n": None, "beta_over_n": pen})
        else:
            for lr, pen in itertools.product(self.lr_grid, self.penalty_grid):
                out.append({"lr": lr, "lam": None, "alpha_over_n": pen, "beta_over_n": pen})
        return out


def map_hyperparams(config, N):
    if config["lam"] is not None:
        alpha = 1.0 / config["lam"]
    else:
        alpha = config["alpha_over_n"] * N
    return obj.MapHyperparams(alpha, config["beta_over_n"] * N)


def regularization_key(config, N):
    """Larger means stronger regularization."""
    hp = map_hyperparams(config, N)
    return (hp.alpha, hp.beta)


def split_train_val(data, fraction=0.2, seed=0):
    """Class-stratified holdout: ``floor(fraction * n_c)`` of each class goes to validation."""
    rng = np.random.default_rng(seed)
    counts = data.class_counts()
    train_idx, val_idx = [], []
    for c in range(data.num_classes):
        if counts[c] == 0:
            continue
        if counts[c] < 5:
            raise DataFormatError(f"class {c} has {counts[c]} examples; stratified split needs >= 5")
        idx = rng.permutation(np.flatnonzero(data.y == c))
        n_val = int(math.floor(fraction * counts[c]))
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    val_idx = rng.permutation(np.concatenate(val_idx))
    return data.subset(train_idx), data.subset(val_idx)


@dataclass
class GridRow:
    config: dict
    val_nll: float | None
    val_acc: float | None
    seconds: float

    def table_row(self):
        c = self.config
        alpha = c["alpha_over_n"] if c["lam"] is None else c["beta_over_n"]
        other = c["beta_over_n"] if c["lam"] is None else c["lam"]
        return {
            "lr": c["lr"],
            "alpha": alpha,
            "beta_or_lambda": other,
            "val_nll": "nan" if self.val_nll is None else self.val_nll,
            "val_acc": "nan" if self.val_acc is None else self.val_acc,
            "seconds": self.seconds,
        }


@dataclass
class GridResult:
    rows: list
    selected: dict
    final: trainer.RunResult
    run_count: int
    total_seconds: float
    runs: list = field(default_factory=list)

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row.table_row())


def _grid_job(args):
    spec, train, val, prior, config, cfg, init, index = args
    hp = map_hyperparams(config, len(train))
    start = time.perf_counter()
    try:
        run = trainer.train_map(
            spec, train, prior, hp, cfg.replace(lr_init=config["lr"]), init, test=val,
            run_index=index, method="map-gs",
        )
    except TrainingDivergedError:
        return GridRow(config, None, None, time.perf_counter() - start), None
    run.hyperparams.update(_config_record(config))
    return GridRow(config, run.test_nll, run.test_accuracy, run.seconds), run


def _config_record(config):
    return {k: v for k, v in config.items() if v is not None}


def select_config(rows, N):
    """Lowest validation NLL; ties go to stronger regularization, then smaller lr."""
    valid = [r for r in rows if r.val_nll is not None and math.isfinite(r.val_nll)]
    if not valid:
        raise TrainingDivergedError(
            "every grid configuration diverged:\n"
            + "\n".join(str(r.table_row()) for r in rows)
        )

    def key(row):
        alpha, beta = regularization_key(row.config, N)
        return (row.val_nll, -alpha, -beta, row.config["lr"])

    return min(valid, key=key)


def run_grid(spec, data, prior, grid, cfg, test=None, init=None, workers=1, split_seed=None):
    """Full MAP + GS protocol: split, train every grid point, select, retrain on all data.

    ``prior`` supplies ``mu_p`` and ``Sigma_p``; its ``lam`` is ignored since
    the penalties come from the grid. ``init`` defaults to ``(mu_p, 0)``;
    pass the pretrained weights for an L2-zero prior.
    """
    if init is None:
        init = nnet.FlatParams(prior.mu_p.copy(), np.zeros(spec.head_shape))
    seed = cfg.seed if split_seed is None else split_seed
    train, val = split_train_val(data, 0.2, seed)
    configs = grid.configs(prior.kind)
    jobs = [(spec, train, val, prior, c, cfg, init, i) for i, c in enumerate(configs)]
    results = trainer._map_jobs(_grid_job, jobs, workers)
    rows = [r for r, _ in results]
    runs = [run for _, run in results]
    best = select_config(rows, len(train))

    hp = map_hyperparams(best.config, len(data))
    final = trainer.train_map(
        spec, data, prior, hp, cfg.replace(lr_init=best.config["lr"]), init, test=test,
        run_index=len(configs), method="map-gs",
    )
    final.hyperparams.update(_config_record(best.config))
    total = sum(r.seconds for r in rows) + final.seconds
    return GridResult(rows, dict(best.config), final, len(configs) + 1, total, runs)
