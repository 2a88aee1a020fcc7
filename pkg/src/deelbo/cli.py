"""Command-line entry point: ``deelbo {pretrain,finetune,gridsearch,compare,verify}``.

Exit codes: 0 on success, 1 when an experiment or verification fails,
2 for configuration, data and checkpoint errors.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from deelbo import dataio, gridsearch, trainer
from deelbo import variational as vi
from deelbo import verify as verify_mod
from deelbo.config import PRIOR_FAMILIES, ExperimentConfig, load_config, parse_kappa
from deelbo.errors import (
    CheckpointError,
    ConfigurationError,
    DataFormatError,
    DeelboError,
    InvalidCovarianceError,
    InvalidHyperparameterError,
    ShapeError,
    TrainingDivergedError,
)
from deelbo.lowrank_gaussian import LowRankCov
from deelbo.nnet import FlatParams
from deelbo.objective import KAPPA_D_OVER_N, resolve_kappa

log = logging.getLogger("deelbo")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
_CONFIG_ERRORS = (
    ConfigurationError,
    DataFormatError,
    CheckpointError,
    ShapeError,
    InvalidHyperparameterError,
    InvalidCovarianceError,
)


def build_parser():
    parser = argparse.ArgumentParser(prog="deelbo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--seed", type=int, help="training-set / run seed (overrides config)")
        p.add_argument("--out", help="output path (checkpoint for pretrain, directory otherwise)")
        p.add_argument("--prior", choices=PRIOR_FAMILIES, help="prior family")
        p.add_argument("--prior-checkpoint", help="checkpoint written by `pretrain`")

    p = sub.add_parser("pretrain", help="train on the source task and write a prior checkpoint")
    common(p)
    p.add_argument("--swag", type=int, metavar="K", help="also build a rank-K SWAG covariance (K >= 2)")

    p = sub.add_parser("finetune", help="fit the target task (DE-ELBo by default)")
    common(p)
    p.add_argument("--method", choices=("de-elbo", "map-gs"))
    p.add_argument("--kappa", help="likelihood weight (a number >= 1, or D/N)")
    p.add_argument("--kappa-mode", choices=("d-over-n",), help="set kappa = D/N")
    p.add_argument("--threads", type=int, help="learning-rate runs executed concurrently")
    p.add_argument("--workers", type=int, help="grid runs executed concurrently (map-gs)")

    p = sub.add_parser("gridsearch", help="MAP + grid-search baseline")
    common(p)
    p.add_argument("--workers", type=int, help="grid runs executed concurrently")

    p = sub.add_parser("compare", help="summarize result files")
    p.add_argument("results", nargs="+", help="JSONL result files")
    p.add_argument("--out", help="also write the summary table here")

    p = sub.add_parser("verify", help="run the oracle self-checks")
    p.add_argument("--suite", action="append", choices=sorted(verify_mod.SUITES), help="restrict to a suite")
    return parser


def resolve_config(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    if getattr(args, "prior", None):
        cfg.prior_family = args.prior
    if getattr(args, "prior_checkpoint", None):
        cfg.prior_checkpoint = args.prior_checkpoint
    if getattr(args, "method", None):
        cfg.method = args.method
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "kappa", None) is not None and getattr(args, "kappa_mode", None):
        raise ConfigurationError("--kappa and --kappa-mode are mutually exclusive")
    if getattr(args, "kappa", None) is not None:
        cfg.train = cfg.train.replace(kappa=parse_kappa(args.kappa))
    if getattr(args, "kappa_mode", None):
        cfg.train = cfg.train.replace(kappa=KAPPA_D_OVER_N)
    cfg.train = cfg.train.replace(seed=cfg.seed)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- pretrain


def cmd_pretrain(cfg, swag_k=None):
    if swag_k is None:
        swag_k = cfg.pretrain.swag_k or None
    if swag_k is not None and swag_k < 2:
        raise ConfigurationError(f"--swag needs K >= 2, got {swag_k}")
    raw = cfg.load_source()
    mean, std = dataio.fit_normalization(raw)
    source = dataio.normalize(raw, mean, std)
    spec = cfg.model_spec(source.input_dim, source.num_classes)
    pre = cfg.pretrain
    tcfg = trainer.TrainConfig(
        steps=pre.steps, batch_size=pre.batch_size, lr_init=pre.lr, seed=cfg.seed
    )
    mu, head, run = trainer.pretrain_source(spec, source, tcfg, pre.weight_decay)
    log.info("pretrained: source train accuracy %.4f", run.train_accuracy)
    arrays = {"mu_p": mu, "source.V": head, "source.mean": mean, "source.std": std}
    scalars = {"seed": float(cfg.seed), "source.train_accuracy": run.train_accuracy}
    if swag_k is not None:
        swag_cfg = tcfg.replace(steps=pre.swag_steps)
        swag_mean, cov = trainer.swag_collect(
            spec, source, swag_cfg, swag_k, pre.snapshot_interval, pre.warmup_fraction,
            init=FlatParams(mu, head), weight_decay=pre.weight_decay,
        )
        arrays.update({"mu_p": swag_mean, "prior.diag": cov.diag, "prior.Q": cov.Q})
        scalars["prior.K"] = float(swag_k)
    ckpt = dataio.Checkpoint(trainer.source_spec(spec, source), arrays, scalars)
    out = Path(cfg.out) if cfg.out else cfg.output_dir() / f"prior-seed{cfg.seed}.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_checkpoint(out, ckpt)
    print(f"wrote prior checkpoint {out} (D={spec.D}{f', K={swag_k}' if swag_k else ''})")
    return out


# ---------------------------------------------------------------- shared


def load_prior(cfg, spec):
    """Build the backbone prior named by the config from its checkpoint."""
    if not cfg.prior_checkpoint:
        raise ConfigurationError("a prior checkpoint is required (--prior-checkpoint)")
    required = ["spec", "mu_p"] + (["prior.diag", "prior.Q"] if cfg.prior_family == "ptyl" else [])
    ckpt = dataio.load_checkpoint(cfg.prior_checkpoint, required)
    stored = ckpt.spec
    if (stored.input_dim, stored.hidden_sizes, stored.repr_dim) != (
        spec.input_dim, spec.hidden_sizes, spec.repr_dim
    ):
        raise ShapeError(
            f"prior checkpoint backbone {stored.layer_sizes} does not match model {spec.layer_sizes}"
        )
    mu = ckpt.arrays["mu_p"]
    if mu.shape != (spec.D,):
        raise ShapeError(f"prior mean has {mu.shape[0]} entries but the model has D={spec.D}")
    if cfg.prior_family == "ptyl":
        cov = LowRankCov(ckpt.arrays["prior.diag"], ckpt.arrays["prior.Q"])
        prior = vi.BackbonePrior.ptyl(mu, cov)
    elif cfg.prior_family == "l2sp":
        prior = vi.BackbonePrior.l2sp(mu)
    else:
        prior = vi.BackbonePrior.l2zero(spec.D)
    return prior, mu


def load_target(cfg):
    """Target train/test sets, normalized with statistics of the training split only."""
    raw_train, raw_test = cfg.load_target(cfg.seed)
    mean, std = dataio.fit_normalization(raw_train)
    train = dataio.normalize(raw_train, mean, std)
    test = dataio.normalize(raw_test, mean, std) if raw_test is not None else None
    return train, test


def _stem(cfg, method):
    return f"{method}-{cfg.prior_family}-seed{cfg.seed}"


def _fresh(path):
    """Results files are rewritten per invocation so reruns give identical files."""
    path = Path(path)
    if path.exists():
        path.unlink()
    return path


def _record(run, **extra):
    rec = run.to_record()
    rec.update(extra)
    return rec


def _diverged_record(method, cfg, lr, exc, **extra):
    rec = {
        "method": method,
        "seed": cfg.seed,
        "lr": lr,
        "prior_kind": cfg.prior_family,
        "diverged": True,
        "error": str(exc),
        "seconds": None,
    }
    rec.update(extra)
    return rec


# ---------------------------------------------------------------- finetune


def cmd_finetune(cfg):
    if cfg.method == "map-gs":
        return cmd_gridsearch(cfg)
    train, test = load_target(cfg)
    spec = cfg.model_spec(train.input_dim, train.num_classes)
    prior, mu = load_prior(cfg, spec)
    out_dir = cfg.output_dir()
    results = _fresh(out_dir / f"{_stem(cfg, 'de-elbo')}.jsonl")

    best_lr, best, runs = trainer.select_lr(
        spec, train, prior, cfg.train, cfg.lr_grid, test=test, init_w=mu, workers=cfg.threads
    )
    common = {"D": spec.D, "N": len(train), "phase": "lr-search"}
    for lr, run in zip(cfg.lr_grid, runs):
        if isinstance(run, trainer.RunResult):
            rec = _record(run, selected=lr == best_lr, **common)
        else:
            rec = _diverged_record("de-elbo", cfg, lr, run, selected=False, data_fingerprint=train.fingerprint(), **common)
        dataio.append_jsonl(results, rec)

    post = best.posterior
    arrays = {"w_bar": post.w_bar, "V_bar": post.V_bar, "rho": np.array([post.rho]), "mu_p": prior.mu_p}
    if prior.kind == "ptyl":
        arrays.update({"prior.diag": prior.sigma_p.diag, "prior.Q": prior.sigma_p.Q})
    scalars = {"lambda": best.lam, "tau": best.tau, "kappa": best.kappa, "seed": float(cfg.seed), "lr": best_lr}
    ckpt_path = out_dir / f"{_stem(cfg, 'de-elbo')}.ckpt"
    dataio.save_checkpoint(ckpt_path, dataio.Checkpoint(spec, arrays, scalars))

    print(f"selected lr={best_lr:g}  kappa={best.kappa:.6g}  lambda={best.lam:.6g}  tau={best.tau:.6g}")
    if best.test_accuracy is not None:
        print(f"test accuracy={best.test_accuracy:.4f}  test NLL={best.test_nll:.4f}")
    print(f"wrote {results} and {ckpt_path}")
    return best


# ---------------------------------------------------------------- gridsearch


def cmd_gridsearch(cfg):
    train, test = load_target(cfg)
    spec = cfg.model_spec(train.input_dim, train.num_classes)
    prior, mu = load_prior(cfg, spec)
    out_dir = cfg.output_dir()
    stem = _stem(cfg, "map-gs")
    results = _fresh(out_dir / f"{stem}.jsonl")
    init = FlatParams(np.array(mu), np.zeros(spec.head_shape))
    res = gridsearch.run_grid(
        spec, train, prior, cfg.grid, cfg.train, test=test, init=init, workers=cfg.workers
    )

    common = {"D": spec.D, "N": len(train)}
    for row, run in zip(res.rows, res.runs):
        if run is None:
            rec = _diverged_record("map-gs", cfg, row.config["lr"], "diverged", selected=False, phase="grid", **common)
            rec["hyperparams"] = {k: v for k, v in row.config.items() if v is not None}
        else:
            rec = _record(run, selected=False, phase="grid", val_nll=row.val_nll, val_acc=row.val_acc, **common)
        dataio.append_jsonl(results, rec)
    dataio.append_jsonl(results, _record(res.final, selected=True, phase="final", **common))

    table = out_dir / f"{stem}-table.csv"
    res.write_csv(table)
    final = res.final
    arrays = {"w": final.params.w, "V": final.params.V, "mu_p": prior.mu_p}
    scalars = {
        "alpha": final.hyperparams["alpha"],
        "beta": final.hyperparams["beta"],
        "lr": final.lr,
        "seed": float(cfg.seed),
    }
    dataio.save_checkpoint(out_dir / f"{stem}.ckpt", dataio.Checkpoint(spec, arrays, scalars))

    sel = ", ".join(f"{k}={v:g}" for k, v in res.selected.items() if v is not None)
    print(f"{len(res.rows)} grid configurations; selected {sel}")
    if final.test_accuracy is not None:
        print(f"test accuracy={final.test_accuracy:.4f}  test NLL={final.test_nll:.4f}")
    print(f"wrote {results} and {table}")
    return res


# ---------------------------------------------------------------- compare


def summarize(records):
    """Rows of ``(label, accuracies, run_count, seconds)`` grouped by prior and method.

    Accuracies come from the selected record of each seed. Within a seed,
    every selected record must carry the same data fingerprint.
    """
    groups = defaultdict(list)
    for rec in records:
        groups[(rec.get("prior_kind"), rec.get("method"))].append(rec)

    by_seed = defaultdict(set)
    for rec in records:
        if rec.get("selected") and rec.get("data_fingerprint"):
            by_seed[rec.get("seed")].add(rec["data_fingerprint"])
    for seed, prints in by_seed.items():
        if len(prints) > 1:
            raise DataFormatError(
                f"seed {seed}: results were trained on different datasets "
                f"({len(prints)} distinct fingerprints); refusing to compare"
            )

    rows = []
    for (prior, method), recs in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))):
        selected = {}
        for rec in recs:
            if rec.get("selected"):
                if rec.get("seed") in selected:
                    raise DataFormatError(f"{prior}/{method}: more than one selected run for seed {rec.get('seed')}")
                selected[rec.get("seed")] = rec
        accs = [
            100.0 * selected[s]["test_accuracy"]
            for s in sorted(selected, key=str)
            if selected[s].get("test_accuracy") is not None
        ]
        seconds = sum(r.get("seconds") or 0.0 for r in recs)
        rows.append((f"{prior}/{method}", accs, len(recs), seconds))
    return rows


def format_mean_range(values, digits=1):
    if not values:
        return "n/a"
    mean, lo, hi = float(np.mean(values)), min(values), max(values)
    return f"{mean:.{digits}f} ({lo:.{digits}f}-{hi:.{digits}f})"


def format_summary(rows):
    header = f"{'method':<22} {'accuracy % mean (min-max)':<28} {'SGD runs':>8} {'wall time (s)':>14}"
    lines = [header, "-" * len(header)]
    for label, accs, runs, seconds in rows:
        lines.append(f"{label:<22} {format_mean_range(accs):<28} {runs:>8d} {seconds:>14.2f}")
    return "\n".join(lines)


def cmd_compare(paths, out=None):
    records = []
    for path in paths:
        if not Path(path).exists():
            raise ConfigurationError(f"result file {path} does not exist")
        try:
            records.extend(dataio.read_jsonl(path))
        except ValueError as exc:
            raise DataFormatError(f"{path}: not a JSON-lines result file ({exc})") from exc
    if not records:
        raise DataFormatError("no result records found")
    text = format_summary(summarize(records))
    print(text)
    if out:
        Path(out).write_text(text + "\n")
    return text


# ---------------------------------------------------------------- verify


def cmd_verify(suites=None):
    report = verify_mod.run_all(suites)
    failed = 0
    for name, cases in report.items():
        bad = [c for c in cases if not c.passed]
        failed += len(bad)
        print(f"{name:<10} {len(cases) - len(bad):>4}/{len(cases):<4} passed")
        for case in bad:
            print("  " + case.describe())
    print("all suites passed" if failed == 0 else f"{failed} case(s) failed")
    return failed == 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "verify":
            return EXIT_OK if cmd_verify(args.suite) else EXIT_FAILURE
        if args.command == "compare":
            cmd_compare(args.results, args.out)
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "pretrain":
            cmd_pretrain(cfg, args.swag)
        elif args.command == "finetune":
            cmd_finetune(cfg)
        elif args.command == "gridsearch":
            cmd_gridsearch(cfg)
        return EXIT_OK
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, DeelboError, ArithmeticError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
