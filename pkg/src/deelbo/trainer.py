"""Fitting loops: DE-ELBo fine-tuning, MAP training, source pretraining, SWAG."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from deelbo import nnet
from deelbo import objective as obj
from deelbo import variational as vi
from deelbo.errors import (
    ConfigurationError,
    InvalidHyperparameterError,
    NumericalError,
    TrainingDivergedError,
)
from deelbo.lowrank_gaussian import LowRankCov

log = logging.getLogger(__name__)

DEFAULT_LR_GRID = (0.1, 0.01, 0.001, 0.0001)
# ways a single step can blow up; two in a row abort the run
_STEP_FAILURES = (ArithmeticError, NumericalError, InvalidHyperparameterError)
SWAG_VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr_init: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    schedule: str = "cosine"
    kappa: object = obj.KAPPA_D_OVER_N
    mc_train: int = 1
    mc_final: int = 10
    sigma_init: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if not self.lr_init > 0.0:
            raise ConfigurationError("lr_init must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.mc_train < 1 or self.mc_final < 1:
            raise ConfigurationError("MC sample counts must be >= 1")
        if not self.sigma_init > 0.0:
            raise ConfigurationError("sigma_init must be positive")

    @classmethod
    def full_scale(cls, **overrides):
        """6000 steps at batch 128."""
        return cls(**{"steps": 6000, "batch_size": 128, **overrides})

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class RunResult:
    method: str
    seed: int
    lr: float
    prior_kind: str
    trace: list
    seconds: float
    data_fingerprint: str
    lam: float | None = None
    tau: float | None = None
    kappa: float | None = None
    final_objective: float | None = None
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    test_nll: float | None = None
    lambda_trace: list = field(default_factory=list)
    tau_trace: list = field(default_factory=list)
    hyperparams: dict = field(default_factory=dict)
    posterior: vi.PosteriorParams | None = None
    params: nnet.FlatParams | None = None

    TIMING_FIELDS = ("seconds",)

    def to_record(self, include_traces=True):
        """JSON-ready dict; parameter arrays are left to checkpoints."""
        rec = {
            "method": self.method,
            "seed": self.seed,
            "lr": self.lr,
            "prior_kind": self.prior_kind,
            "seconds": self.seconds,
            "data_fingerprint": self.data_fingerprint,
            "lambda": self.lam,
            "tau": self.tau,
            "kappa": self.kappa,
            "final_objective": self.final_objective,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "test_nll": self.test_nll,
            "hyperparams": dict(self.hyperparams),
            "steps": len(self.trace),
        }
        if include_traces:
            rec["trace"] = list(self.trace)
            rec["lambda_trace"] = list(self.lambda_trace)
            rec["tau_trace"] = list(self.tau_trace)
        return _json_safe(rec)


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def cosine_lr(lr_init, t, total):
    """``lr_init * (1 + cos(pi t / T)) / 2``; exactly 0 at ``t = T``."""
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if total == 0 or t == total:
        return 0.0
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * t / total))


class NesterovSGD:
    """SGD with (optionally Nesterov) momentum on a flat parameter vector.

    Matches the common formulation ``v <- mu v + g``; the step uses
    ``g + mu v`` under Nesterov and ``v`` otherwise.
    """

    def __init__(self, size, momentum=0.9, nesterov=True):
        self.momentum = momentum
        self.nesterov = nesterov
        self.velocity = np.zeros(size)

    def step(self, theta, grad, lr):
        self.velocity *= self.momentum
        self.velocity += grad
        direction = grad + self.momentum * self.velocity if self.nesterov else self.velocity
        theta -= lr * direction


def _lr_at(cfg, lr_init, t):
    if cfg.schedule == "constant":
        return lr_init
    return cosine_lr(lr_init, t, cfg.steps)


def _streams(seed, run_index, n=3):
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, run_index]).spawn(n)]


class BatchSampler:
    """Successive minibatches drawn from reshuffled passes over ``n`` indices."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.size = min(batch_size, n)
        self.rng = rng
        self._queue = np.array([], dtype=np.int64)

    def next(self):
        if self.size == self.n:
            return np.arange(self.n)
        while len(self._queue) < self.size:
            self._queue = np.concatenate([self._queue, self.rng.permutation(self.n)])
        idx, self._queue = self._queue[: self.size], self._queue[self.size :]
        return idx


def _pack_posterior(post):
    return np.concatenate([post.w_bar, post.V_bar.ravel(), [post.rho]])


def _unpack_posterior(spec, theta):
    D = spec.D
    return vi.PosteriorParams(
        theta[:D], theta[D : D + spec.head_dim].reshape(spec.head_shape), theta[-1]
    )


def _posterior_metrics(spec, post, data, n_samples, rng):
    if data is None or len(data) == 0:
        return None, None
    samples = [vi.sample(post, rng) for _ in range(n_samples)]
    probs = nnet.predictive_probs(spec, samples, data.X)
    return nnet.accuracy_and_nll(probs, data.y)


def train_de_elbo(
    spec,
    data,
    prior,
    cfg,
    test=None,
    init_w=None,
    init_V=None,
    run_index=0,
    method="de-elbo",
):
    """Fit q by SGD on the data-emphasized ELBo, updating lam and tau in closed form.

    Every step first sets ``lam <- lambda_star`` and ``tau <- tau_star`` at
    the current q, then takes one Nesterov step on ``(w_bar, V_bar, rho)``.
    The step direction is the ELBo gradient divided by ``kappa * N``; this
    rescaling keeps learning rates comparable with the MAP loss and does not
    move the optimum. ``init_w`` defaults to the prior mean; pass the
    pretrained weights explicitly for an L2-zero prior.
    """
    if len(data) == 0:
        raise ConfigurationError("training data is empty")
    if prior.D != spec.D:
        raise ConfigurationError(f"prior has D={prior.D}, model has D={spec.D}")
    start = time.perf_counter()
    batch_rng, noise_rng, final_rng = _streams(cfg.seed, run_index)
    N = len(data)
    kappa = obj.resolve_kappa(cfg.kappa, spec.D, N)

    w0 = prior.mu_p if init_w is None else init_w
    V0 = np.zeros(spec.head_shape) if init_V is None else init_V
    post = vi.PosteriorParams(
        np.array(w0, dtype=np.float64), np.array(V0, dtype=np.float64), vi.softplus_inverse(cfg.sigma_init)
    )
    theta = _pack_posterior(post)
    prior = prior.with_lambda(1.0)
    head = vi.HeadPrior(1.0)
    optimizer = NesterovSGD(theta.size, cfg.momentum, cfg.nesterov)
    sampler = BatchSampler(N, cfg.batch_size, batch_rng)
    trace, lam_trace, tau_trace = [], [], []
    bad_streak = 0

    with np.errstate(all="ignore"):
        for t in range(cfg.steps):
            post = _unpack_posterior(spec, theta)
            idx = sampler.next()
            batch = nnet.Batch(data.X[idx], data.y[idx])
            ocfg = obj.ObjectiveConfig(kappa, cfg.mc_train, N / len(idx))
            noises = [vi.draw_noise(post, noise_rng) for _ in range(cfg.mc_train)]
            lr = _lr_at(cfg, cfg.lr_init, t)
            try:
                prior = prior.with_lambda(vi.lambda_star(post, prior))
                head = vi.HeadPrior(vi.tau_star(post))
                value, grad = obj.elbo_and_grad_with_noise(spec, post, prior, head, batch, ocfg, noises)
                flat_grad = grad.to_vector()
                finite = math.isfinite(value) and np.all(np.isfinite(flat_grad))
            except _STEP_FAILURES:
                value, finite = float("nan"), False
            lam_trace.append(prior.lam)
            tau_trace.append(head.tau)
            trace.append(value)
            if not finite:
                bad_streak += 1
                if bad_streak >= 2:
                    raise TrainingDivergedError(
                        f"objective non-finite at step {t} (lr={cfg.lr_init})", step=t, lr=cfg.lr_init
                    )
                continue
            bad_streak = 0
            optimizer.step(theta, -flat_grad / (kappa * N), lr)

    post = _unpack_posterior(spec, theta.copy())
    if not np.all(np.isfinite(theta)) or post.sigma_bar <= 0.0:
        raise TrainingDivergedError(
            f"parameters non-finite after {cfg.steps} steps (lr={cfg.lr_init})",
            step=cfg.steps,
            lr=cfg.lr_init,
        )
    final_cfg = obj.ObjectiveConfig(kappa, cfg.mc_final, 1.0)
    try:
        prior = prior.with_lambda(vi.lambda_star(post, prior))
        head = vi.HeadPrior(vi.tau_star(post))
        final = obj.elbo(spec, post, prior, head, data.batch(), final_cfg, final_rng)
        seconds = time.perf_counter() - start
        train_acc, _ = _posterior_metrics(spec, post, data, cfg.mc_final, final_rng)
        test_acc, test_nll = _posterior_metrics(spec, post, test, cfg.mc_final, final_rng)
    except _STEP_FAILURES as exc:
        raise TrainingDivergedError(f"final evaluation failed: {exc}", step=cfg.steps, lr=cfg.lr_init) from exc
    if not math.isfinite(final):
        raise TrainingDivergedError(
            f"final objective non-finite (lr={cfg.lr_init})", step=cfg.steps, lr=cfg.lr_init
        )
    return RunResult(
        method=method,
        seed=cfg.seed,
        lr=cfg.lr_init,
        prior_kind=prior.kind,
        trace=trace,
        seconds=seconds,
        data_fingerprint=data.fingerprint(),
        lam=prior.lam,
        tau=head.tau,
        kappa=kappa,
        final_objective=final,
        train_accuracy=train_acc,
        test_accuracy=test_acc,
        test_nll=test_nll,
        lambda_trace=lam_trace,
        tau_trace=tau_trace,
        hyperparams={"sigma_bar": post.sigma_bar},
        posterior=post,
    )


def pick_best_lr(scores):
    """``scores`` maps lr -> final objective (None for diverged). Ties favor the smaller lr."""
    valid = {lr: s for lr, s in scores.items() if s is not None and math.isfinite(s)}
    if not valid:
        detail = ", ".join(f"lr={lr}: diverged" for lr in scores)
        raise TrainingDivergedError(f"every learning rate diverged ({detail})")
    return max(valid, key=lambda lr: (valid[lr], -lr))


def _lr_run(args):
    spec, data, prior, cfg, test, init_w, init_V, index = args
    try:
        return train_de_elbo(spec, data, prior, cfg, test, init_w, init_V, run_index=index)
    except TrainingDivergedError as exc:
        log.info("lr=%g diverged: %s", cfg.lr_init, exc)
        return exc


def select_lr(
    spec, data, prior, cfg, lr_grid=DEFAULT_LR_GRID, test=None, init_w=None, init_V=None, workers=1
):
    """Run :func:`train_de_elbo` once per learning rate and keep the best final objective.

    Returns ``(best_lr, best_run, runs)`` where ``runs`` lists every
    candidate in grid order (a :class:`TrainingDivergedError` for runs that
    diverged).
    """
    if not lr_grid:
        raise ConfigurationError("learning-rate grid is empty")
    jobs = [
        (spec, data, prior, cfg.replace(lr_init=lr), test, init_w, init_V, i)
        for i, lr in enumerate(lr_grid)
    ]
    runs = _map_jobs(_lr_run, jobs, workers)
    scores = {
        lr: (r.final_objective if isinstance(r, RunResult) else None) for lr, r in zip(lr_grid, runs)
    }
    try:
        best_lr = pick_best_lr(scores)
    except TrainingDivergedError as exc:
        detail = "; ".join(f"lr={lr}: {r}" for lr, r in zip(lr_grid, runs))
        raise TrainingDivergedError(f"every learning rate diverged: {detail}") from exc
    return best_lr, runs[list(lr_grid).index(best_lr)], runs


def _map_jobs(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def train_map(
    spec,
    data,
    prior,
    hp,
    cfg,
    init,
    test=None,
    run_index=0,
    method="map",
    callback=None,
):
    """SGD on the penalized MAP loss; returns point-estimate metrics.

    ``callback(t, theta)`` is invoked after every parameter update.
    """
    if len(data) == 0:
        raise ConfigurationError("training data is empty")
    start = time.perf_counter()
    (batch_rng,) = _streams(cfg.seed, run_index, 1)
    N = len(data)
    theta = init.to_vector()
    optimizer = NesterovSGD(theta.size, cfg.momentum, cfg.nesterov)
    sampler = BatchSampler(N, cfg.batch_size, batch_rng)
    trace = []
    bad_streak = 0
    with np.errstate(all="ignore"):
        for t in range(cfg.steps):
            params = nnet.FlatParams.from_vector(spec, theta)
            idx = sampler.next()
            batch = nnet.Batch(data.X[idx], data.y[idx])
            try:
                value, grad = obj.map_loss_and_grad(spec, params, batch, hp, prior, n_total=N)
                flat = grad.to_vector()
                finite = math.isfinite(value) and np.all(np.isfinite(flat))
            except _STEP_FAILURES:
                value, finite = float("nan"), False
            trace.append(value)
            if not finite:
                bad_streak += 1
                if bad_streak >= 2:
                    raise TrainingDivergedError(
                        f"loss non-finite at step {t} (lr={cfg.lr_init})", step=t, lr=cfg.lr_init
                    )
                continue
            bad_streak = 0
            optimizer.step(theta, flat, _lr_at(cfg, cfg.lr_init, t))
            if callback is not None:
                callback(t, theta)

    if not np.all(np.isfinite(theta)):
        raise TrainingDivergedError(f"parameters non-finite (lr={cfg.lr_init})", step=cfg.steps, lr=cfg.lr_init)
    params = nnet.FlatParams.from_vector(spec, theta)
    try:
        final = obj.map_loss(spec, params, data.batch(), hp, prior, n_total=N)
        train_acc, _ = nnet.accuracy_and_nll(nnet.forward(spec, params, data.X), data.y)
        seconds = time.perf_counter() - start
        test_acc = test_nll = None
        if test is not None and len(test):
            test_acc, test_nll = nnet.accuracy_and_nll(nnet.forward(spec, params, test.X), test.y)
    except _STEP_FAILURES as exc:
        raise TrainingDivergedError(f"final evaluation failed: {exc}", step=cfg.steps, lr=cfg.lr_init) from exc
    return RunResult(
        method=method,
        seed=cfg.seed,
        lr=cfg.lr_init,
        prior_kind=prior.kind,
        trace=trace,
        seconds=seconds,
        data_fingerprint=data.fingerprint(),
        final_objective=final,
        train_accuracy=train_acc,
        test_accuracy=test_acc,
        test_nll=test_nll,
        hyperparams={"alpha": hp.alpha, "beta": hp.beta},
        params=params,
    )


def source_spec(spec, source_data):
    return dataclasses.replace(spec, num_classes=source_data.num_classes)


def pretrain_source(spec, source_data, cfg, weight_decay=1e-4):
    """MAP-train backbone and head from random init on the source task.

    ``weight_decay`` is alpha/N = beta/N of the L2-zero penalty. Returns
    ``(mu, head, run)`` where ``head`` has the source task's class count.
    """
    sspec = source_spec(spec, source_data)
    (init_rng,) = _streams(cfg.seed, 10_000, 1)
    init = nnet.init_params(sspec, init_rng)
    N = len(source_data)
    hp = obj.MapHyperparams(weight_decay * N, weight_decay * N)
    prior = vi.BackbonePrior.l2zero(spec.D)
    run = train_map(sspec, source_data, prior, hp, cfg, init, method="pretrain")
    return run.params.w.copy(), run.params.V.copy(), run


class SwagAccumulator:
    """Running first/second moments and the last ``K`` deviation columns."""

    def __init__(self, dim, K):
        if K < 2:
            raise ConfigurationError(f"SWAG rank K must be >= 2, got {K}")
        self.K = K
        self.n = 0
        self.mean = np.zeros(dim)
        self.sq_mean = np.zeros(dim)
        self.deviations = deque(maxlen=K)

    def collect(self, w):
        w = np.asarray(w, dtype=np.float64)
        self.n += 1
        self.mean += (w - self.mean) / self.n
        self.sq_mean += (w * w - self.sq_mean) / self.n
        self.deviations.append(w - self.mean)

    def finalize(self):
        if self.n < self.K:
            raise ConfigurationError(f"collected {self.n} SWAG snapshots but K={self.K} are needed")
        diag = np.maximum(self.sq_mean - self.mean ** 2, SWAG_VARIANCE_FLOOR)
        Q = np.stack(list(self.deviations), axis=1)
        return self.mean.copy(), LowRankCov(diag, Q)


def swag_snapshot_steps(steps, snapshot_interval, warmup_fraction):
    start = int(math.ceil(warmup_fraction * steps))
    return [t for t in range(start, steps) if (t - start) % snapshot_interval == snapshot_interval - 1]


def swag_collect(
    spec,
    source_data,
    cfg,
    K,
    snapshot_interval=25,
    warmup_fraction=0.5,
    init=None,
    weight_decay=1e-4,
):
    """Continue constant-lr SGD on the source task and build a SWAG prior.

    Snapshots of ``w`` are taken every ``snapshot_interval`` steps once
    ``warmup_fraction`` of ``cfg.steps`` has elapsed. ``init`` is the
    pretrained ``FlatParams`` for the source head shape; when omitted,
    :func:`pretrain_source` runs first. Returns ``(mu, LowRankCov)``.
    """
    if K < 2:
        raise ConfigurationError(f"SWAG rank K must be >= 2, got {K}")
    if snapshot_interval < 1:
        raise ConfigurationError("snapshot_interval must be >= 1")
    snaps = swag_snapshot_steps(cfg.steps, snapshot_interval, warmup_fraction)
    if len(snaps) < K:
        raise ConfigurationError(
            f"{cfg.steps} steps give only {len(snaps)} snapshots after warmup; K={K} needed"
        )
    sspec = source_spec(spec, source_data)
    if init is None:
        mu, head, _ = pretrain_source(spec, source_data, cfg, weight_decay)
        init = nnet.FlatParams(mu, head)
    N = len(source_data)
    hp = obj.MapHyperparams(weight_decay * N, weight_decay * N)
    acc = SwagAccumulator(spec.D, K)
    snap_set = set(snaps)

    def on_step(t, theta):
        if t in snap_set:
            acc.collect(theta[: spec.D])

    train_map(
        sspec,
        source_data,
        vi.BackbonePrior.l2zero(spec.D),
        hp,
        cfg.replace(schedule="constant"),
        init,
        run_index=20_000,
        method="swag",
        callback=on_step,
    )
    return acc.finalize()
