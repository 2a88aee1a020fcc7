"""Mean-field Gaussian posterior with one shared scale, and Gaussian priors.

q(w) = N(w_bar, s^2 I), q(V) = N(V_bar, s^2 I) with s = softplus(rho).
Backbone prior p(w) = N(mu_p, lam * Sigma_p); head prior p(V) = N(0, tau I).
All KL divergences and the optimal prior scales are closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from deelbo.errors import InvalidHyperparameterError, ShapeError
from deelbo.lowrank_gaussian import IdentityCov, LowRankCov
from deelbo.nnet import FlatParams

PRIOR_KINDS = ("l2zero", "l2sp", "ptyl")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """Inverse of softplus for ``y > 0``."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class PosteriorParams:
    w_bar: np.ndarray
    V_bar: np.ndarray
    rho: float

    def __post_init__(self):
        self.w_bar = np.asarray(self.w_bar, dtype=np.float64)
        self.V_bar = np.asarray(self.V_bar, dtype=np.float64)
        self.rho = float(self.rho)

    @classmethod
    def from_params(cls, params, sigma):
        """Center q on ``params`` with standard deviation ``sigma``."""
        return cls(params.w.copy(), params.V.copy(), float(softplus_inverse(sigma)))

    @property
    def sigma_bar(self):
        return float(softplus(self.rho))

    @property
    def D(self):
        return self.w_bar.shape[0]

    @property
    def head_dim(self):
        return self.V_bar.size

    def mean_params(self):
        return FlatParams(self.w_bar.copy(), self.V_bar.copy())

    def copy(self):
        return PosteriorParams(self.w_bar.copy(), self.V_bar.copy(), self.rho)


@dataclass
class PosteriorGrad:
    w_bar: np.ndarray
    V_bar: np.ndarray
    rho: float

    def __add__(self, other):
        return PosteriorGrad(self.w_bar + other.w_bar, self.V_bar + other.V_bar, self.rho + other.rho)

    def __mul__(self, scalar):
        return PosteriorGrad(self.w_bar * scalar, self.V_bar * scalar, self.rho * scalar)

    __rmul__ = __mul__

    def to_vector(self):
        return np.concatenate([self.w_bar, self.V_bar.ravel(), [self.rho]])


@dataclass
class BackbonePrior:
    """``N(mu_p, lam * Sigma_p)`` over backbone weights.

    Use the :meth:`l2zero`, :meth:`l2sp` and :meth:`ptyl` constructors rather
    than building one by hand.
    """

    kind: str
    mu_p: np.ndarray
    sigma_p: object
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}; expected one of {PRIOR_KINDS}")
        self.mu_p = np.asarray(self.mu_p, dtype=np.float64)
        if self.sigma_p.dim != self.mu_p.shape[0]:
            raise ShapeError("prior mean and covariance dimensions differ")
        if self.kind == "ptyl" and not isinstance(self.sigma_p, LowRankCov):
            raise ValueError("PTYL prior needs a LowRankCov covariance")
        if self.kind != "ptyl" and not isinstance(self.sigma_p, IdentityCov):
            raise ValueError(f"{self.kind} prior uses the identity covariance")
        _check_positive("lambda", self.lam)

    @classmethod
    def l2zero(cls, D, lam=1.0):
        return cls("l2zero", np.zeros(D), IdentityCov(D), lam)

    @classmethod
    def l2sp(cls, mu, lam=1.0):
        mu = np.asarray(mu, dtype=np.float64)
        return cls("l2sp", mu.copy(), IdentityCov(mu.shape[0]), lam)

    @classmethod
    def ptyl(cls, mu, cov, lam=1.0):
        return cls("ptyl", np.asarray(mu, dtype=np.float64).copy(), cov, lam)

    @property
    def D(self):
        return self.mu_p.shape[0]

    def with_lambda(self, lam):
        return BackbonePrior(self.kind, self.mu_p, self.sigma_p, lam)


@dataclass
class HeadPrior:
    tau: float = 1.0

    def __post_init__(self):
        _check_positive("tau", self.tau)


def _check_positive(name, value):
    if not (np.isfinite(value) and value > 0.0):
        raise InvalidHyperparameterError(f"{name} must be a positive finite scalar, got {value!r}")


def draw_noise(post, rng):
    """Standard-normal ``(eps_w, eps_V)`` shaped like the posterior means."""
    return rng.standard_normal(post.D), rng.standard_normal(post.V_bar.shape)


def apply_noise(post, noise):
    eps_w, eps_V = noise
    s = post.sigma_bar
    return FlatParams(post.w_bar + s * eps_w, post.V_bar + s * eps_V)


def sample(post, rng):
    """One reparameterized draw ``(w, V)`` from q."""
    return apply_noise(post, draw_noise(post, rng))


def _check_dims(post, prior):
    if post.D != prior.D:
        raise ShapeError(f"posterior has D={post.D} but prior has D={prior.D}")


def backbone_sufficient_stats(post, prior):
    """``(Tr(Sigma_p^-1), (mu_p - w_bar)^T Sigma_p^-1 (mu_p - w_bar))``."""
    _check_dims(post, prior)
    delta = prior.mu_p - post.w_bar
    return prior.sigma_p.trace_inverse(), prior.sigma_p.mahalanobis_sq(delta)


def kl_backbone(post, prior):
    """KL(q(w) || p(w)) in nats."""
    _check_positive("lambda", prior.lam)
    trace_inv, maha = backbone_sufficient_stats(post, prior)
    D = post.D
    lam = prior.lam
    var = post.sigma_bar ** 2
    log_term = D * np.log(lam) + prior.sigma_p.logdet() - D * np.log(var)
    return float(0.5 * (var / lam * trace_inv + maha / lam - D + log_term))


def kl_backbone_grad(post, prior):
    """Gradients of KL(q(w) || p(w)) with respect to ``w_bar`` and ``sigma_bar``."""
    _check_positive("lambda", prior.lam)
    _check_dims(post, prior)
    s = post.sigma_bar
    grad_w = prior.sigma_p.solve(post.w_bar - prior.mu_p) / prior.lam
    grad_sigma = s * prior.sigma_p.trace_inverse() / prior.lam - post.D / s
    return grad_w, float(grad_sigma)


def kl_head(post, prior):
    """KL(q(V) || p(V)) in nats."""
    _check_positive("tau", prior.tau)
    d = post.head_dim
    tau = prior.tau
    var = post.sigma_bar ** 2
    sq_norm = float(np.sum(post.V_bar ** 2))
    return float(0.5 * (var / tau * d + sq_norm / tau - d + d * np.log(tau) - d * np.log(var)))


def kl_head_grad(post, prior):
    """Gradients of KL(q(V) || p(V)) with respect to ``V_bar`` and ``sigma_bar``."""
    _check_positive("tau", prior.tau)
    s = post.sigma_bar
    d = post.head_dim
    return post.V_bar / prior.tau, float(s * d / prior.tau - d / s)


def lambda_star(post, prior):
    """The backbone prior scale minimizing ``kl_backbone``."""
    trace_inv, maha = backbone_sufficient_stats(post, prior)
    return float((post.sigma_bar ** 2 * trace_inv + maha) / post.D)


def tau_star(post):
    """The head prior scale minimizing ``kl_head``."""
    return float(post.sigma_bar ** 2 + np.sum(post.V_bar ** 2) / post.head_dim)


def second_derivative_lambda(post, prior):
    """d^2/dlam^2 of -KL(q(w) || p(w)) evaluated at ``lambda_star``; always negative."""
    lam = lambda_star(post, prior)
    return -0.5 * post.D / lam ** 2


def second_derivative_tau(post):
    """d^2/dtau^2 of -KL(q(V) || p(V)) evaluated at ``tau_star``; always negative."""
    tau = tau_star(post)
    return -0.5 * post.head_dim / tau ** 2


def sigma_chain(post):
    """d sigma_bar / d rho."""
    return float(expit(post.rho))
