"""Training objectives: (data-emphasized) ELBo and the L2-penalized MAP loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deelbo import nnet
from deelbo import variational as vi
from deelbo.errors import InvalidHyperparameterError

KAPPA_D_OVER_N = "D/N"


@dataclass(frozen=True)
class ObjectiveConfig:
    """Likelihood weight ``kappa``, MC sample count, and the N/B minibatch factor."""

    kappa: float = 1.0
    mc_samples: int = 1
    minibatch_scale: float = 1.0

    def __post_init__(self):
        if not self.kappa >= 1.0:
            raise InvalidHyperparameterError(f"kappa must be >= 1, got {self.kappa}")
        if self.mc_samples < 1:
            raise InvalidHyperparameterError("mc_samples must be >= 1")
        if not self.minibatch_scale > 0.0:
            raise InvalidHyperparameterError("minibatch_scale must be positive")


def resolve_kappa(kappa, D, N):
    """Turn a kappa setting (a number or ``"D/N"``) into a float.

    ``D`` is the backbone parameter count; head weights are not included.
    The result is clipped to 1 from below so the bound stays valid.
    """
    if isinstance(kappa, str):
        if kappa.strip().lower().replace("-over-", "/") not in ("d/n",):
            raise InvalidHyperparameterError(f"unknown kappa mode {kappa!r}")
        if N < 1:
            raise InvalidHyperparameterError("kappa = D/N needs a nonempty dataset")
        return max(1.0, D / N)
    return float(kappa)


@dataclass
class ElboTerms:
    value: float
    expected_loglik: float
    kl_backbone: float
    kl_head: float


def elbo_terms(spec, post, backbone_prior, head_prior, batch, cfg, noises):
    """Evaluate the ELBo pieces for a fixed list of ``(eps_w, eps_V)`` draws."""
    loglik = np.mean([nnet.log_likelihood(spec, vi.apply_noise(post, nz), batch) for nz in noises])
    kl_w = vi.kl_backbone(post, backbone_prior)
    kl_v = vi.kl_head(post, head_prior)
    scaled = cfg.kappa * cfg.minibatch_scale * loglik
    return ElboTerms(float(scaled - kl_w - kl_v), float(loglik), kl_w, kl_v)


def elbo(spec, post, backbone_prior, head_prior, batch, cfg, rng):
    """Monte Carlo estimate of the (data-emphasized) ELBo.

    ``kappa * (N/B) * mean_s log p(y | w_s, V_s) - KL_w - KL_V`` with
    ``cfg.mc_samples`` reparameterized draws taken from ``rng``.
    """
    noises = [vi.draw_noise(post, rng) for _ in range(cfg.mc_samples)]
    return elbo_terms(spec, post, backbone_prior, head_prior, batch, cfg, noises).value


def elbo_and_grad_with_noise(spec, post, backbone_prior, head_prior, batch, cfg, noises):
    """ELBo estimate and its exact gradient in ``(w_bar, V_bar, rho)`` for fixed noise."""
    weight = cfg.kappa * cfg.minibatch_scale / len(noises)
    s = post.sigma_bar
    g_w = np.zeros_like(post.w_bar)
    g_V = np.zeros_like(post.V_bar)
    g_sigma = 0.0
    total = 0.0
    for eps_w, eps_V in noises:
        params = nnet.FlatParams(post.w_bar + s * eps_w, post.V_bar + s * eps_V)
        value, grad = nnet.log_likelihood_and_grad(spec, params, batch)
        total += value
        g_w += grad.w
        g_V += grad.V
        g_sigma += float(grad.w @ eps_w + np.sum(grad.V * eps_V))
    g_w *= weight
    g_V *= weight
    g_sigma *= weight

    kl_w = vi.kl_backbone(post, backbone_prior)
    kl_v = vi.kl_head(post, head_prior)
    kw_w, kw_sigma = vi.kl_backbone_grad(post, backbone_prior)
    kv_V, kv_sigma = vi.kl_head_grad(post, head_prior)
    g_w -= kw_w
    g_V -= kv_V
    g_sigma -= kw_sigma + kv_sigma

    value = weight * total - kl_w - kl_v
    return float(value), vi.PosteriorGrad(g_w, g_V, g_sigma * vi.sigma_chain(post))


def elbo_grad(spec, post, backbone_prior, head_prior, batch, cfg, rng):
    """Gradient of the ELBo estimator for a fresh noise draw from ``rng``."""
    noises = [vi.draw_noise(post, rng) for _ in range(cfg.mc_samples)]
    return elbo_and_grad_with_noise(spec, post, backbone_prior, head_prior, batch, cfg, noises)[1]


@dataclass(frozen=True)
class MapHyperparams:
    """L2 penalty strengths: ``alpha`` on the backbone, ``beta`` on the head."""

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidHyperparameterError("penalty strengths must be non-negative")

    @classmethod
    def from_scales(cls, lam, tau):
        return cls(1.0 / lam, 1.0 / tau)


def map_loss_and_grad(spec, params, batch, hp, backbone_prior, n_total=None):
    """Penalized cross-entropy and its gradient.

    ``(1/B) sum_batch ell_i + (alpha / 2N) ||w - mu_p||^2_{Sigma_p^-1}
    + (beta / 2N) ||V||^2``. With the full dataset as the batch this is the
    usual ``(1/N)[sum ell + penalties]``. ``alpha = 0`` drops the backbone
    term entirely.
    """
    B = len(batch.y)
    N = B if n_total is None else n_total
    loglik, grad = nnet.log_likelihood_and_grad(spec, params, batch)
    loss = -loglik / B
    g_w = -grad.w / B
    g_V = -grad.V / B
    if hp.alpha > 0.0:
        delta = params.w - backbone_prior.mu_p
        solved = backbone_prior.sigma_p.solve(delta)
        loss += 0.5 * hp.alpha / N * float(delta @ solved)
        g_w = g_w + hp.alpha / N * solved
    if hp.beta > 0.0:
        loss += 0.5 * hp.beta / N * float(np.sum(params.V ** 2))
        g_V = g_V + hp.beta / N * params.V
    return float(loss), nnet.FlatParams(g_w, g_V)


def map_loss(spec, params, batch, hp, backbone_prior, n_total=None):
    return map_loss_and_grad(spec, params, batch, hp, backbone_prior, n_total)[0]


def log_joint(spec, params, batch, backbone_prior, head_prior):
    """``log p(y | w, V) + log p(w) + log p(V)`` including normalizers."""
    D = backbone_prior.D
    d = params.V.size
    lam, tau = backbone_prior.lam, head_prior.tau
    delta = params.w - backbone_prior.mu_p
    log_pw = -0.5 * (
        D * np.log(2 * np.pi * lam)
        + backbone_prior.sigma_p.logdet()
        + backbone_prior.sigma_p.mahalanobis_sq(delta) / lam
    )
    log_pv = -0.5 * (d * np.log(2 * np.pi * tau) + float(np.sum(params.V ** 2)) / tau)
    return nnet.log_likelihood(spec, params, batch) + float(log_pw) + float(log_pv)


def log_joint_grad(spec, params, batch, backbone_prior, head_prior):
    grad = nnet.grad_log_likelihood(spec, params, batch)
    delta = params.w - backbone_prior.mu_p
    return nnet.FlatParams(
        grad.w - backbone_prior.sigma_p.solve(delta) / backbone_prior.lam,
        grad.V - params.V / head_prior.tau,
    )
