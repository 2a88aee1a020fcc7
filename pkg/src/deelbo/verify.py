"""Self-checks against independent dense-matrix and finite-difference oracles.

Library functions are looked up through their modules at call time (``lg.logdet``
rather than a bound import), so patching a module attribute is enough to
inject a fault and watch the corresponding suite fail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from deelbo import lowrank_gaussian as lg
from deelbo import nnet
from deelbo import objective as obj
from deelbo import variational as vi


@dataclass
class CaseResult:
    suite: str
    case: str
    passed: bool
    observed: float
    expected: float

    def describe(self):
        status = "ok" if self.passed else "FAIL"
        return f"[{status}] {self.suite}/{self.case}: observed={self.observed!r} expected={self.expected!r}"


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def _close(a, b, rtol, atol=0.0):
    a, b = float(a), float(b)
    return math.isfinite(a) and abs(a - b) <= rtol * abs(b) + atol


def random_lowrank(rng, D, K, diag_range=(0.5, 2.0)):
    diag = rng.uniform(*diag_range, size=D)
    Q = rng.standard_normal((D, K))
    return lg.LowRankCov(diag, Q)


def dense_lowrank(diag, Q):
    """Build the dense covariance straight from its definition."""
    K = Q.shape[1]
    return 0.5 * np.diag(diag) + Q @ Q.T / (2 * K - 2)


def dense_gaussian_kl(m0, S0, m1, S1):
    """KL(N(m0, S0) || N(m1, S1)) with explicit inverses and slogdet."""
    k = len(m0)
    S1_inv = np.linalg.inv(S1)
    diff = m1 - m0
    _, ld0 = np.linalg.slogdet(S0)
    _, ld1 = np.linalg.slogdet(S1)
    return 0.5 * (np.trace(S1_inv @ S0) + diff @ S1_inv @ diff - k + ld1 - ld0)


def woodbury_suite(n_instances=20, ks=(2, 3, 5), max_dim=50, n_deltas=20, seed=0, rtol=1e-8):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_instances):
        K = ks[i % len(ks)]
        D = int(rng.integers(K, max_dim + 1))
        cov = random_lowrank(rng, D, K)
        dense = dense_lowrank(np.asarray(cov.diag), np.asarray(cov.Q))
        inv = np.linalg.inv(dense)
        tag = f"D={D},K={K},#{i}"
        tr, tr_ref = lg.trace_inverse(cov), float(np.trace(inv))
        out.append(CaseResult("woodbury", f"trace_inverse[{tag}]", _close(tr, tr_ref, rtol), tr, tr_ref))
        ld, ld_ref = lg.logdet(cov), float(np.linalg.slogdet(dense)[1])
        out.append(CaseResult("woodbury", f"logdet[{tag}]", _close(ld, ld_ref, rtol, 1e-12), ld, ld_ref))
        worst, worst_pair = 0.0, (0.0, 0.0)
        for _ in range(n_deltas):
            delta = rng.standard_normal(D)
            m, m_ref = lg.mahalanobis_sq(cov, delta), float(delta @ inv @ delta)
            err = rel_err(m, m_ref) if math.isfinite(m) else math.inf
            if err >= worst:
                worst, worst_pair = err, (m, m_ref)
        out.append(CaseResult("woodbury", f"mahalanobis_sq[{tag}]", worst <= rtol, *worst_pair))
    return out


def _random_posterior(rng, D, head_shape, sigma_range=(0.05, 1.0)):
    sigma = rng.uniform(*sigma_range)
    return vi.PosteriorParams(
        rng.standard_normal(D), rng.standard_normal(head_shape), vi.softplus_inverse(sigma)
    )


def _random_prior(rng, kind, D):
    mu = rng.standard_normal(D)
    lam = float(np.exp(rng.uniform(-2, 2)))
    if kind == "ptyl":
        return vi.BackbonePrior.ptyl(mu, random_lowrank(rng, D, int(rng.choice([2, 3, 5]))), lam)
    return vi.BackbonePrior.l2sp(mu, lam)


def kl_suite(n_cases=10, max_dim=20, seed=1, rtol=1e-8):
    """Closed-form KLs against the dense Gaussian formula."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_cases):
        D = int(rng.integers(5, max_dim + 1))
        head_shape = (int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        post = _random_posterior(rng, D, head_shape)
        var = post.sigma_bar ** 2
        for kind in ("l2sp", "ptyl"):
            prior = _random_prior(rng, kind, D)
            S1 = prior.lam * prior.sigma_p.to_dense()
            ref = dense_gaussian_kl(post.w_bar, var * np.eye(D), prior.mu_p, S1)
            got = vi.kl_backbone(post, prior)
            out.append(CaseResult("kl", f"kl_backbone[{kind},D={D},#{i}]", _close(got, ref, rtol), got, ref))
        head = vi.HeadPrior(float(np.exp(rng.uniform(-2, 2))))
        d = post.head_dim
        ref = dense_gaussian_kl(post.V_bar.ravel(), var * np.eye(d), np.zeros(d), head.tau * np.eye(d))
        got = vi.kl_head(post, head)
        out.append(CaseResult("kl", f"kl_head[d={d},#{i}]", _close(got, ref, rtol), got, ref))
    return out


def mc_kl(post_mean, sigma, prior_mean, prior_cov, n_samples, rng, chunk=20_000):
    """Monte Carlo ``E_q[log q - log p]`` and its standard error."""
    D = len(post_mean)
    chol = np.linalg.cholesky(prior_cov)
    _, logdet_p = np.linalg.slogdet(prior_cov)
    const_q = -0.5 * D * math.log(2 * math.pi * sigma ** 2)
    const_p = -0.5 * (D * math.log(2 * math.pi) + logdet_p)
    vals = []
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        eps = rng.standard_normal((m, D))
        x = post_mean + sigma * eps
        log_q = const_q - 0.5 * np.sum(eps ** 2, axis=1)
        z = np.linalg.solve(chol, (x - prior_mean).T)
        log_p = const_p - 0.5 * np.sum(z ** 2, axis=0)
        vals.append(log_q - log_p)
    vals = np.concatenate(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


def kl_mc_suite(n_cases=3, max_dim=20, n_samples=20_000, seed=2, n_se=4.0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_cases):
        D = int(rng.integers(5, max_dim + 1))
        post = _random_posterior(rng, D, (2, 3), sigma_range=(0.3, 1.0))
        for kind in ("l2sp", "ptyl"):
            prior = _random_prior(rng, kind, D)
            est, se = mc_kl(
                post.w_bar, post.sigma_bar, prior.mu_p, prior.lam * prior.sigma_p.to_dense(), n_samples, rng
            )
            got = vi.kl_backbone(post, prior)
            out.append(CaseResult("kl", f"kl_backbone_mc[{kind},D={D},#{i}]", abs(got - est) <= n_se * se, got, est))
        head = vi.HeadPrior(float(np.exp(rng.uniform(-1, 1))))
        d = post.head_dim
        est, se = mc_kl(post.V_bar.ravel(), post.sigma_bar, np.zeros(d), head.tau * np.eye(d), n_samples, rng)
        got = vi.kl_head(post, head)
        out.append(CaseResult("kl", f"kl_head_mc[d={d},#{i}]", abs(got - est) <= n_se * se, got, est))
    return out


def update_suite(n_states=20, seed=3, n_random=100):
    """Stationarity, optimality and concavity of the closed-form lam and tau."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_states):
        D = int(rng.integers(3, 30))
        post = _random_posterior(rng, D, (int(rng.integers(2, 5)), int(rng.integers(2, 5))))
        prior = _random_prior(rng, "ptyl" if i % 2 else "l2sp", D)

        lam = vi.lambda_star(post, prior)
        kl_lam = lambda l: vi.kl_backbone(post, prior.with_lambda(l))
        out.extend(_scale_checks("lambda", i, lam, kl_lam, vi.second_derivative_lambda(post, prior), rng, n_random))

        tau = vi.tau_star(post)
        kl_tau = lambda t: vi.kl_head(post, vi.HeadPrior(t))
        out.extend(_scale_checks("tau", i, tau, kl_tau, vi.second_derivative_tau(post), rng, n_random))
    return out


def _scale_checks(name, i, star, kl_fn, second, rng, n_random):
    # derivative in log-scale units so the tolerance is scale-free
    h = 1e-4
    fd = (kl_fn(star * math.exp(h)) - kl_fn(star * math.exp(-h))) / (2 * h)
    scale = max(1.0, abs(kl_fn(star)))
    base = kl_fn(star)
    others = star * np.exp(rng.uniform(-5, 5, size=n_random))
    worst = min(kl_fn(float(v)) - base for v in others)
    return [
        CaseResult("updates", f"{name}_stationary[#{i}]", abs(fd) < 1e-6 * scale, fd, 0.0),
        CaseResult("updates", f"{name}_minimizes_kl[#{i}]", worst >= -1e-12 * scale, worst, 0.0),
        CaseResult("updates", f"{name}_concave[#{i}]", second < 0.0, second, 0.0),
    ]


def _tiny_problem(rng, kind="ptyl", n=12):
    spec = nnet.ModelSpec(3, (4,), 3, 3)
    X = rng.standard_normal((n, spec.input_dim))
    y = rng.integers(0, spec.num_classes, size=n)
    batch = nnet.Batch(X, y)
    if kind == "ptyl":
        prior = vi.BackbonePrior.ptyl(rng.standard_normal(spec.D) * 0.3, random_lowrank(rng, spec.D, 3), 0.7)
    elif kind == "l2sp":
        prior = vi.BackbonePrior.l2sp(rng.standard_normal(spec.D) * 0.3, 0.7)
    else:
        prior = vi.BackbonePrior.l2zero(spec.D, 0.7)
    return spec, batch, prior


def gradient_suite(seed=4, rtol=1e-4):
    """ELBo gradient vs central differences at frozen noise; MAP vs log-joint gradient."""
    rng = np.random.default_rng(seed)
    out = []
    spec, batch, prior = _tiny_problem(rng, "ptyl")
    post = _random_posterior(rng, spec.D, spec.head_shape, sigma_range=(0.05, 0.3))
    head = vi.HeadPrior(1.3)
    cfg = obj.ObjectiveConfig(kappa=5.0, mc_samples=2, minibatch_scale=2.0)
    noises = [vi.draw_noise(post, rng) for _ in range(2)]
    _, grad = obj.elbo_and_grad_with_noise(spec, post, prior, head, batch, cfg, noises)
    g = grad.to_vector()
    theta = np.concatenate([post.w_bar, post.V_bar.ravel(), [post.rho]])

    def f(vec):
        p = vi.PosteriorParams(vec[: spec.D], vec[spec.D : -1].reshape(spec.head_shape), vec[-1])
        return obj.elbo_terms(spec, p, prior, head, batch, cfg, noises).value

    fd = _central_diff(f, theta, 1e-6)
    err = float(np.linalg.norm(g - fd) / np.linalg.norm(fd))
    out.append(CaseResult("gradients", "elbo_grad_vs_fd", err < rtol, err, 0.0))

    for kind in ("l2zero", "l2sp", "ptyl"):
        spec, batch, prior = _tiny_problem(rng, kind)
        params = nnet.init_params(spec, rng)
        params = nnet.FlatParams(params.w, rng.standard_normal(spec.head_shape))
        lam, tau = 0.7, 1.9
        N = len(batch.y)
        _, gmap = obj.map_loss_and_grad(spec, params, batch, obj.MapHyperparams.from_scales(lam, tau), prior)
        gj = obj.log_joint_grad(spec, params, batch, prior.with_lambda(lam), vi.HeadPrior(tau))
        a, b = gmap.to_vector(), -gj.to_vector() / N
        err = float(np.linalg.norm(a - b) / np.linalg.norm(b))
        out.append(CaseResult("gradients", f"map_vs_log_joint[{kind}]", err < 1e-6, err, 0.0))
    return out


def _central_diff(f, x, h):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


SUITES = {
    "woodbury": woodbury_suite,
    "kl": lambda: kl_suite() + kl_mc_suite(),
    "updates": update_suite,
    "gradients": gradient_suite,
}


def run_all(suites=None):
    """Run the named suites (all by default); returns ``{suite: [CaseResult, ...]}``."""
    names = list(SUITES) if suites is None else list(suites)
    report = {}
    for name in names:
        try:
            report[name] = SUITES[name]()
        except Exception as exc:  # a crash counts as a failed case, not a crashed report
            report[name] = [CaseResult(name, f"crashed: {type(exc).__name__}: {exc}", False, math.nan, math.nan)]
    return report
