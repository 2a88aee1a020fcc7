import numpy as np
import pytest
from scipy.stats import multivariate_normal

from deelbo import nnet
from deelbo import objective as obj
from deelbo import variational as vi
from deelbo.errors import InvalidHyperparameterError
from deelbo.nnet import FlatParams

from conftest import central_diff


def make_post(rng, spec, sigma=0.2):
    return vi.PosteriorParams(
        0.5 * rng.standard_normal(spec.D), rng.standard_normal(spec.head_shape), vi.softplus_inverse(sigma)
    )


def flat(post):
    return np.concatenate([post.w_bar, post.V_bar.ravel(), [post.rho]])


class TestKappa:
    def test_d_over_n(self):
        assert obj.resolve_kappa("D/N", 5000, 100) == 50.0
        assert obj.resolve_kappa("d-over-n", 5000, 100) == 50.0

    def test_clipped_at_one(self):
        assert obj.resolve_kappa("D/N", 10, 100) == 1.0

    def test_numeric_passthrough(self):
        assert obj.resolve_kappa(3, 10, 10) == 3.0

    def test_bad_mode(self):
        with pytest.raises(InvalidHyperparameterError):
            obj.resolve_kappa("sqrt", 10, 10)
        with pytest.raises(InvalidHyperparameterError):
            obj.resolve_kappa("D/N", 10, 0)

    @pytest.mark.parametrize("kwargs", [dict(kappa=0.5), dict(mc_samples=0), dict(minibatch_scale=0.0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(InvalidHyperparameterError):
            obj.ObjectiveConfig(**kwargs)


class TestElbo:
    def test_terms_assemble(self, rng, tiny_spec, tiny_batch, any_prior):
        post = make_post(rng, tiny_spec)
        head = vi.HeadPrior(0.9)
        noises = [vi.draw_noise(post, rng) for _ in range(3)]
        cfg = obj.ObjectiveConfig(kappa=4.0, mc_samples=3, minibatch_scale=2.0)
        terms = obj.elbo_terms(tiny_spec, post, any_prior, head, tiny_batch, cfg, noises)
        ll = np.mean([nnet.log_likelihood(tiny_spec, vi.apply_noise(post, n), tiny_batch) for n in noises])
        assert terms.value == pytest.approx(8.0 * ll - vi.kl_backbone(post, any_prior) - vi.kl_head(post, head))

    def test_gradient_matches_frozen_noise_fd(self, rng, tiny_spec, tiny_batch, any_prior):
        post = make_post(rng, tiny_spec)
        head = vi.HeadPrior(1.4)
        noises = [vi.draw_noise(post, rng) for _ in range(2)]
        cfg = obj.ObjectiveConfig(kappa=3.0, mc_samples=2, minibatch_scale=1.5)
        value, grad = obj.elbo_and_grad_with_noise(tiny_spec, post, any_prior, head, tiny_batch, cfg, noises)
        D = tiny_spec.D

        def f(v):
            p = vi.PosteriorParams(v[:D], v[D:-1].reshape(tiny_spec.head_shape), v[-1])
            return obj.elbo_terms(tiny_spec, p, any_prior, head, tiny_batch, cfg, noises).value

        theta = flat(post)
        assert value == pytest.approx(f(theta), rel=1e-12)
        fd = central_diff(f, theta)
        assert np.linalg.norm(grad.to_vector() - fd) / np.linalg.norm(fd) < 1e-6

    def test_seeded_estimate_is_reproducible(self, rng, tiny_spec, tiny_batch):
        post = make_post(rng, tiny_spec)
        prior = vi.BackbonePrior.l2zero(tiny_spec.D)
        cfg = obj.ObjectiveConfig(mc_samples=4)
        a = obj.elbo(tiny_spec, post, prior, vi.HeadPrior(), tiny_batch, cfg, np.random.default_rng(3))
        b = obj.elbo(tiny_spec, post, prior, vi.HeadPrior(), tiny_batch, cfg, np.random.default_rng(3))
        assert a == b
        g = obj.elbo_grad(tiny_spec, post, prior, vi.HeadPrior(), tiny_batch, cfg, np.random.default_rng(3))
        assert np.all(np.isfinite(g.to_vector()))

    @pytest.mark.parametrize("kappa", [1.5, 10.0, 1000.0])
    def test_data_emphasis_lowers_bound(self, rng, tiny_spec, tiny_batch, kappa):
        post = make_post(rng, tiny_spec)
        prior = vi.BackbonePrior.l2sp(post.w_bar)
        std = obj.elbo(tiny_spec, post, prior, vi.HeadPrior(), tiny_batch, obj.ObjectiveConfig(1.0), np.random.default_rng(7))
        de = obj.elbo(tiny_spec, post, prior, vi.HeadPrior(), tiny_batch, obj.ObjectiveConfig(kappa), np.random.default_rng(7))
        assert de <= std

    def test_bound_on_evidence_for_gaussian_head(self):
        # linear-Gaussian sanity check of the KL sign convention: for any q,
        # E_q[log p(y|x)] - KL(q||p) is below log p(y) computed in closed form
        rng = np.random.default_rng(0)
        d, n = 3, 5
        X = rng.standard_normal((n, d))
        y = X @ rng.standard_normal(d) + 0.3 * rng.standard_normal(n)
        log_evidence = multivariate_normal(np.zeros(n), X @ X.T + np.eye(n)).logpdf(y)
        for _ in range(5):
            m, s = rng.standard_normal(d), rng.uniform(0.1, 1.0)
            post = vi.PosteriorParams(m, np.zeros((2, 2)), vi.softplus_inverse(s))
            kl = vi.kl_backbone(post, vi.BackbonePrior.l2zero(d))
            r = y - X @ m
            exp_ll = -0.5 * n * np.log(2 * np.pi) - 0.5 * (r @ r + s ** 2 * np.sum(X ** 2))
            assert exp_ll - kl <= log_evidence + 1e-12


class TestMap:
    def test_loss_definition(self, rng, tiny_spec, tiny_batch, any_prior):
        params = FlatParams(rng.standard_normal(tiny_spec.D), rng.standard_normal(tiny_spec.head_shape))
        hp = obj.MapHyperparams(2.0, 3.0)
        N = 40
        delta = params.w - any_prior.mu_p
        maha = delta @ np.linalg.solve(any_prior.sigma_p.to_dense(), delta)
        expected = (
            -nnet.log_likelihood(tiny_spec, params, tiny_batch) / 10
            + 2.0 / (2 * N) * maha
            + 3.0 / (2 * N) * np.sum(params.V ** 2)
        )
        assert obj.map_loss(tiny_spec, params, tiny_batch, hp, any_prior, n_total=N) == pytest.approx(expected)

    def test_gradient_fd(self, rng, tiny_spec, tiny_batch, any_prior):
        hp = obj.MapHyperparams(0.7, 1.3)
        theta = np.concatenate([rng.standard_normal(tiny_spec.D), rng.standard_normal(tiny_spec.head_dim)])
        f = lambda v: obj.map_loss(tiny_spec, FlatParams.from_vector(tiny_spec, v), tiny_batch, hp, any_prior, 25)
        _, g = obj.map_loss_and_grad(tiny_spec, FlatParams.from_vector(tiny_spec, theta), tiny_batch, hp, any_prior, 25)
        np.testing.assert_allclose(g.to_vector(), central_diff(f, theta), rtol=1e-6, atol=1e-8)

    def test_alpha_zero_ignores_backbone(self, rng, tiny_spec, tiny_batch):
        far = vi.BackbonePrior.l2sp(1e6 * np.ones(tiny_spec.D))
        params = nnet.init_params(tiny_spec, rng)
        a = obj.map_loss(tiny_spec, params, tiny_batch, obj.MapHyperparams(0.0, 0.0), far)
        b = obj.map_loss(tiny_spec, params, tiny_batch, obj.MapHyperparams(0.0, 0.0), vi.BackbonePrior.l2zero(tiny_spec.D))
        assert a == b

    def test_matches_log_joint(self, rng, tiny_spec, tiny_batch, any_prior):
        lam, tau = 0.4, 2.2
        params = FlatParams(rng.standard_normal(tiny_spec.D), rng.standard_normal(tiny_spec.head_shape))
        _, g = obj.map_loss_and_grad(tiny_spec, params, tiny_batch, obj.MapHyperparams.from_scales(lam, tau), any_prior)
        gj = obj.log_joint_grad(tiny_spec, params, tiny_batch, any_prior.with_lambda(lam), vi.HeadPrior(tau))
        np.testing.assert_allclose(g.to_vector(), -gj.to_vector() / 10, rtol=1e-10, atol=1e-12)

    def test_log_joint_normalizers(self, rng, tiny_spec, tiny_batch):
        prior = vi.BackbonePrior.l2sp(rng.standard_normal(tiny_spec.D), 0.5)
        params = FlatParams(rng.standard_normal(tiny_spec.D), rng.standard_normal(tiny_spec.head_shape))
        expected = (
            nnet.log_likelihood(tiny_spec, params, tiny_batch)
            + multivariate_normal(prior.mu_p, 0.5 * np.eye(tiny_spec.D)).logpdf(params.w)
            + multivariate_normal(np.zeros(tiny_spec.head_dim), 3.0 * np.eye(tiny_spec.head_dim)).logpdf(params.V.ravel())
        )
        got = obj.log_joint(tiny_spec, params, tiny_batch, prior, vi.HeadPrior(3.0))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_negative_penalty_rejected(self):
        with pytest.raises(InvalidHyperparameterError):
            obj.MapHyperparams(-1.0, 0.0)
