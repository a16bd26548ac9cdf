#!/usr/bin/env python3
"""
测试精确后验（穷举）与 Monte-Carlo ELBO 估计
"""
import sys

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from _test_runner import run_tests
from s3c.errors import TooManyUnits
from s3c.inference import InferenceConfig, e_step, elbo, init_q
from s3c.model import log_joint, make_params
from s3c.oracle import enumerate_configs, exact_posterior, kl_q_to_exact, mc_elbo_estimate


def _random_params(rng: np.random.Generator, D: int, N: int):
    return make_params(
        rng.standard_normal((D, N)),
        b=rng.normal(-1.0, 1.0, N),
        mu=rng.normal(0.0, 1.0, N),
        alpha=rng.uniform(0.5, 2.0, N),
        beta=rng.uniform(0.5, 2.0, D),
        normalize=True,
    )


def test_enumerate_configs_order():
    configs = enumerate_configs(3)
    assert configs.shape == (8, 3)
    assert np.array_equal(configs[5], [1.0, 0.0, 1.0])


def test_single_unit_posterior_example():
    post = exact_posterior(make_params([[1.0]]), [0.0])
    assert post.marginal_h()[0] == pytest.approx(1.0 / (1.0 + np.sqrt(2.0)), abs=1e-12)


def test_strong_negative_bias_keeps_all_off():
    p = make_params(np.eye(3), b=-30.0)
    post = exact_posterior(p, [0.5, -1.0, 0.2])
    assert np.exp(post.config_log_probs[0]) == pytest.approx(1.0, abs=1e-10)


def test_config_probabilities_normalized():
    rng = np.random.default_rng(0)
    p = _random_params(rng, 6, 5)
    post = exact_posterior(p, rng.standard_normal(6))
    assert logsumexp(post.config_log_probs) == pytest.approx(0.0, abs=1e-10)
    assert np.exp(post.config_log_probs).sum() == pytest.approx(1.0, abs=1e-10)
    for cov in post.slab_covs:
        assert np.allclose(cov, cov.T)
        assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_log_evidence_matches_quadrature():
    p = make_params([[1.0]], b=0.3, mu=0.7, alpha=1.5, beta=2.0)
    v = 0.4
    grid = np.linspace(-12.0, 12.0, 24001)
    total = 0.0
    for h in (0.0, 1.0):
        dens = np.exp([log_joint(p, [v], [s], [h]) for s in grid])
        total += trapezoid(dens, grid)
    assert exact_posterior(p, [v]).log_evidence == pytest.approx(np.log(total), abs=1e-6)


def test_orthogonal_columns_factorize():
    p = make_params(np.eye(2), b=[0.2, -0.4], mu=[1.0, -0.5], alpha=[1.5, 0.7])
    v = np.array([0.8, -1.1])
    joint = exact_posterior(p, v).marginal_h()
    for i in range(2):
        single = make_params([[1.0]], b=p.b[i], mu=p.mu[i], alpha=p.alpha[i])
        assert joint[i] == pytest.approx(exact_posterior(single, [v[i]]).marginal_h()[0], abs=1e-12)


def test_too_many_units():
    p = make_params(np.eye(20))
    with pytest.raises(TooManyUnits):
        exact_posterior(p, np.zeros(20))


def test_kl_zero_at_exact_single_unit_posterior():
    p = make_params([[1.0]], b=-0.5, mu=0.3, alpha=0.8, beta=1.7)
    v = [1.2]
    h_hat, s_hat = exact_posterior(p, v).factorial_q()
    assert kl_q_to_exact(p, v, h_hat, s_hat) == pytest.approx(0.0, abs=1e-9)


def test_kl_non_negative_and_identity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = _random_params(rng, 5, 4)
        v = rng.standard_normal(5)
        h = rng.uniform(0.01, 0.99, 4)
        s = rng.normal(0.0, 1.5, 4)
        kl = kl_q_to_exact(p, v, h, s)
        assert kl >= -1e-9
        assert kl + elbo(p, v, h, s) == pytest.approx(exact_posterior(p, v).log_evidence, abs=1e-9)


def test_e_step_reduces_kl():
    rng = np.random.default_rng(2)
    cfg = InferenceConfig(max_iters=50, elbo_tol=0.0, record_trace=False)
    for _ in range(100):
        p = _random_params(rng, 5, 3)
        v = rng.standard_normal(5)
        q0 = init_q(p, 1)
        state, _ = e_step(p, v[None], cfg)
        before = kl_q_to_exact(p, v, q0.h_hat[0], q0.s_hat[0])
        after = kl_q_to_exact(p, v, state.h_hat[0], state.s_hat[0])
        assert after <= before + 1e-9


def test_mc_estimate_matches_closed_form_elbo():
    rng = np.random.default_rng(3)
    gaps, errors = [], []
    for k in range(20):
        p = _random_params(rng, int(rng.integers(2, 7)), int(rng.integers(1, 5)))
        v = rng.standard_normal(p.D)
        if k % 2 == 0:
            state, _ = e_step(p, v[None], InferenceConfig(max_iters=30))
            h, s = state.h_hat[0], state.s_hat[0]
        else:
            h, s = rng.uniform(0.05, 0.95, p.N), rng.normal(0.0, 1.0, p.N)
        estimate, se = mc_elbo_estimate(p, v, h, s, n_samples=100000, seed=7 + k)
        assert abs(estimate - elbo(p, v, h, s)) <= 4.0 * se
        gaps.append(estimate - elbo(p, v, h, s))
        errors.append(se)
    # 20 个独立估计合在一起：总偏差在 3 个合并标准误以内
    assert abs(np.sum(gaps)) <= 3.0 * np.sqrt(np.sum(np.square(errors)))


def test_mc_estimate_with_units_clamped_off():
    p = make_params(np.eye(2), b=[-1.0, 0.5], mu=[0.5, -0.5])
    v = [0.3, -0.2]
    h = np.full(2, 1e-7)
    s = np.zeros(2)
    estimate, se = mc_elbo_estimate(p, v, h, s, n_samples=20000, seed=1)
    # 几乎所有样本 h=0，此时 log p(s|h) 与 log Q(s|h) 相消，估计几乎无方差
    assert abs(estimate - elbo(p, v, h, s)) <= 3.0 * se + 1e-4


def test_mc_estimate_is_deterministic():
    p = _random_params(np.random.default_rng(4), 4, 3)
    v = np.zeros(4)
    h, s = np.full(3, 0.3), np.ones(3)
    assert mc_elbo_estimate(p, v, h, s, 1000, 9) == mc_elbo_estimate(p, v, h, s, 1000, 9)


def main() -> int:
    return run_tests(dict(globals()), "精确后验")


if __name__ == "__main__":
    sys.exit(main())
