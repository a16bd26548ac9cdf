#!/usr/bin/env python3
"""
测试变分 EM：M 步梯度（有限差分）、投影与截断、训练循环的确定性与收敛表现
"""
import sys

import numpy as np
import pytest

from _test_runner import run_tests
from s3c.errors import ConfigError, EmptyDataset, ZeroColumn
from s3c.inference import InferenceConfig, VariationalState, e_step, slab_variances, sparsity_fraction
from s3c.learning import (
    LearningRates,
    ParamGradients,
    RandomInitSpec,
    TrainConfig,
    apply_m_step,
    frozen_energy,
    m_step_gradients,
    random_init,
    smoothed,
    train_em,
)
from s3c.model import ModelParams, make_params, sample_ancestral

FD_STEP = 1e-5


def _random_params(rng: np.random.Generator, D: int, N: int, beta_tied: bool = False) -> ModelParams:
    beta = rng.uniform(0.5, 2.0) if beta_tied else rng.uniform(0.5, 2.0, D)
    return make_params(
        rng.standard_normal((D, N)),
        b=rng.normal(-1.0, 1.0, N),
        mu=rng.normal(0.0, 1.0, N),
        alpha=rng.uniform(0.5, 2.0, N),
        beta=beta,
        beta_tied=beta_tied,
        normalize=True,
    )


def _random_q(rng: np.random.Generator, M: int, N: int) -> VariationalState:
    return VariationalState(h_hat=rng.uniform(0.05, 0.95, (M, N)), s_hat=rng.normal(0.0, 1.5, (M, N)))


def _central_difference(params: ModelParams, V, q, name: str, index, direction=None) -> float:
    var_on, var_off = slab_variances(params)

    def _shifted(delta: float) -> float:
        arr = np.array(getattr(params, name))
        if direction is None:
            arr[index] += delta
        else:
            arr = arr + delta * direction
        return frozen_energy(params.with_updates(**{name: arr}), V, q, var_on, var_off)

    return (_shifted(FD_STEP) - _shifted(-FD_STEP)) / (2.0 * FD_STEP)


def _assert_close(analytic: float, numeric: float) -> None:
    assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(numeric))


def _check_all_groups(params: ModelParams, V, q) -> None:
    grads = m_step_gradients(params, V, q)
    for name, grad in (("b", grads.db), ("mu", grads.dmu), ("alpha", grads.dalpha)):
        for i in range(params.N):
            _assert_close(grad[i], _central_difference(params, V, q, name, i))
    for d in range(params.D):
        for i in range(params.N):
            _assert_close(grads.dW[d, i], _central_difference(params, V, q, "W", (d, i)))
    if params.beta_tied:
        # 共享 beta：所有维一起扰动，方向导数 = D * 广播的梯度
        numeric = _central_difference(params, V, q, "beta", None, direction=np.ones(params.D))
        assert np.all(grads.dbeta == grads.dbeta[0])
        _assert_close(params.D * grads.dbeta[0], numeric)
    else:
        for d in range(params.D):
            _assert_close(grads.dbeta[d], _central_difference(params, V, q, "beta", d))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    params = _random_params(rng, 6, 4)
    V = rng.standard_normal((12, 6))
    _check_all_groups(params, V, _random_q(rng, 12, 4))


def test_gradients_match_finite_differences_tied_beta():
    rng = np.random.default_rng(1)
    params = _random_params(rng, 5, 3, beta_tied=True)
    V = rng.standard_normal((9, 5))
    _check_all_groups(params, V, _random_q(rng, 9, 3))


def test_mu_gradient_zero_when_units_off():
    rng = np.random.default_rng(2)
    params = _random_params(rng, 4, 3)
    q = VariationalState(h_hat=np.zeros((5, 3)), s_hat=rng.standard_normal((5, 3)))
    grads = m_step_gradients(params, rng.standard_normal((5, 4)), q)
    assert np.all(grads.dmu == 0.0)


def test_gradients_small_at_generating_params():
    truth = make_params(np.ones((4, 1)), b=0.0, mu=2.0, alpha=4.0, beta=2.0, normalize=True)
    V, _, _ = sample_ancestral(truth, 3, 10000)
    # N=1 时无阻尼、无裁剪的 E 步给出精确后验
    cfg = InferenceConfig(eta_s=1.0, eta_h=1.0, clip=False, max_iters=5, elbo_tol=0.0, record_trace=False)

    def _total_norm(params: ModelParams) -> float:
        q, _ = e_step(params, V, cfg)
        return float(np.sqrt(sum(n ** 2 for n in m_step_gradients(params, V, q).norms().values())))

    rng = np.random.default_rng(4)
    wrong = make_params(rng.standard_normal((4, 1)), b=-1.0, mu=0.5, alpha=1.0, beta=0.5, normalize=True)
    assert _total_norm(truth) < 0.1 * _total_norm(wrong)


def test_apply_zero_gradients_is_identity():
    params = _random_params(np.random.default_rng(5), 6, 4)
    out = apply_m_step(params, ParamGradients.zeros_like(params), LearningRates(), 1e-8)
    assert np.allclose(out.W, params.W, atol=1e-15)
    for name in ("b", "mu", "alpha", "beta"):
        assert np.array_equal(getattr(out, name), getattr(params, name))


def test_apply_floors_alpha():
    params = make_params(np.eye(2), alpha=1.0)
    grads = ParamGradients.zeros_like(params)
    grads.dalpha = np.array([-2.0, 0.0])
    out = apply_m_step(params, grads, LearningRates(alpha=1.0), 1e-8)
    assert out.alpha[0] == 1e-8
    assert out.alpha[1] == 1.0


def test_apply_renormalizes_columns():
    rng = np.random.default_rng(6)
    params = _random_params(rng, 7, 5)
    grads = ParamGradients.zeros_like(params)
    grads.dW = rng.standard_normal((7, 5)) * 10.0
    out = apply_m_step(params, grads, LearningRates(W=0.3), 1e-8)
    assert np.allclose(np.linalg.norm(out.W, axis=0), 1.0, atol=1e-10)


def test_apply_zero_column_raises():
    params = make_params(np.eye(3))
    grads = ParamGradients.zeros_like(params)
    grads.dW = -np.asarray(params.W) / 1e-2
    grads.dW[:, 0] = 0.0
    with pytest.raises(ZeroColumn) as exc_info:
        apply_m_step(params, grads, LearningRates(W=1e-2), 1e-8)
    assert exc_info.value.fields["column"] == 1


def test_random_init():
    params = random_init(RandomInitSpec(n_units=5, target_sparsity=0.1, seed=3), 8)
    assert params.W.shape == (8, 5)
    assert np.allclose(np.linalg.norm(params.W, axis=0), 1.0)
    assert np.allclose(1.0 / (1.0 + np.exp(-params.b)), 0.1)
    again = random_init(RandomInitSpec(n_units=5, target_sparsity=0.1, seed=3), 8)
    assert np.array_equal(params.W, again.W)
    with pytest.raises(ConfigError):
        random_init(RandomInitSpec(n_units=0), 8)


def test_zero_epochs_returns_init():
    init = _random_params(np.random.default_rng(7), 4, 3)
    params, log = train_em(np.zeros((10, 4)), TrainConfig(epochs=0), init)
    assert params is init
    assert log.empty


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train_em(np.zeros((0, 4)), TrainConfig(), RandomInitSpec(n_units=2))


def _small_config(**kw) -> TrainConfig:
    base = dict(
        batch_size=20,
        epochs=2,
        seed=5,
        inference=InferenceConfig(max_iters=10, record_trace=False),
    )
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic():
    V = np.random.default_rng(8).standard_normal((100, 6))
    spec = RandomInitSpec(n_units=4, seed=1)
    a, log_a = train_em(V, _small_config(), spec)
    b, log_b = train_em(V, _small_config(), spec)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)
    assert log_a["batch_elbo"].tolist() == log_b["batch_elbo"].tolist()
    assert list(log_a.columns) == ["step", "epoch", "batch_elbo", "mean_sparsity", "wall_time"]
    assert len(log_a) == 10


def test_training_independent_of_workers():
    V = np.random.default_rng(9).standard_normal((60, 5))
    spec = RandomInitSpec(n_units=3, seed=2)
    a, _ = train_em(V, _small_config(), spec, workers=1)
    b, _ = train_em(V, _small_config(), spec, workers=3)
    assert np.array_equal(a.W, b.W)
    assert np.array_equal(a.beta, b.beta)


def test_trained_params_stay_valid():
    V = np.random.default_rng(10).standard_normal((80, 5)) * 3.0
    params, _ = train_em(V, _small_config(epochs=3), RandomInitSpec(n_units=4, seed=3, beta_tied=True))
    assert np.allclose(np.linalg.norm(params.W, axis=0), 1.0, atol=1e-10)
    assert np.all(params.alpha > 0) and np.all(params.beta > 0)
    assert np.all(params.beta == params.beta[0])


def test_smoothed_window():
    out = smoothed([1.0, 2.0, 3.0, 4.0], window=2)
    assert out.tolist() == [1.0, 1.5, 2.5, 3.5]


def _ground_truth(D: int, N: int, sparsity: float, seed: int) -> ModelParams:
    base = random_init(RandomInitSpec(n_units=N, target_sparsity=sparsity, seed=seed), D)
    return base.with_updates(mu=np.full(N, 2.0), alpha=np.full(N, 4.0), beta=np.full(D, 10.0))


@pytest.mark.slow
def test_batch_elbo_improves_during_first_epoch():
    truth = _ground_truth(16, 8, 0.1, seed=11)
    V, _, _ = sample_ancestral(truth, 12, 5000)
    cfg = TrainConfig(
        batch_size=50,
        epochs=1,
        seed=13,
        learning_rates=LearningRates(W=0.05, b=0.05, mu=0.05, alpha=0.01, beta=0.01),
        inference=InferenceConfig(max_iters=20, record_trace=False),
    )
    _, log = train_em(V, cfg, RandomInitSpec(n_units=8, target_sparsity=0.1, seed=14))
    curve = smoothed(log["batch_elbo"].to_numpy(), window=100)
    assert curve[-1] > log["batch_elbo"].iloc[0]


@pytest.mark.slow
def test_dictionary_recovery():
    truth = _ground_truth(16, 8, 0.1, seed=21)
    V, _, _ = sample_ancestral(truth, 22, 10000)
    cfg = TrainConfig(
        batch_size=100,
        epochs=10,
        seed=23,
        learning_rates=LearningRates(W=0.05, b=0.05, mu=0.05, alpha=0.01, beta=0.01),
        inference=InferenceConfig(max_iters=20, record_trace=False),
    )
    # 字典大小与真值相同，从随机初始化学起
    learned, _ = train_em(V, cfg, RandomInitSpec(n_units=8, target_sparsity=0.1, seed=24))
    cos = np.abs(np.asarray(truth.W).T @ np.asarray(learned.W))
    assert int(np.sum(cos.max(axis=1) >= 0.9)) >= 6


@pytest.mark.slow
def test_sparse_codes_after_training():
    truth = _ground_truth(36, 100, 0.02, seed=31)
    V_train, _, _ = sample_ancestral(truth, 32, 10000)
    V_test, _, _ = sample_ancestral(truth, 33, 500)
    cfg = TrainConfig(batch_size=100, epochs=2, seed=34, inference=InferenceConfig(max_iters=20, record_trace=False))
    # 从随机初始化训练，再在留出数据上推断
    params, _ = train_em(V_train, cfg, RandomInitSpec(n_units=100, target_sparsity=0.02, seed=35))
    state, trace = e_step(params, V_test, InferenceConfig(max_iters=50, elbo_tol=0.0))
    assert sparsity_fraction(state.h_hat) >= 0.80
    assert trace.sparsity[-1] > trace.sparsity[1]


def main() -> int:
    return run_tests(dict(globals()), "变分 EM 学习")


if __name__ == "__main__":
    sys.exit(main())
