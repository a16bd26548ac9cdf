"""
变分 EM 训练：E 步（见 inference）+ 冻结 Q 的 M 步小步梯度上升 + W 列单位化投影。
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .errors import ConfigError, DimensionMismatch, EmptyDataset, NumericalDivergence, ZeroColumn
from .inference import (
    InferenceConfig,
    VariationalState,
    _rowwise,
    e_step,
    elbo,
    expected_log_joint,
    slab_variances,
    sparsity_fraction,
)
from .model import ModelParams, validate_params

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12


@dataclass
class LearningRates:
    W: float = 1e-2
    b: float = 1e-2
    mu: float = 1e-2
    alpha: float = 1e-3
    beta: float = 1e-3

    def validate(self) -> None:
        for key in ("W", "b", "mu", "alpha", "beta"):
            value = getattr(self, key)
            if not value > 0:
                raise ConfigError(f"lr_{key}", f"must be > 0, got {value}")


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 1
    learning_rates: LearningRates = field(default_factory=LearningRates)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    seed: int = 0
    alpha_beta_floor: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if not self.alpha_beta_floor > 0:
            raise ConfigError("alpha_beta_floor", f"must be > 0, got {self.alpha_beta_floor}")
        self.learning_rates.validate()
        self.inference.validate()


@dataclass
class RandomInitSpec:
    """随机初始化：W 元素 iid N(0,1) 后列单位化；b = logit(target_sparsity)；mu = alpha = beta = 1"""

    n_units: int
    target_sparsity: float = 0.05
    seed: int = 0
    beta_tied: bool = False

    def validate(self) -> None:
        if self.n_units < 1:
            raise ConfigError("n_units", f"must be >= 1, got {self.n_units}")
        if not 0.0 < self.target_sparsity < 1.0:
            raise ConfigError("target_sparsity", f"must be in (0, 1), got {self.target_sparsity}")


@dataclass
class ParamGradients:
    dW: np.ndarray
    db: np.ndarray
    dmu: np.ndarray
    dalpha: np.ndarray
    dbeta: np.ndarray

    def norms(self) -> Dict[str, float]:
        return {
            "W": float(np.linalg.norm(self.dW)),
            "b": float(np.linalg.norm(self.db)),
            "mu": float(np.linalg.norm(self.dmu)),
            "alpha": float(np.linalg.norm(self.dalpha)),
            "beta": float(np.linalg.norm(self.dbeta)),
        }

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "ParamGradients":
        return cls(
            dW=np.zeros_like(params.W),
            db=np.zeros_like(params.b),
            dmu=np.zeros_like(params.mu),
            dalpha=np.zeros_like(params.alpha),
            dbeta=np.zeros_like(params.beta),
        )


def random_init(spec: RandomInitSpec, n_visible: int) -> ModelParams:
    spec.validate()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(spec.seed)))
    W = rng.standard_normal((n_visible, spec.n_units))
    W /= np.linalg.norm(W, axis=0, keepdims=True)
    N = spec.n_units
    return ModelParams(
        W=W,
        b=np.full(N, float(logit(spec.target_sparsity))),
        mu=np.ones(N),
        alpha=np.ones(N),
        beta=np.ones(n_visible),
        beta_tied=spec.beta_tied,
    )


def frozen_energy(params: ModelParams, batch, q: VariationalState, var_on: np.ndarray, var_off: np.ndarray) -> float:
    """固定 Q（含其方差）时、与参数有关的批均值能量泛函；熵项为常数，省略"""
    V = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    return float(np.mean(expected_log_joint(params, V, q.h_hat, q.s_hat, var_on, var_off)))


def m_step_gradients(params: ModelParams, batch, q: VariationalState) -> ParamGradients:
    """
    批均值能量泛函对各参数组的梯度。Q 的条件方差用当前参数算一次后视为常数。
    beta_tied 时 dbeta 为各维梯度的均值，广播到全部 D 维。
    """
    V = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    H = np.atleast_2d(np.asarray(q.h_hat, dtype=np.float64))
    S = np.atleast_2d(np.asarray(q.s_hat, dtype=np.float64))
    if V.shape[1] != params.D:
        raise DimensionMismatch("batch", params.D, V.shape[1])
    if H.shape != (V.shape[0], params.N) or S.shape != H.shape:
        raise DimensionMismatch("q", (V.shape[0], params.N), H.shape)

    var_on, var_off = slab_variances(params)
    m = H * S
    resid = V - _rowwise(m, params.W.T)
    var_z = H * (S * S + var_on) - m * m
    diff = S - params.mu

    db = np.mean(H - expit(params.b), axis=0)
    dmu = np.mean(params.alpha * H * diff, axis=0)
    dalpha = 0.5 / params.alpha - 0.5 * np.mean(H * (diff * diff + var_on) + (1.0 - H) * var_off, axis=0)
    dbeta = 0.5 / params.beta - 0.5 * np.mean(resid * resid, axis=0) - 0.5 * (params.W ** 2) @ np.mean(var_z, axis=0)
    if params.beta_tied:
        dbeta = np.full_like(dbeta, float(np.mean(dbeta)))
    dW = params.beta[:, None] * ((resid.T @ m) / V.shape[0] - params.W * np.mean(var_z, axis=0))

    grads = ParamGradients(dW=dW, db=db, dmu=dmu, dalpha=dalpha, dbeta=dbeta)
    for arr in (dW, db, dmu, dalpha):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(arr)))
        if bad.size:
            raise NumericalDivergence(iteration=0, unit=int(bad[0][-1]))
    if not np.all(np.isfinite(dbeta)):
        raise NumericalDivergence(iteration=0, unit=-1)
    return grads


def apply_m_step(params: ModelParams, grads: ParamGradients, learning_rates: LearningRates, floor: float) -> ModelParams:
    """上升一步；W 列重新单位化，alpha/beta 截断到 floor"""
    W = params.W + learning_rates.W * grads.dW
    norms = np.linalg.norm(W, axis=0)
    small = np.flatnonzero(norms < ZERO_NORM)
    if small.size:
        raise ZeroColumn(int(small[0]))
    W = W / norms

    updated = params.with_updates(
        W=W,
        b=params.b + learning_rates.b * grads.db,
        mu=params.mu + learning_rates.mu * grads.dmu,
        alpha=np.maximum(params.alpha + learning_rates.alpha * grads.dalpha, floor),
        beta=np.maximum(params.beta + learning_rates.beta * grads.dbeta, floor),
    )
    validate_params(updated)
    return updated


class S3CTrainer:
    """
    小批量变分 EM 训练器。
    每个 epoch 用由 seed 派生的随机流打乱样本；每步 e_step -> m_step_gradients -> apply_m_step。
    """

    def __init__(self, cfg: TrainConfig, workers: int = 1, show_progress: bool = True) -> None:
        cfg.validate()
        self.cfg = cfg
        self.workers = max(1, int(workers))
        self.show_progress = show_progress
        self.records: List[Dict] = []

        # 统计信息
        self.stats = {
            "steps": 0,
            "epochs": 0,
            "examples": 0,
            "ascent_violations": 0,
        }

    def _prepare(self, data, init: Union[ModelParams, RandomInitSpec]) -> Tuple[np.ndarray, ModelParams]:
        X = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if X.shape[0] == 0 or X.size == 0:
            raise EmptyDataset("training data")
        params = random_init(init, X.shape[1]) if isinstance(init, RandomInitSpec) else init
        validate_params(params)
        if X.shape[1] != params.D:
            raise DimensionMismatch("data", params.D, X.shape[1])
        return X, params

    def step(self, params: ModelParams, batch: np.ndarray) -> Tuple[ModelParams, float, float]:
        state, trace = e_step(params, batch, self.cfg.inference, workers=self.workers)
        self.stats["ascent_violations"] += trace.total_violations
        batch_elbo = float(np.mean(elbo(params, batch, state.h_hat, state.s_hat)))
        sparsity = sparsity_fraction(state.h_hat)
        grads = m_step_gradients(params, batch, state)
        new_params = apply_m_step(params, grads, self.cfg.learning_rates, self.cfg.alpha_beta_floor)
        return new_params, batch_elbo, sparsity

    def fit(self, data, init: Union[ModelParams, RandomInitSpec]) -> ModelParams:
        from tqdm import tqdm

        X, params = self._prepare(data, init)
        M = X.shape[0]
        bs = self.cfg.batch_size
        n_batches = (M + bs - 1) // bs
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.cfg.seed)))
        start = time.perf_counter()

        logger.info("=" * 80)
        logger.info("开始训练: M=%d, D=%d, N=%d, epochs=%d, batch_size=%d", M, params.D, params.N, self.cfg.epochs, bs)

        step = 0
        for epoch in range(self.cfg.epochs):
            order = rng.permutation(M)
            with tqdm(total=n_batches, desc=f"🧠 EM epoch {epoch + 1}/{self.cfg.epochs}", unit="batch",
                      leave=True, disable=not self.show_progress) as pbar:
                for lo in range(0, M, bs):
                    batch = X[order[lo:lo + bs]]
                    try:
                        params, batch_elbo, sparsity = self.step(params, batch)
                    except NumericalDivergence as exc:
                        logger.error("训练在第 %d 步发散: %s", step, exc)
                        raise exc.at_step(step) from exc

                    self.records.append(
                        {
                            "step": step,
                            "epoch": epoch,
                            "batch_elbo": batch_elbo,
                            "mean_sparsity": sparsity,
                            "wall_time": time.perf_counter() - start,
                        }
                    )
                    self.stats["steps"] += 1
                    self.stats["examples"] += batch.shape[0]
                    step += 1
                    pbar.set_postfix(elbo=f"{batch_elbo:.3f}", sparsity=f"{sparsity:.3f}")
                    pbar.update(1)
            self.stats["epochs"] += 1

        self.log_statistics()
        return params

    def training_log(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=["step", "epoch", "batch_elbo", "mean_sparsity", "wall_time"])

    def log_statistics(self) -> None:
        logger.info("=" * 80)
        logger.info("训练统计:")
        logger.info("  - 步数: %d", self.stats["steps"])
        logger.info("  - epoch: %d", self.stats["epochs"])
        logger.info("  - 处理样本: %d", self.stats["examples"])
        logger.info("  - E 步 ELBO 下降次数: %d", self.stats["ascent_violations"])
        if self.records:
            logger.info("  - 最后一批 ELBO: %.6f", self.records[-1]["batch_elbo"])
            logger.info("  - 最后一批稀疏度: %.4f", self.records[-1]["mean_sparsity"])
        logger.info("=" * 80)


def train_em(
    data,
    cfg: TrainConfig,
    init: Union[ModelParams, RandomInitSpec],
    workers: int = 1,
    show_progress: bool = False,
) -> Tuple[ModelParams, pd.DataFrame]:
    trainer = S3CTrainer(cfg, workers=workers, show_progress=show_progress)
    params = trainer.fit(data, init)
    return params, trainer.training_log()


def smoothed(values, window: int = 100) -> np.ndarray:
    """训练曲线的滑动平均（窗口不足时按已有长度平均）"""
    return pd.Series(np.asarray(values, dtype=np.float64)).rolling(window, min_periods=1).mean().to_numpy()
