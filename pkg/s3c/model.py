"""
S3C 模型核心：参数、能量函数、对数联合概率、祖先采样、先验解析矩。

生成过程（对每个隐单元 i、可见维 d）：
  h_i ~ Bernoulli(sigmoid(b_i))
  s_i | h_i ~ N(h_i * mu_i, 1 / alpha_i)
  v_d | s, h ~ N(W_d: (h * s), 1 / beta_d)
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, log_expit

from .errors import DimensionMismatch, NonFinite, NonPositivePrecision, NonUnitColumn

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-10
LOG_2PI = float(np.log(2.0 * np.pi))

# 采样时每个随机流负责的样本数；与 worker 数无关，保证可复现
SAMPLE_CHUNK = 4096


def _frozen_copy(x, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True, ndmin=ndim)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelParams:
    """S3C 参数。构造后不可变（数组只读），可以在线程间共享。"""

    W: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    beta_tied: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "W", _frozen_copy(self.W, 2))
        object.__setattr__(self, "b", _frozen_copy(self.b, 1))
        object.__setattr__(self, "mu", _frozen_copy(self.mu, 1))
        object.__setattr__(self, "alpha", _frozen_copy(self.alpha, 1))
        beta = np.array(self.beta, dtype=np.float64, ndmin=1)
        if beta.size == 1 and self.W.shape[0] > 1:
            beta = np.full(self.W.shape[0], float(beta[0]))
        object.__setattr__(self, "beta", _frozen_copy(beta, 1))

    @property
    def D(self) -> int:
        return int(self.W.shape[0])

    @property
    def N(self) -> int:
        return int(self.W.shape[1])

    @property
    def w_norms(self) -> np.ndarray:
        """W_i^T beta W_i，每个单元一个值"""
        return (self.beta[:, None] * self.W * self.W).sum(axis=0)

    def with_updates(self, **changes) -> "ModelParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class PriorMoments:
    h_mean: np.ndarray
    s_mean: np.ndarray
    hs_mean: np.ndarray
    v_var: np.ndarray


def validate_params(params: ModelParams) -> None:
    """检查参数约束；不满足时抛出指明位置的异常。"""
    D, N = params.W.shape
    for kind, arr, size in (("b", params.b, N), ("mu", params.mu, N), ("alpha", params.alpha, N), ("beta", params.beta, D)):
        if arr.shape != (size,):
            raise DimensionMismatch(kind, (size,), arr.shape)

    for kind, arr in (("W", params.W), ("b", params.b), ("mu", params.mu), ("alpha", params.alpha), ("beta", params.beta)):
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            index = tuple(int(i) for i in bad[0])
            raise NonFinite(kind, index[0] if len(index) == 1 else index)

    for kind, arr in (("alpha", params.alpha), ("beta", params.beta)):
        bad = np.flatnonzero(arr <= 0)
        if bad.size:
            raise NonPositivePrecision(kind, int(bad[0]), float(arr[bad[0]]))

    norms = np.linalg.norm(params.W, axis=0)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        raise NonUnitColumn(int(bad[0]), float(norms[bad[0]]))


def _check_vectors(params: ModelParams, v: np.ndarray, s: np.ndarray, h: np.ndarray) -> None:
    if v.shape[-1] != params.D:
        raise DimensionMismatch("v", params.D, v.shape[-1])
    if s.shape[-1] != params.N:
        raise DimensionMismatch("s", params.N, s.shape[-1])
    if h.shape[-1] != params.N:
        raise DimensionMismatch("h", params.N, h.shape[-1])


def energy(params: ModelParams, v, s, h) -> float:
    """E(v,s,h) = 1/2 (v - W(h*s))^T beta (v - W(h*s)) + 1/2 sum alpha (s - mu h)^2 - sum b h"""
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    _check_vectors(params, v, s, h)

    resid = v - params.W @ (h * s)
    return float(
        0.5 * np.sum(params.beta * resid * resid)
        + 0.5 * np.sum(params.alpha * (s - params.mu * h) ** 2)
        - np.sum(params.b * h)
    )


def log_normalizer(params: ModelParams, h) -> float:
    """log p(v,s,h) + E(v,s,h)，只依赖参数和 h"""
    h = np.asarray(h, dtype=np.float64)
    prior = np.sum(h * log_expit(params.b) + (1.0 - h) * log_expit(-params.b) - params.b * h)
    slab = 0.5 * np.sum(np.log(params.alpha)) - 0.5 * params.N * LOG_2PI
    visible = 0.5 * np.sum(np.log(params.beta)) - 0.5 * params.D * LOG_2PI
    return float(prior + slab + visible)


def log_joint(params: ModelParams, v, s, h) -> float:
    """log p(h) + log p(s|h) + log p(v|s,h)，按生成过程逐项计算"""
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    _check_vectors(params, v, s, h)

    log_ph = np.sum(h * log_expit(params.b) + (1.0 - h) * log_expit(-params.b))
    log_ps = np.sum(0.5 * np.log(params.alpha) - 0.5 * LOG_2PI - 0.5 * params.alpha * (s - h * params.mu) ** 2)
    resid = v - params.W @ (h * s)
    log_pv = np.sum(0.5 * np.log(params.beta) - 0.5 * LOG_2PI - 0.5 * params.beta * resid * resid)
    return float(log_ph + log_ps + log_pv)


def _sample_chunk(params: ModelParams, seed_seq: np.random.SeedSequence, m: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Philox 为计数器型生成器，每个 chunk 一个独立子流
    rng = np.random.Generator(np.random.Philox(seed_seq))
    p_on = expit(params.b)
    h = (rng.random((m, params.N)) < p_on).astype(np.float64)
    s = h * params.mu + rng.standard_normal((m, params.N)) / np.sqrt(params.alpha)
    mean_v = (h * s) @ params.W.T
    v = mean_v + rng.standard_normal((m, params.D)) / np.sqrt(params.beta)
    return v, h, s


def sample_ancestral(params: ModelParams, rng_seed: int, m: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    按拓扑顺序采样 m 个 (v, h, s)。
    给定 seed 结果确定；每 SAMPLE_CHUNK 个样本使用一个派生子流，可并行且与分块执行方式无关。
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    n_chunks = (m + SAMPLE_CHUNK - 1) // SAMPLE_CHUNK
    children = np.random.SeedSequence(rng_seed).spawn(n_chunks)

    parts_v, parts_h, parts_s = [], [], []
    for idx, child in enumerate(children):
        size = min(SAMPLE_CHUNK, m - idx * SAMPLE_CHUNK)
        v, h, s = _sample_chunk(params, child, size)
        parts_v.append(v)
        parts_h.append(h)
        parts_s.append(s)

    logger.debug("ancestral sampling: m=%d, chunks=%d, seed=%d", m, n_chunks, rng_seed)
    return np.concatenate(parts_v), np.concatenate(parts_h), np.concatenate(parts_s)


def analytic_moments(params: ModelParams) -> PriorMoments:
    """先验的闭式矩，作为采样的 Monte-Carlo 对照"""
    p_on = expit(params.b)
    hs_mean = p_on * params.mu
    z_var = p_on * (params.mu ** 2 + 1.0 / params.alpha) - (p_on * params.mu) ** 2
    v_var = 1.0 / params.beta + (params.W ** 2) @ z_var
    return PriorMoments(h_mean=p_on, s_mean=p_on * params.mu, hs_mean=hs_mean, v_var=v_var)


def normalize_columns(W: np.ndarray) -> np.ndarray:
    return W / np.linalg.norm(W, axis=0, keepdims=True)


def make_params(
    W,
    b=None,
    mu=None,
    alpha=None,
    beta=None,
    beta_tied: bool = False,
    normalize: bool = False,
) -> ModelParams:
    """便捷构造：未给出的向量按 b=0, mu=0, alpha=1, beta=1 填充"""
    W = np.array(W, dtype=np.float64, ndmin=2)
    D, N = W.shape
    if normalize:
        W = normalize_columns(W)

    def _vec(x: Optional[object], default: float, size: int) -> np.ndarray:
        if x is None:
            return np.full(size, default)
        arr = np.array(x, dtype=np.float64, ndmin=1)
        return np.full(size, float(arr[0])) if arr.size == 1 and size > 1 else arr

    return ModelParams(
        W=W,
        b=_vec(b, 0.0, N),
        mu=_vec(mu, 0.0, N),
        alpha=_vec(alpha, 1.0, N),
        beta=_vec(beta, 1.0, D),
        beta_tied=beta_tied,
    )
