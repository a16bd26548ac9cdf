"""
变分 E 步：阻尼并行不动点推断 + 可选的共轭梯度 s_hat 更新 + 能量泛函（ELBO）。

近似后验族：Q(h_i) = h_hat_i，Q(s_i | h_i) = N(h_i * s_hat_i, 1 / (alpha_i + h_i W_i^T beta W_i))。
所有按行的计算只依赖该行自身，样本结果与批次组成无关。
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import entr, expit, log_expit

from .errors import ConfigError, DimensionMismatch, NonFinite, NumericalDivergence
from .model import LOG_2PI, ModelParams

logger = logging.getLogger(__name__)

H_CLAMP = 1e-7
SPARSE_THRESHOLD = 0.01
S_MODES = ("heuristic", "conjugate_gradient")

_LOG_2PI_E = LOG_2PI + 1.0


@dataclass
class InferenceConfig:
    """E 步配置"""

    rho: float = 0.5            # 反射裁剪系数，[0, 1]
    eta_s: float = 0.5          # s_hat 阻尼
    eta_h: float = 0.5          # h_hat 阻尼
    max_iters: int = 50         # K
    s_mode: str = "heuristic"   # heuristic | conjugate_gradient
    cg_max_steps: int = 10
    elbo_tol: float = 1e-6      # <= 0 关闭提前停止
    record_trace: bool = True
    clip: bool = True           # 关闭后复现无界放大的失败模式

    def validate(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho", f"must be in [0, 1], got {self.rho}")
        for key in ("eta_s", "eta_h"):
            value = getattr(self, key)
            if not 0.0 < value <= 1.0:
                raise ConfigError(key, f"must be in (0, 1], got {value}")
        if self.max_iters < 1:
            raise ConfigError("max_iters", f"must be >= 1, got {self.max_iters}")
        if self.s_mode not in S_MODES:
            raise ConfigError("s_mode", f"must be one of {S_MODES}, got {self.s_mode!r}")
        if self.cg_max_steps < 1:
            raise ConfigError("cg_max_steps", f"must be >= 1, got {self.cg_max_steps}")


@dataclass
class VariationalState:
    h_hat: np.ndarray
    s_hat: np.ndarray

    def row(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.h_hat[i], self.s_hat[i]

    @property
    def M(self) -> int:
        return int(self.h_hat.shape[0])


@dataclass
class InferenceTrace:
    """逐迭代统计（第 0 项为初始化时的值）"""

    elbo: List[float] = field(default_factory=list)
    sparsity: List[float] = field(default_factory=list)
    max_abs_s: List[float] = field(default_factory=list)
    ascent_violations: List[int] = field(default_factory=list)

    @property
    def total_violations(self) -> int:
        return int(sum(self.ascent_violations))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "iteration": np.arange(len(self.elbo)),
                "mean_elbo": self.elbo,
                "sparsity": self.sparsity,
                "max_abs_s": self.max_abs_s,
                "ascent_violations": self.ascent_violations,
            }
        )


def _rowwise(X: np.ndarray, A: np.ndarray) -> np.ndarray:
    # (M,1,K) @ (K,L)：逐行独立的矩阵乘，保证同一行在任意批次里结果逐位一致
    return np.matmul(X[:, None, :], A)[:, 0, :]


def _as_rows(x) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    return np.atleast_2d(arr), arr.ndim == 1


def _check_dims(params: ModelParams, V: np.ndarray, *units: np.ndarray) -> None:
    if V.shape[-1] != params.D:
        raise DimensionMismatch("v", params.D, V.shape[-1])
    for arr in units:
        if arr.shape[-1] != params.N:
            raise DimensionMismatch("q", params.N, arr.shape[-1])


def slab_variances(params: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
    """Q(s_i | h_i=1) 与 Q(s_i | h_i=0) 的方差"""
    return 1.0 / (params.alpha + params.w_norms), 1.0 / params.alpha


def init_q(params: ModelParams, m: int) -> VariationalState:
    h0 = np.clip(expit(params.b), H_CLAMP, 1.0 - H_CLAMP)
    return VariationalState(
        h_hat=np.tile(h0, (m, 1)),
        s_hat=np.tile(params.mu, (m, 1)),
    )


def _s_star_rows(params: ModelParams, V: np.ndarray, h_hat: np.ndarray, s_hat: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = h_hat * s_hat
    recon = _rowwise(m, params.W.T)
    # 全和减去自身项：W_i^T beta (v - sum_j W_j m_j) + w_i m_i
    proj = _rowwise((V - recon) * params.beta, params.W)
    return (params.mu * params.alpha + proj + w * m) / (params.alpha + w)


def s_star(params: ModelParams, v, h_hat, s_hat) -> np.ndarray:
    """每个单元各自的最优 s_hat（所有单元同时计算）"""
    V, single = _as_rows(v)
    H, _ = _as_rows(h_hat)
    S, _ = _as_rows(s_hat)
    _check_dims(params, V, H, S)
    out = _s_star_rows(params, V, H, S, params.w_norms)
    return out[0] if single else out


def clip_reflections(s_star_value, s_prev, rho: float) -> np.ndarray:
    """
    符号翻转且幅度超过 rho*|s_prev| 时裁剪到 rho*sign(s*)*|s_prev|；sign(0) 记为 +1。
    s_prev 为 0 时没有可反射的方向，原样返回。
    """
    s_new = np.asarray(s_star_value, dtype=np.float64)
    s_old = np.asarray(s_prev, dtype=np.float64)
    sign_new = np.where(s_new >= 0, 1.0, -1.0)
    sign_old = np.where(s_old >= 0, 1.0, -1.0)
    bound = rho * np.abs(s_old)
    flipped = (sign_new != sign_old) & (np.abs(s_new) > bound) & (s_old != 0.0)
    return np.where(flipped, sign_new * bound, s_new)


def damp(new, old, eta: float) -> np.ndarray:
    return eta * np.asarray(new, dtype=np.float64) + (1.0 - eta) * np.asarray(old, dtype=np.float64)


def _h_star_rows(params: ModelParams, V: np.ndarray, h_hat: np.ndarray, s_new: np.ndarray, w: np.ndarray) -> np.ndarray:
    # 使用 s^(k+1) 与 h^(k)
    m = h_hat * s_new
    recon = _rowwise(m, params.W.T)
    proj = _rowwise((V - recon) * params.beta, params.W)
    logit = (
        s_new * (proj + w * m - 0.5 * w * s_new)
        + params.b
        - 0.5 * params.alpha * (s_new - params.mu) ** 2
        - 0.5 * np.log(params.alpha + w)
        + 0.5 * np.log(params.alpha)
    )
    return expit(logit)


def h_star(params: ModelParams, v, h_hat, s_hat) -> np.ndarray:
    V, single = _as_rows(v)
    H, _ = _as_rows(h_hat)
    S, _ = _as_rows(s_hat)
    _check_dims(params, V, H, S)
    out = _h_star_rows(params, V, H, S, params.w_norms)
    return out[0] if single else out


def expected_log_joint(
    params: ModelParams,
    V: np.ndarray,
    h_hat: np.ndarray,
    s_hat: np.ndarray,
    var_on: np.ndarray,
    var_off: np.ndarray,
) -> np.ndarray:
    """
    E_Q[log p(v,s,h)]，每行一个值。
    var_on / var_off 是 Q 的条件方差；M 步把它们当常数传入（Q 冻结）。
    """
    prior = h_hat * log_expit(params.b) + (1.0 - h_hat) * log_expit(-params.b)
    slab = (
        0.5 * np.log(params.alpha)
        - 0.5 * LOG_2PI
        - 0.5 * params.alpha * (h_hat * ((s_hat - params.mu) ** 2 + var_on) + (1.0 - h_hat) * var_off)
    )
    m = h_hat * s_hat
    resid = V - _rowwise(m, params.W.T)
    var_z = h_hat * (s_hat ** 2 + var_on) - m ** 2
    visible = (
        np.sum(0.5 * np.log(params.beta) - 0.5 * LOG_2PI)
        - 0.5 * np.sum(params.beta * resid * resid, axis=1)
        - 0.5 * np.sum(params.w_norms * var_z, axis=1)
    )
    return np.sum(prior + slab, axis=1) + visible


def q_entropy(h_hat: np.ndarray, var_on: np.ndarray, var_off: np.ndarray) -> np.ndarray:
    terms = (
        entr(h_hat)
        + entr(1.0 - h_hat)
        + h_hat * 0.5 * (_LOG_2PI_E + np.log(var_on))
        + (1.0 - h_hat) * 0.5 * (_LOG_2PI_E + np.log(var_off))
    )
    return np.sum(terms, axis=1)


def _elbo_rows(params: ModelParams, V: np.ndarray, h_hat: np.ndarray, s_hat: np.ndarray) -> np.ndarray:
    var_on, var_off = slab_variances(params)
    return expected_log_joint(params, V, h_hat, s_hat, var_on, var_off) + q_entropy(h_hat, var_on, var_off)


def elbo(params: ModelParams, v, h_hat, s_hat):
    """能量泛函 E_Q[log p(v,s,h)] + H(Q)；单个样本返回 float，批量返回每行一个值"""
    V, single = _as_rows(v)
    H, _ = _as_rows(h_hat)
    S, _ = _as_rows(s_hat)
    _check_dims(params, V, H, S)
    out = _elbo_rows(params, V, H, S)
    return float(out[0]) if single else out


def elbo_grad_s(params: ModelParams, v, h_hat, s_hat) -> np.ndarray:
    """ELBO 对 s_hat 的梯度"""
    V, single = _as_rows(v)
    H, _ = _as_rows(h_hat)
    S, _ = _as_rows(s_hat)
    out = _grad_s_rows(params, V, H, S, params.w_norms)
    return out[0] if single else out


def _grad_s_rows(params: ModelParams, V: np.ndarray, H: np.ndarray, S: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = H * S
    proj = _rowwise((V - _rowwise(m, params.W.T)) * params.beta, params.W)
    return H * (params.alpha * (params.mu - S) + proj - w * S * (1.0 - H))


def _hvp_rows(params: ModelParams, H: np.ndarray, X: np.ndarray, w: np.ndarray) -> np.ndarray:
    # KL 关于 s_hat 的 Hessian：diag(h) W^T beta W diag(h) + diag(h*alpha + h*w - h^2*w)
    inner = _rowwise(_rowwise(H * X, params.W.T) * params.beta, params.W)
    return H * inner + (H * params.alpha + H * w - H * H * w) * X


def hessian_vector_product(params: ModelParams, h_hat, x) -> np.ndarray:
    """不显式构造 H 的 Hessian-向量积，O(DN)"""
    H, single = _as_rows(h_hat)
    X, _ = _as_rows(x)
    out = _hvp_rows(params, H, X, params.w_norms)
    return out[0] if single else out


def _cg_rows(
    params: ModelParams,
    V: np.ndarray,
    H: np.ndarray,
    S: np.ndarray,
    max_steps: int,
    w: np.ndarray,
    iteration: int = 0,
) -> np.ndarray:
    x = S.copy()
    r = _grad_s_rows(params, V, H, x, w)  # = -grad(KL)
    p = r.copy()
    rs = np.sum(r * r, axis=1)
    for _ in range(max_steps):
        live = rs > 1e-24
        if not live.any():
            break
        Hp = _hvp_rows(params, H, p, w)
        pHp = np.sum(p * Hp, axis=1)
        live &= pHp > 0
        # 二次函数上的精确线搜索，每步都不会增大 KL
        step = np.where(live, rs / np.where(live, pHp, 1.0), 0.0)
        x = x + step[:, None] * p
        r = r - step[:, None] * Hp
        rs_new = np.sum(r * r, axis=1)
        beta_cg = np.where(live, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        p = r + beta_cg[:, None] * p
        rs = np.where(live, rs_new, 0.0)
    _raise_if_nonfinite(x, iteration)
    return x


def cg_s_update(params: ModelParams, v, h_hat, s_hat, cg_max_steps: int = 10) -> np.ndarray:
    """用共轭梯度部分最小化 KL 中依赖 s_hat 的二次项"""
    V, single = _as_rows(v)
    H, _ = _as_rows(h_hat)
    S, _ = _as_rows(s_hat)
    _check_dims(params, V, H, S)
    out = _cg_rows(params, V, H, S, cg_max_steps, params.w_norms)
    return out[0] if single else out


def _raise_if_nonfinite(arr: np.ndarray, iteration: int) -> None:
    if np.all(np.isfinite(arr)):
        return
    _, unit = np.argwhere(~np.isfinite(arr))[0]
    raise NumericalDivergence(iteration=iteration, unit=int(unit))


@dataclass
class _ChunkResult:
    h_hat: np.ndarray
    s_hat: np.ndarray
    elbo: List[np.ndarray]
    sparsity: List[np.ndarray]
    max_abs_s: List[np.ndarray]
    violations: List[np.ndarray]


def _row_stats(h_hat: np.ndarray, s_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.mean(h_hat < SPARSE_THRESHOLD, axis=1), np.max(np.abs(s_hat), axis=1)


def _fixed_point(params: ModelParams, V: np.ndarray, cfg: InferenceConfig) -> _ChunkResult:
    m = V.shape[0]
    w = params.w_norms
    state = init_q(params, m)
    h, s = state.h_hat, state.s_hat
    need_elbo = cfg.record_trace or cfg.elbo_tol > 0

    result = _ChunkResult(h, s, [], [], [], [])
    cur = _elbo_rows(params, V, h, s) if need_elbo else np.zeros(m)
    if cfg.record_trace:
        sp, mx = _row_stats(h, s)
        result.elbo.append(cur.copy())
        result.sparsity.append(sp)
        result.max_abs_s.append(mx)
        result.violations.append(np.zeros(m, dtype=bool))

    active = np.ones(m, dtype=bool)
    for k in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Va, ha, sa = V[idx], h[idx], s[idx]

        if cfg.s_mode == "conjugate_gradient":
            s_new = _cg_rows(params, Va, ha, sa, cfg.cg_max_steps, w, iteration=k + 1)
        else:
            # 先阻尼再裁剪反射：eta_s=1 时与先裁剪后阻尼相同，eta_s<1 时仍允许穿过 0
            s_new = damp(_s_star_rows(params, Va, ha, sa, w), sa, cfg.eta_s)
            if cfg.clip:
                s_new = clip_reflections(s_new, sa, cfg.rho)
        _raise_if_nonfinite(s_new, k + 1)

        h_new = np.clip(damp(_h_star_rows(params, Va, ha, s_new, w), ha, cfg.eta_h), H_CLAMP, 1.0 - H_CLAMP)
        _raise_if_nonfinite(h_new, k + 1)
        h[idx] = h_new
        s[idx] = s_new

        violated = np.zeros(m, dtype=bool)
        if need_elbo:
            new = _elbo_rows(params, Va, h_new, s_new)
            gain = new - cur[idx]
            violated[idx] = gain < -1e-12
            cur[idx] = new
            if cfg.elbo_tol > 0:
                active[idx[np.abs(gain) < cfg.elbo_tol]] = False

        if cfg.record_trace:
            sp, mx = _row_stats(h, s)
            result.elbo.append(cur.copy())
            result.sparsity.append(sp)
            result.max_abs_s.append(mx)
            result.violations.append(violated)

    return result


def _merge_trace(chunks: List[_ChunkResult]) -> InferenceTrace:
    trace = InferenceTrace()
    length = max(len(c.elbo) for c in chunks)
    if length == 0:
        return trace

    def _column(series: List[np.ndarray], k: int, carry: bool) -> np.ndarray:
        if k < len(series):
            return series[k]
        # 提前冻结的行保持最后的值；违例计数为 0
        return series[-1] if carry else np.zeros_like(series[-1])

    for k in range(length):
        elbo_k = np.concatenate([_column(c.elbo, k, True) for c in chunks])
        sp_k = np.concatenate([_column(c.sparsity, k, True) for c in chunks])
        mx_k = np.concatenate([_column(c.max_abs_s, k, True) for c in chunks])
        vi_k = np.concatenate([_column(c.violations, k, False) for c in chunks])
        trace.elbo.append(float(np.mean(elbo_k)))
        trace.sparsity.append(float(np.mean(sp_k)))
        trace.max_abs_s.append(float(np.max(mx_k)))
        trace.ascent_violations.append(int(np.sum(vi_k)))
    return trace


def e_step(
    params: ModelParams,
    batch,
    cfg: Optional[InferenceConfig] = None,
    workers: int = 1,
) -> Tuple[VariationalState, InferenceTrace]:
    """
    阻尼并行不动点推断（对批次中所有样本并行）。
    workers > 1 时按连续行块分给线程，结果按块顺序拼接，与单线程逐位一致。
    """
    cfg = cfg or InferenceConfig()
    cfg.validate()
    V = np.ascontiguousarray(np.atleast_2d(np.asarray(batch, dtype=np.float64)))
    if V.shape[1] != params.D:
        raise DimensionMismatch("batch", params.D, V.shape[1])
    bad = np.argwhere(~np.isfinite(V))
    if bad.size:
        raise NonFinite("batch", tuple(int(i) for i in bad[0]))

    n_chunks = max(1, min(int(workers), V.shape[0]))
    blocks = np.array_split(np.arange(V.shape[0]), n_chunks)
    if n_chunks == 1:
        chunks = [_fixed_point(params, V, cfg)]
    else:
        with ThreadPoolExecutor(max_workers=n_chunks) as executor:
            futures = [executor.submit(_fixed_point, params, V[block], cfg) for block in blocks]
            chunks = [future.result() for future in futures]

    state = VariationalState(
        h_hat=np.concatenate([c.h_hat for c in chunks]),
        s_hat=np.concatenate([c.s_hat for c in chunks]),
    )
    trace = _merge_trace(chunks) if cfg.record_trace else InferenceTrace()
    if trace.total_violations:
        logger.debug("E 步出现 %d 次单样本 ELBO 下降", trace.total_violations)
    return state, trace


def sparsity_fraction(h_hat, threshold: float = SPARSE_THRESHOLD) -> float:
    """Q(h_i) < threshold 的比例"""
    return float(np.mean(np.asarray(h_hat) < threshold))


def activation_histogram(h_hat, bins: int = 20) -> Tuple[np.ndarray, np.ndarray]:
    return np.histogram(np.asarray(h_hat).ravel(), bins=bins, range=(0.0, 1.0))
