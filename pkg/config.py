"""
配置管理模块
集中管理 OSS 配置、运行时并发配置、训练/推断/特征提取的运行配置
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Union, get_args, get_origin, get_type_hints

from s3c.errors import ConfigError
from s3c.inference import InferenceConfig
from s3c.learning import LearningRates, RandomInitSpec, TrainConfig
from s3c.pipeline import PoolingConfig
from s3c.storage import OssConfig, StorageClient, choose_storage_client  # noqa: F401  OssConfig 在此重新导出


@dataclass
class RuntimeConfig:
    """运行时配置：并发线程数"""
    workers: int

    @classmethod
    def from_env(cls, flag: Optional[int] = None) -> "RuntimeConfig":
        """优先命令行参数，其次环境变量 S3C_WORKERS，最后 CPU 核数"""
        if flag is not None:
            workers = flag
        else:
            raw = os.getenv("S3C_WORKERS", "")
            if raw:
                try:
                    workers = int(raw)
                except ValueError as exc:
                    raise ConfigError("S3C_WORKERS", f"not an integer: {raw!r}") from exc
            else:
                workers = os.cpu_count() or 1
        config = cls(workers=workers)
        config.validate()
        return config

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers", f"must be >= 1, got {self.workers}")


@dataclass
class RunConfig:
    """
    单个扁平 key/value 文档（JSON）描述一次运行。未知 key 直接报错，所有数值在加载时校验。
    """
    # 推断
    rho: float = 0.5
    eta_s: float = 0.5
    eta_h: float = 0.5
    max_iters: int = 50
    s_mode: str = "heuristic"
    cg_max_steps: int = 10
    elbo_tol: float = 1e-6
    clip: bool = True

    # 训练
    n_units: int = 64
    target_sparsity: float = 0.05
    beta_tied: bool = False
    batch_size: int = 100
    epochs: int = 1
    lr_W: float = 1e-2
    lr_b: float = 1e-2
    lr_mu: float = 1e-2
    lr_alpha: float = 1e-3
    lr_beta: float = 1e-3
    alpha_beta_floor: float = 1e-8
    seed: int = 0

    # 特征提取
    patch_size: int = 6
    grid: int = 3
    stride: int = 1
    eps_cn: Optional[float] = None
    whitening_epsilon: float = 0.01

    # 分类
    svm_lambda: Optional[float] = None      # None: 在验证集上从 svm_lambdas 中选择
    svm_lambdas: List[float] = field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1])
    svm_epochs: int = 10
    val_fraction: float = 0.2

    # 路径
    data_path: Optional[str] = None
    model_path: Optional[str] = None
    out_path: Optional[str] = None

    def inference_config(self, record_trace: bool = True) -> InferenceConfig:
        return InferenceConfig(
            rho=self.rho,
            eta_s=self.eta_s,
            eta_h=self.eta_h,
            max_iters=self.max_iters,
            s_mode=self.s_mode,
            cg_max_steps=self.cg_max_steps,
            elbo_tol=self.elbo_tol,
            record_trace=record_trace,
            clip=self.clip,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rates=LearningRates(
                W=self.lr_W, b=self.lr_b, mu=self.lr_mu, alpha=self.lr_alpha, beta=self.lr_beta
            ),
            inference=self.inference_config(record_trace=False),
            seed=self.seed,
            alpha_beta_floor=self.alpha_beta_floor,
        )

    def init_spec(self) -> RandomInitSpec:
        return RandomInitSpec(
            n_units=self.n_units, target_sparsity=self.target_sparsity, seed=self.seed, beta_tied=self.beta_tied
        )

    def pooling_config(self) -> PoolingConfig:
        return PoolingConfig(patch_size=self.patch_size, grid=self.grid, stride=self.stride, eps_cn=self.eps_cn)

    def validate(self) -> None:
        self.train_config().validate()
        self.init_spec().validate()
        self.pooling_config().validate()
        if self.whitening_epsilon < 0:
            raise ConfigError("whitening_epsilon", f"must be >= 0, got {self.whitening_epsilon}")
        if self.svm_lambda is not None and not self.svm_lambda > 0:
            raise ConfigError("svm_lambda", f"must be > 0, got {self.svm_lambda}")
        if not self.svm_lambdas or any(not lam > 0 for lam in self.svm_lambdas):
            raise ConfigError("svm_lambdas", "must be a non-empty list of positive values")
        if self.svm_epochs < 1:
            raise ConfigError("svm_epochs", f"must be >= 1, got {self.svm_epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction", f"must be in (0, 1), got {self.val_fraction}")

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<document>", "top level must be a key/value object")
        hints = get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(key, "unknown key")
            values[key] = _coerce(key, value, hints[key])
        config = cls(**values)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_file(cls, path: str, storage: Optional[StorageClient] = None) -> "RunConfig":
        storage = storage or choose_storage_client(path)
        try:
            doc = json.loads(storage.read_text(path))
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"{path}: invalid JSON at line {exc.lineno}") from exc
        return cls.from_dict(doc)

    def to_file(self, path: str, storage: Optional[StorageClient] = None) -> None:
        storage = storage or choose_storage_client(path)
        storage.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", path)

    def with_overrides(self, **changes: Any) -> "RunConfig":
        """命令行参数覆盖（值为 None 的忽略）"""
        updated = replace(self, **{k: v for k, v in changes.items() if v is not None})
        updated.validate()
        return updated


def _coerce(key: str, value: Any, hint: Any) -> Any:
    if get_origin(hint) is Union:
        if value is None:
            return None
        hint = next(arg for arg in get_args(hint) if arg is not type(None))
    if get_origin(hint) in (list, List):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        (inner,) = get_args(hint)
        return [_coerce(key, item, inner) for item in value]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value
