"""
S3C: 尖峰-平板稀疏编码（spike-and-slab sparse coding）。

模块划分：
  model      参数、能量、对数联合概率、祖先采样
  inference  变分 E 步（阻尼并行不动点 / 共轭梯度）与 ELBO
  oracle     小规模 N 的精确后验，用于校验推断
  learning   变分 EM 训练
  pipeline   图像 patch -> 白化 -> 编码 -> 池化
  classify   一对多线性 SVM
  archive    模型/矩阵的二进制格式
  storage    本地 / OSS 存储
"""
from .errors import NumericalDivergence, S3CError, ValidationError
from .inference import InferenceConfig, InferenceTrace, VariationalState, e_step, elbo
from .learning import LearningRates, RandomInitSpec, S3CTrainer, TrainConfig, train_em
from .model import ModelParams, make_params, sample_ancestral, validate_params

__all__ = [
    "InferenceConfig",
    "InferenceTrace",
    "LearningRates",
    "ModelParams",
    "NumericalDivergence",
    "RandomInitSpec",
    "S3CError",
    "S3CTrainer",
    "TrainConfig",
    "ValidationError",
    "VariationalState",
    "e_step",
    "elbo",
    "make_params",
    "sample_ancestral",
    "train_em",
    "validate_params",
]
