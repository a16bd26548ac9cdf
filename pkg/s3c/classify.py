"""
一对多线性 SVM：hinge 损失 + L2 正则，随机次梯度下降（步长 1/(lambda t)，投影到半径 1/sqrt(lambda) 的球内）。
偏置作为常数 1 特征一起训练；训练前按训练集做逐维标准化，并随模型保存。
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import ConfigError, DimensionMismatch, EmptyDataset, LabelOutOfRange

logger = logging.getLogger(__name__)


@dataclass
class LinearModel:
    weights: np.ndarray        # (K, F)
    bias: np.ndarray           # (K,)
    lam: float
    feature_mean: np.ndarray   # (F,)
    feature_std: np.ndarray    # (F,)

    @property
    def n_classes(self) -> int:
        return int(self.weights.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.weights.shape[1])

    def standardize(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise DimensionMismatch("features", self.n_features, X.shape[1])
        return (X - self.feature_mean) / self.feature_std

    def decision_function(self, X) -> np.ndarray:
        return self.standardize(X) @ self.weights.T + self.bias

    @classmethod
    def zeros(cls, n_classes: int, n_features: int, lam: float = 1.0) -> "LinearModel":
        return cls(
            weights=np.zeros((n_classes, n_features)),
            bias=np.zeros(n_classes),
            lam=lam,
            feature_mean=np.zeros(n_features),
            feature_std=np.ones(n_features),
        )


def _check_labels(y, M: int, n_classes: Optional[int]) -> Tuple[np.ndarray, int]:
    y = np.asarray(y)
    if y.shape != (M,):
        raise DimensionMismatch("labels", M, y.shape)
    if not np.all(np.equal(np.mod(y, 1), 0)):
        raise ConfigError("labels", "labels must be integers")
    y = y.astype(np.int64)
    K = int(n_classes) if n_classes is not None else int(y.max()) + 1
    bad = np.flatnonzero((y < 0) | (y >= K))
    if bad.size:
        raise LabelOutOfRange(int(y[bad[0]]), K)
    return y, K


def svm_train(
    X,
    y,
    lam: float,
    epochs: int = 10,
    seed: int = 0,
    n_classes: Optional[int] = None,
) -> LinearModel:
    """K 个一对多 hinge 损失问题共用同一个样本顺序，按类向量化同时更新"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    M, F = X.shape
    if M == 0 or X.size == 0:
        raise EmptyDataset("training features")
    if not lam > 0:
        raise ConfigError("lambda", f"must be > 0, got {lam}")
    if epochs < 1:
        raise ConfigError("epochs", f"must be >= 1, got {epochs}")
    y, K = _check_labels(y, M, n_classes)

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = np.hstack([(X - mean) / std, np.ones((M, 1))])
    targets = np.where(y[:, None] == np.arange(K)[None, :], 1.0, -1.0)   # (M, K)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    Wa = np.zeros((K, F + 1))
    radius = 1.0 / np.sqrt(lam)
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(M):
            t += 1
            eta = 1.0 / (lam * t)
            margins = targets[i] * (Wa @ Z[i])
            Wa *= 1.0 - eta * lam
            active = margins < 1.0
            if np.any(active):
                Wa[active] += eta * targets[i, active][:, None] * Z[i]
            norms = np.linalg.norm(Wa, axis=1)
            over = norms > radius
            if np.any(over):
                Wa[over] *= (radius / norms[over])[:, None]

    logger.info("SVM 训练完成: M=%d, F=%d, K=%d, lambda=%g, 迭代=%d", M, F, K, lam, t)
    return LinearModel(weights=Wa[:, :F].copy(), bias=Wa[:, F].copy(), lam=float(lam), feature_mean=mean, feature_std=std)


def svm_predict(model: LinearModel, X) -> np.ndarray:
    """类别得分取 argmax；并列时取下标较小的类别"""
    scores = model.decision_function(X)
    return np.argmax(scores, axis=1)


def svm_objective(model: LinearModel, X, y) -> float:
    """sum_k [lambda/2 ||w_k||^2 + mean hinge_k]（在标准化特征上，含偏置）"""
    scores = model.decision_function(X)
    y = np.asarray(y, dtype=np.int64)
    targets = np.where(y[:, None] == np.arange(model.n_classes)[None, :], 1.0, -1.0)
    hinge = np.maximum(0.0, 1.0 - targets * scores).mean(axis=0)
    reg = 0.5 * model.lam * (np.sum(model.weights ** 2, axis=1) + model.bias ** 2)
    return float(np.sum(reg + hinge))


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DimensionMismatch("labels", predictions.shape, labels.shape)
    if labels.size == 0:
        raise EmptyDataset("labels")
    return float(np.mean(predictions == labels))


def select_lambda(
    X_train,
    y_train,
    X_val,
    y_val,
    lambdas: Sequence[float],
    epochs: int = 10,
    seed: int = 0,
) -> Tuple[float, pd.DataFrame]:
    """在验证集上选 lambda；准确率相同取先出现的"""
    if not len(lambdas):
        raise ConfigError("lambdas", "at least one candidate required")
    n_classes = int(max(np.max(y_train), np.max(y_val))) + 1
    rows = []
    for lam in lambdas:
        model = svm_train(X_train, y_train, lam, epochs=epochs, seed=seed, n_classes=n_classes)
        acc = accuracy(svm_predict(model, X_val), y_val)
        rows.append({"lambda": float(lam), "val_accuracy": acc})
        logger.info("lambda=%g -> 验证准确率 %.4f", lam, acc)
    report = pd.DataFrame(rows)
    best = float(report.loc[report["val_accuracy"].idxmax(), "lambda"])
    return best, report


def learning_curve(
    X_train,
    y_train,
    X_test,
    y_test,
    sizes: Sequence[int],
    lam: float,
    epochs: int = 10,
    seed: int = 0,
) -> pd.DataFrame:
    """随标注样本数增长的测试准确率；子集取自同一随机排列的前 n 个"""
    X_train = np.atleast_2d(np.asarray(X_train, dtype=np.float64))
    y_train = np.asarray(y_train)
    n_classes = int(max(np.max(y_train), np.max(y_test))) + 1
    order = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed))).permutation(X_train.shape[0])
    rows = []
    for n in sizes:
        if not 1 <= n <= X_train.shape[0]:
            raise ConfigError("sizes", f"{n} outside 1..{X_train.shape[0]}")
        subset = order[:n]
        model = svm_train(X_train[subset], y_train[subset], lam, epochs=epochs, seed=seed, n_classes=n_classes)
        rows.append({"n_labeled": int(n), "test_accuracy": accuracy(svm_predict(model, X_test), y_test)})
    return pd.DataFrame(rows)
