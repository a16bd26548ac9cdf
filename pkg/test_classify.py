#!/usr/bin/env python3
"""
测试一对多线性 SVM、lambda 选择、学习曲线
"""
import sys

import numpy as np
import pytest

from _test_runner import run_tests
from s3c.classify import (
    LinearModel,
    accuracy,
    learning_curve,
    select_lambda,
    svm_objective,
    svm_predict,
    svm_train,
)
from s3c.errors import ConfigError, DimensionMismatch, EmptyDataset, LabelOutOfRange


def _clusters(rng: np.random.Generator, n_per_class: int, centers) -> tuple:
    centers = np.asarray(centers, dtype=float)
    X = np.vstack([c + 0.3 * rng.standard_normal((n_per_class, centers.shape[1])) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per_class)
    return X, y


def test_separable_two_classes():
    rng = np.random.default_rng(0)
    X, y = _clusters(rng, 50, [[-3.0, 0.0, 1.0], [3.0, 0.0, 1.0]])
    model = svm_train(X, y, lam=1e-2, epochs=10, seed=1)
    assert model.weights.shape == (2, 3)
    assert accuracy(svm_predict(model, X), y) == 1.0


def test_three_classes():
    rng = np.random.default_rng(1)
    X, y = _clusters(rng, 40, [[0.0, 4.0], [-4.0, -2.0], [4.0, -2.0]])
    model = svm_train(X, y, lam=1e-3, epochs=20, seed=2)
    assert model.n_classes == 3
    X_test, y_test = _clusters(rng, 20, [[0.0, 4.0], [-4.0, -2.0], [4.0, -2.0]])
    assert accuracy(svm_predict(model, X_test), y_test) == 1.0


def test_training_lowers_objective():
    rng = np.random.default_rng(2)
    X, y = _clusters(rng, 30, [[-1.0, 1.0], [1.0, -1.0]])
    model = svm_train(X, y, lam=0.05, epochs=10, seed=3)
    baseline = LinearModel.zeros(2, 2, lam=0.05)
    baseline.feature_mean, baseline.feature_std = model.feature_mean, model.feature_std
    assert svm_objective(model, X, y) < svm_objective(baseline, X, y)
    assert svm_objective(baseline, X, y) == pytest.approx(2.0)


def test_training_is_deterministic():
    rng = np.random.default_rng(3)
    X, y = _clusters(rng, 20, [[-1.0, 0.0], [1.0, 0.0]])
    a = svm_train(X, y, lam=0.1, seed=4)
    b = svm_train(X, y, lam=0.1, seed=4)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


def test_weights_stay_inside_ball():
    rng = np.random.default_rng(4)
    X, y = _clusters(rng, 25, [[-2.0, 2.0], [2.0, -2.0]])
    lam = 0.5
    model = svm_train(X, y, lam=lam, epochs=5, seed=5)
    norms = np.sqrt(np.sum(model.weights ** 2, axis=1) + model.bias ** 2)
    assert np.all(norms <= 1.0 / np.sqrt(lam) + 1e-12)


def test_duplicated_feature_gets_identical_weights():
    rng = np.random.default_rng(5)
    X, y = _clusters(rng, 30, [[-2.0, 1.0], [2.0, -1.0]])
    X = np.hstack([X, X[:, :1]])
    model = svm_train(X, y, lam=1e-2, seed=6)
    assert np.array_equal(model.weights[:, 0], model.weights[:, 2])


def test_constant_feature_is_ignored():
    rng = np.random.default_rng(6)
    X, y = _clusters(rng, 30, [[-2.0], [2.0]])
    X = np.hstack([X, np.full((60, 1), 7.0)])
    model = svm_train(X, y, lam=1e-2, seed=7)
    assert model.feature_std[1] == 1.0
    assert np.all(model.weights[:, 1] == 0.0)


def test_three_class_accuracy_at_scale():
    rng = np.random.default_rng(9)
    centers = [[0.0, 3.0, 0.0], [-3.0, -1.5, 1.0], [3.0, -1.5, -1.0]]
    X_train, y_train = _clusters(rng, 333, centers)
    X_test, y_test = _clusters(rng, 333, centers)
    model = svm_train(X_train, y_train, lam=1e-3, epochs=5, seed=10)
    assert accuracy(svm_predict(model, X_test), y_test) >= 0.98


def test_tie_goes_to_lowest_class():
    model = LinearModel.zeros(3, 4)
    assert svm_predict(model, np.ones((2, 4))).tolist() == [0, 0]


def test_errors():
    with pytest.raises(EmptyDataset):
        svm_train(np.zeros((0, 3)), np.zeros(0), lam=0.1)
    with pytest.raises(LabelOutOfRange):
        svm_train(np.zeros((2, 3)), [0, 3], lam=0.1, n_classes=2)
    with pytest.raises(ConfigError):
        svm_train(np.zeros((2, 3)), [0, 1], lam=0.0)
    with pytest.raises(DimensionMismatch):
        svm_train(np.zeros((2, 3)), [0, 1, 1], lam=0.1)
    with pytest.raises(DimensionMismatch):
        svm_predict(LinearModel.zeros(2, 3), np.zeros((1, 4)))
    with pytest.raises(DimensionMismatch):
        accuracy([0, 1], [0])


def test_select_lambda_prefers_first_on_tie():
    rng = np.random.default_rng(7)
    centers = [[-4.0, 0.0], [4.0, 0.0]]
    X_train, y_train = _clusters(rng, 30, centers)
    X_val, y_val = _clusters(rng, 10, centers)
    best, report = select_lambda(X_train, y_train, X_val, y_val, [1e-3, 1e-2, 1e-1], epochs=5)
    assert report["val_accuracy"].tolist() == [1.0, 1.0, 1.0]
    assert best == 1e-3
    assert list(report.columns) == ["lambda", "val_accuracy"]
    with pytest.raises(ConfigError):
        select_lambda(X_train, y_train, X_val, y_val, [])


def test_learning_curve():
    rng = np.random.default_rng(8)
    centers = [[-3.0, 0.0], [3.0, 0.0]]
    X_train, y_train = _clusters(rng, 40, centers)
    X_test, y_test = _clusters(rng, 20, centers)
    curve = learning_curve(X_train, y_train, X_test, y_test, [10, 40, 80], lam=1e-2, epochs=5)
    assert curve["n_labeled"].tolist() == [10, 40, 80]
    assert curve["test_accuracy"].between(0.0, 1.0).all()
    assert curve["test_accuracy"].iloc[-1] == 1.0
    with pytest.raises(ConfigError):
        learning_curve(X_train, y_train, X_test, y_test, [0], lam=1e-2)


def main() -> int:
    return run_tests(dict(globals()), "线性 SVM 分类")


if __name__ == "__main__":
    sys.exit(main())
