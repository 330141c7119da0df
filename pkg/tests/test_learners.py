import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, sparse, stats
from scipy.special import log_expit

from coalmtl.errors import ConvergenceError, DataError
from coalmtl.learners import (TaskDataset, WeightPosterior, infer_task_kind,
                              laplace_covariance, laplace_log_evidence,
                              likelihood_message, log_likelihood, map_weights,
                              predict_scores)


def neg_log_post(data, w, m, cov, rho2, kind):
    d = w - m
    return 0.5 * d @ np.linalg.solve(cov, d) - log_likelihood(data, w, rho2, kind)


def fd_grad(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def fd_hessian(f, w, h=1e-4):
    D = len(w)
    H = np.zeros((D, D))
    for i in range(D):
        e = np.zeros(D)
        e[i] = h
        H[:, i] = (fd_grad(f, w + e) - fd_grad(f, w - e)) / (2 * h)
    return 0.5 * (H + H.T)


def ridge(X, y, m, cov, rho2):
    P = np.linalg.inv(cov)
    return np.linalg.solve(X.T @ X / rho2 + P, X.T @ y / rho2 + P @ m)


def random_task(rng, n, D, kind):
    X = rng.normal(size=(n, D))
    w = rng.normal(size=D)
    if kind == "regression":
        y = X @ w + 0.3 * rng.normal(size=n)
    else:
        y = np.where(rng.random(n) < 1 / (1 + np.exp(-X @ w)), 1.0, -1.0)
    return TaskDataset(X, y)


class TestTaskDataset:
    def test_row_label_mismatch(self):
        with pytest.raises(DataError):
            TaskDataset(np.zeros((3, 2)), np.zeros(2))

    def test_sparse_and_subset(self):
        X = sparse.random(6, 4, density=0.5, random_state=0)
        t = TaskDataset(X, np.arange(6.0), task=3)
        sub = t.subset([0, 2])
        assert sub.n == 2 and sub.dim == 4 and sub.task == 3
        np.testing.assert_array_equal(sub.dense_X(), X.toarray()[[0, 2]])

    def test_infer_kind(self):
        assert infer_task_kind([1, -1, 1]) == "classification"
        assert infer_task_kind([0.5, 1.0]) == "regression"

    def test_posterior_rejects_nan(self):
        with pytest.raises(ArithmeticError):
            WeightPosterior(np.array([np.nan]), np.eye(1))


class TestMapWeights:
    def test_no_data_returns_prior_mean(self):
        t = TaskDataset(np.zeros((0, 3)), np.zeros(0))
        m = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(
            map_weights(t, m, np.eye(3), 1.0, "regression"), m)

    def test_scalar_ridge(self):
        t = TaskDataset([[1.0]], [2.0])
        w = map_weights(t, np.zeros(1), np.ones(1), 1.0, "regression")
        np.testing.assert_allclose(w, [1.0], atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 10), st.integers(1, 30),
           st.floats(0.05, 5.0))
    def test_regression_equals_ridge(self, seed, D, n, rho2):
        rng = np.random.default_rng(seed)
        t = random_task(rng, n, D, "regression")
        A = rng.normal(size=(D, D))
        cov = A @ A.T / D + 0.5 * np.eye(D)
        m = rng.normal(size=D)
        w = map_weights(t, m, cov, rho2, "regression", tol=1e-12)
        np.testing.assert_allclose(w, ridge(t.X, t.y, m, cov, rho2),
                                   rtol=1e-8, atol=1e-8)

    def test_logistic_first_order_optimality(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            t = random_task(rng, 40, 5, "classification")
            m, cov = rng.normal(size=5), np.eye(5) * 2.0
            w = map_weights(t, m, cov, 1.0, "classification")
            g = fd_grad(lambda v: neg_log_post(t, v, m, cov, 1.0,
                                               "classification"), w)
            assert np.linalg.norm(g) <= 1e-6 * max(1, np.linalg.norm(w)) + 1e-8

    def test_sparse_matches_dense(self, rng):
        t = random_task(rng, 30, 6, "classification")
        ts = TaskDataset(sparse.csr_matrix(t.X), t.y)
        a = map_weights(t, np.zeros(6), np.ones(6), 1.0, "classification")
        b = map_weights(ts, np.zeros(6), np.ones(6), 1.0, "classification")
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    def test_separable_data_stays_finite(self):
        t = TaskDataset(np.array([[1.0], [-1.0]]), np.array([1.0, -1.0]))
        w = map_weights(t, np.zeros(1), np.ones(1), 1.0, "classification")
        assert np.isfinite(w).all() and w[0] > 0

    def test_iteration_cap_raises(self, rng):
        t = random_task(rng, 50, 8, "classification")
        with pytest.raises(ConvergenceError) as info:
            map_weights(t, np.zeros(8), np.full(8, 100.0), 1.0,
                        "classification", max_iter=1, tol=1e-14)
        assert info.value.grad_norm > 0

    def test_bad_labels(self):
        t = TaskDataset([[1.0]], [0.3])
        with pytest.raises(ValueError):
            map_weights(t, np.zeros(1), np.ones(1), 1.0, "classification")


class TestLaplaceCovariance:
    def test_scalar_regression(self):
        t = TaskDataset([[1.0]], [2.0])
        C = laplace_covariance(t, np.array([1.0]), np.ones(1), 1.0, "regression")
        np.testing.assert_allclose(C, [[0.5]])

    def test_logistic_at_zero(self):
        X = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
        t = TaskDataset(X, [1.0, -1.0, 1.0])
        C = laplace_covariance(t, np.zeros(2), np.eye(2), 1.0, "classification")
        np.testing.assert_allclose(C, np.linalg.inv(0.25 * X.T @ X + np.eye(2)))

    @pytest.mark.parametrize("kind", ["regression", "classification"])
    def test_matches_numeric_hessian(self, kind):
        rng = np.random.default_rng(8)
        for _ in range(5):
            t = random_task(rng, 25, 4, kind)
            m, cov = np.zeros(4), np.diag(rng.uniform(0.5, 2, 4))
            w = map_weights(t, m, cov, 0.7, kind)
            H = fd_hessian(lambda v: neg_log_post(t, v, m, cov, 0.7, kind), w)
            C = laplace_covariance(t, w, cov, 0.7, kind)
            np.testing.assert_allclose(C, np.linalg.inv(H), rtol=1e-5, atol=1e-9)
            assert np.linalg.eigvalsh(C).min() > 0

    def test_diagonal_variant(self):
        X = np.diag([1.0, 2.0, 3.0])
        t = TaskDataset(X, [1.0, 2.0, 3.0])
        full = laplace_covariance(t, np.zeros(3), np.ones(3), 1.0, "regression")
        diag = laplace_covariance(t, np.zeros(3), np.ones(3), 1.0, "regression",
                                  diagonal=True)
        np.testing.assert_array_equal(diag, np.diag(full))
        np.testing.assert_allclose(full - np.diag(diag), 0.0, atol=0)


class TestEvidence:
    def test_regression_exact(self, rng):
        t = random_task(rng, 6, 2, "regression")
        cov = np.diag([1.5, 0.5])
        w = map_weights(t, np.zeros(2), cov, 0.4, "regression")
        marginal = stats.multivariate_normal(
            np.zeros(6), t.X @ cov @ t.X.T + 0.4 * np.eye(6)).logpdf(t.y)
        assert laplace_log_evidence(t, w, np.zeros(2), cov, 0.4,
                                    "regression") == pytest.approx(marginal,
                                                                   rel=1e-10)

    def test_logistic_against_quadrature(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = int(rng.integers(1, 4))
            X = rng.normal(size=(n, 1))
            y = rng.choice([-1.0, 1.0], n)
            t = TaskDataset(X, y)
            w = map_weights(t, np.zeros(1), np.ones(1), 1.0, "classification")
            approx = laplace_log_evidence(t, w, np.zeros(1), np.ones(1), 1.0,
                                          "classification")
            exact, _ = integrate.quad(
                lambda u: np.exp(np.sum(log_expit(y * X[:, 0] * u)))
                * stats.norm.pdf(u), -np.inf, np.inf, epsabs=1e-13)
            assert abs(math.exp(approx) / exact - 1) < 0.05


class TestMessagesAndPrediction:
    def test_regression_message_is_exact(self, rng):
        t = random_task(rng, 10, 3, "regression")
        J, h = likelihood_message(t, rng.normal(size=3), 0.5, "regression")
        np.testing.assert_allclose(J, t.X.T @ t.X / 0.5)
        np.testing.assert_allclose(h, t.X.T @ t.y / 0.5)

    def test_empty_message(self):
        J, h = likelihood_message(TaskDataset(np.zeros((0, 2)), []),
                                  np.ones(2), 1.0, "regression")
        np.testing.assert_array_equal(J, 0.0)
        np.testing.assert_array_equal(h, 0.0)

    def test_predict_scores(self):
        X = np.array([[1.0], [-3.0]])
        np.testing.assert_array_equal(predict_scores([2.0], X, "regression"),
                                      [2.0, -6.0])
        np.testing.assert_allclose(predict_scores([0.0], X, "classification"),
                                   [0.5, 0.5])
        p = predict_scores([0.7], X, "classification")
        q = predict_scores([0.7], -X, "classification")
        np.testing.assert_allclose(p + q, 1.0, rtol=1e-15)
