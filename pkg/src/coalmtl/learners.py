"""Per-task linear and logistic regression under Gaussian priors.

MAP weights come from a preconditioned Polak-Ribiere conjugate gradient
with a Newton line search; posterior covariances from the Laplace
approximation at the mode.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.special import expit, log_expit

from .errors import ConvergenceError, DataError, NumericalError

TASK_KINDS = ("regression", "classification")


@dataclass(frozen=True)
class TaskDataset:
    """Design matrix (dense or scipy.sparse) and labels for one task."""

    X: object
    y: np.ndarray
    task: int = 0

    def __post_init__(self):
        X = self.X
        if sparse.issparse(X):
            X = sparse.csr_matrix(X, dtype=float)
        else:
            X = np.asarray(X, dtype=float)
            if X.ndim != 2:
                raise DataError("design matrix must be two-dimensional")
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise DataError(
                f"task {self.task}: {X.shape[0]} rows but {y.shape[0]} labels")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return TaskDataset(self.X[idx], self.y[idx], self.task)

    def dense_X(self):
        return self.X.toarray() if sparse.issparse(self.X) else self.X


@dataclass(frozen=True)
class WeightPosterior:
    """Gaussian summary of one task's weights: mean and covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise NumericalError("weight posterior has non-finite entries")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def diag_cov(self):
        return self.cov if self.cov.ndim == 1 else np.diag(self.cov).copy()


def infer_task_kind(y):
    """``classification`` when every label is -1 or +1."""
    y = np.asarray(y)
    if y.size and np.all(np.isin(y, (-1.0, 1.0))):
        return "classification"
    return "regression"


def _check_kind(data, task_kind):
    if task_kind not in TASK_KINDS:
        raise ValueError(f"task_kind must be one of {TASK_KINDS}")
    if task_kind == "classification" and data.n and not np.all(
            np.isin(data.y, (-1.0, 1.0))):
        raise DataError(f"task {data.task}: classification labels must be +-1")


def _precision(cov):
    """Precision of a diagonal (vector) or full prior covariance."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 1:
        if np.any(cov <= 0):
            raise NumericalError("prior covariance must be positive definite")
        return np.diag(1.0 / cov)
    try:
        cf = linalg.cho_factor(cov)
    except linalg.LinAlgError as exc:
        raise NumericalError(
            "prior covariance must be positive definite") from exc
    P = linalg.cho_solve(cf, np.eye(len(cov)))
    return 0.5 * (P + P.T)


def _curvature(data, z, rho2, task_kind):
    """Per-example second derivative weights A_nn of the negative log-lik."""
    if task_kind == "regression":
        return np.full(data.n, 1.0 / rho2)
    s = expit(z)
    return s * (1.0 - s)


def _residual(data, z, rho2, task_kind):
    """Gradient of the log-likelihood with respect to the linear scores."""
    if task_kind == "regression":
        return (data.y - z) / rho2
    return data.y * expit(-data.y * z)


def _weighted_gram(X, a):
    if sparse.issparse(X):
        return (X.T @ X.multiply(a[:, None])).toarray()
    return (X * a[:, None]).T @ X


def log_likelihood(data, w, rho2, task_kind):
    """Sum of per-example log-likelihoods at weights ``w``."""
    if data.n == 0:
        return 0.0
    z = data.X @ w
    if task_kind == "regression":
        r = data.y - z
        return float(-0.5 * np.sum(r * r) / rho2
                     - 0.5 * data.n * math.log(2.0 * math.pi * rho2))
    return float(np.sum(log_expit(data.y * z)))


def map_weights(data, prior_mean, prior_cov, rho2, task_kind, w0=None,
                max_iter=500, tol=1e-6):
    """MAP weights under a Gaussian prior.

    Parameters
    ----------
    data : TaskDataset
    prior_mean : ndarray, shape (D,)
    prior_cov : ndarray, shape (D,) or (D, D)
        Diagonal or full prior covariance; must be positive definite.
    rho2 : float
        Observation noise variance (regression only).
    task_kind : {"regression", "classification"}
    w0 : ndarray, optional
        Starting point; defaults to the prior mean.

    Returns
    -------
    ndarray, shape (D,)
        Weights whose objective gradient has norm at most ``tol``.

    Raises
    ------
    ConvergenceError
        When ``max_iter`` iterations do not reach the tolerance.
    """
    _check_kind(data, task_kind)
    if task_kind == "regression" and not rho2 > 0:
        raise ValueError("rho2 must be positive for regression")
    m = np.asarray(prior_mean, dtype=float)
    if data.n == 0:
        return m.copy()
    if data.dim != len(m):
        raise DataError(f"task {data.task}: dimension {data.dim} != {len(m)}")
    P = _precision(prior_cov)
    X = data.X

    def objective(w):
        d = w - m
        return 0.5 * d @ P @ d - log_likelihood(data, w, rho2, task_kind)

    def gradient(w, z):
        return P @ (w - m) - X.T @ _residual(data, z, rho2, task_kind)

    def curvature_along(p, Xp, z):
        return p @ P @ p + np.sum(_curvature(data, z, rho2, task_kind) * Xp * Xp)

    w = m.copy() if w0 is None else np.asarray(w0, dtype=float).copy()
    z = X @ w
    g = gradient(w, z)
    a = _curvature(data, z, rho2, task_kind)
    if sparse.issparse(X):
        col = np.asarray(X.multiply(X).T @ a).reshape(-1)
    else:
        col = (X * X).T @ a
    precond = 1.0 / (np.diag(P) + col)
    y = precond * g
    p = -y
    f = objective(w)
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return w
        slope = g @ p
        if slope >= 0.0:
            p = -y
            slope = g @ p
        # Newton steps on the 1-D restriction, safeguarded by Armijo.
        Xp = X @ p
        alpha = 0.0
        for _ in range(20):
            zt = z + alpha * Xp
            d1 = gradient(w + alpha * p, zt) @ p
            d2 = curvature_along(p, Xp, zt)
            if d2 <= 0.0:
                break
            step = -d1 / d2
            alpha += step
            if abs(step) <= 1e-12 * max(1.0, abs(alpha)):
                break
        if not alpha > 0.0 or not math.isfinite(alpha):
            alpha = 1.0
        for _ in range(60):
            w_new = w + alpha * p
            f_new = objective(w_new)
            if f_new <= f + 1e-4 * alpha * slope or abs(f_new - f) <= 1e-15 * abs(f):
                break
            alpha *= 0.5
        w = w_new
        f = f_new
        z = X @ w
        g_new = gradient(w, z)
        y_new = precond * g_new
        beta = max(0.0, float(g_new @ (y_new - y) / (g @ y))) if g @ y > 0 else 0.0
        if (it + 1) % max(len(w), 1) == 0:
            beta = 0.0
        p = -y_new + beta * p
        g, y = g_new, y_new
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return w
    raise ConvergenceError(
        f"task {data.task}: conjugate gradient did not converge in {max_iter} "
        f"iterations (gradient norm {gnorm:.3e})", grad_norm=gnorm)


def data_precision(data, w, rho2, task_kind):
    """``X^T A X`` (scaled by 1/rho2 for regression) at weights ``w``."""
    D = data.dim
    if data.n == 0:
        return np.zeros((D, D))
    z = data.X @ w
    G = _weighted_gram(data.X, _curvature(data, z, rho2, task_kind))
    return 0.5 * (G + G.T)


def laplace_covariance(data, w, prior_cov, rho2, task_kind, diagonal=False):
    """Inverse Hessian of the negative log posterior at ``w``.

    ``C = (X^T A X / rho2 + prior_cov^{-1})^{-1}`` with ``A = I`` for
    regression (the 1/rho2 factor applies to regression only) and
    ``A_nn = s_n (1 - s_n)`` for classification.  When the Hessian is
    numerically singular a jitter of ``1e-8 I`` is added with a warning.
    """
    _check_kind(data, task_kind)
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise NumericalError("weights must be finite")
    H = data_precision(data, w, rho2, task_kind) + _precision(prior_cov)
    try:
        cf = linalg.cho_factor(H)
    except linalg.LinAlgError:
        warnings.warn("singular Hessian in Laplace covariance; adding jitter",
                      RuntimeWarning, stacklevel=2)
        cf = linalg.cho_factor(H + 1e-8 * np.eye(len(H)))
    C = linalg.cho_solve(cf, np.eye(len(H)))
    C = 0.5 * (C + C.T)
    return np.diag(C).copy() if diagonal else C


def likelihood_message(data, w, rho2, task_kind):
    """Gaussian approximation of the task likelihood in information form.

    Returns ``(J, h)`` from a second-order expansion of the log-likelihood
    at ``w``; exact for regression.  ``J`` is singular whenever the task
    has fewer informative examples than features.
    """
    J = data_precision(data, w, rho2, task_kind)
    if data.n == 0:
        return J, np.zeros(data.dim)
    z = data.X @ w
    h = J @ w + data.X.T @ _residual(data, z, rho2, task_kind)
    return J, np.asarray(h, dtype=float)


def laplace_log_evidence(data, w, prior_mean, prior_cov, rho2, task_kind):
    """Laplace approximation of ``log p(y | X)`` around the mode ``w``."""
    C = laplace_covariance(data, w, prior_cov, rho2, task_kind)
    cov = np.asarray(prior_cov, dtype=float)
    cov = np.diag(cov) if cov.ndim == 1 else cov
    d = w - np.asarray(prior_mean, dtype=float)
    _, logdet_prior = np.linalg.slogdet(cov)
    _, logdet_C = np.linalg.slogdet(C)
    log_prior = -0.5 * (d @ np.linalg.solve(cov, d) + logdet_prior
                        + len(d) * math.log(2.0 * math.pi))
    return (log_likelihood(data, w, rho2, task_kind) + log_prior
            + 0.5 * len(d) * math.log(2.0 * math.pi) + 0.5 * logdet_C)


def predict_scores(w, X, task_kind):
    """Regression outputs or positive-class probabilities."""
    z = X @ np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float).reshape(-1)
    return z if task_kind == "regression" else expit(z)
