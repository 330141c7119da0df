"""Mutation kernels over tree branches and forward samplers.

Continuous parameters diffuse as Brownian motion with covariance
``delta * lam`` per branch; discrete features follow a telegraph process
that relaxes towards an equilibrium distribution at a per-feature rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit

from .coalescent import CoalescentTree, sample_coalescent
from .errors import ConfigError
from .learners import TaskDataset


@dataclass(frozen=True)
class DiffusionKernel:
    """Brownian covariance per unit time: D-vector (diag) or D x D (full)."""

    lam: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if lam.ndim == 1:
            if np.any(lam <= 0.0) or not np.all(np.isfinite(lam)):
                raise ValueError("diagonal kernel entries must be positive")
        elif lam.ndim == 2 and lam.shape[0] == lam.shape[1]:
            if not np.allclose(lam, lam.T, rtol=1e-10, atol=1e-12):
                raise ValueError("full kernel must be symmetric")
            lam = 0.5 * (lam + lam.T)
            scale = max(1.0, float(np.max(np.abs(lam))))
            if np.linalg.eigvalsh(lam).min() < -1e-10 * scale:
                raise ValueError("full kernel must be positive semi-definite")
        else:
            raise ValueError(f"bad kernel shape {lam.shape}")
        object.__setattr__(self, "lam", lam)

    @classmethod
    def isotropic(cls, scale, dim, variant="full"):
        if variant == "diag":
            return cls(np.full(dim, float(scale)))
        return cls(float(scale) * np.eye(dim))

    @property
    def variant(self):
        return "diag" if self.lam.ndim == 1 else "full"

    @property
    def dim(self):
        return self.lam.shape[0]

    def matrix(self):
        return np.diag(self.lam) if self.lam.ndim == 1 else self.lam

    def diagonal(self):
        return self.lam if self.lam.ndim == 1 else np.diag(self.lam).copy()


@dataclass(frozen=True)
class DiscreteKernel:
    """Telegraph-process kernel: equilibrium ``q[d]`` and rate ``rates[d]``."""

    q: tuple
    rates: np.ndarray

    def __post_init__(self):
        q = tuple(np.asarray(v, dtype=float) for v in self.q)
        rates = np.asarray(self.rates, dtype=float).reshape(-1)
        if len(q) != len(rates):
            raise ValueError("one equilibrium vector per rate is required")
        for v in q:
            if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
                raise ValueError("equilibrium vectors must lie on the simplex")
        if np.any(rates <= 0):
            raise ValueError("rates must be positive")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "rates", rates)


@dataclass(frozen=True)
class RootPrior:
    """Root mean and the Inverse-Wishart draw parameters for ``lam``."""

    mean: np.ndarray
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        object.__setattr__(self, "mean",
                           np.atleast_1d(np.asarray(self.mean, dtype=float)))

    @property
    def dof(self):
        return len(self.mean) + 1


def _psd_sqrt(mat):
    w, U = np.linalg.eigh(0.5 * (mat + mat.T))
    return U * np.sqrt(np.clip(w, 0.0, None))


def brownian_transition(parent_value, delta, lam, rng, size=None):
    """Draw a child value ``N(parent_value, delta * lam)``.

    ``size`` adds a leading axis of independent draws.
    """
    if not delta > 0:
        raise ValueError(f"branch length must be positive, got {delta}")
    lam = lam if isinstance(lam, DiffusionKernel) else DiffusionKernel(lam)
    parent = np.asarray(parent_value, dtype=float)
    shape = parent.shape if size is None else (size,) + parent.shape
    z = rng.standard_normal(shape)
    if lam.variant == "diag":
        return parent + np.sqrt(delta * lam.lam) * z
    return parent + np.sqrt(delta) * z @ _psd_sqrt(lam.lam).T


def discrete_transition_matrix(delta, d, kernel):
    """Transition probabilities for feature ``d`` over a branch of length delta.

    ``exp(-delta r) I + (1 - exp(-delta r)) 1 q^T``; rows sum to one and
    relax to ``q`` as the branch grows.
    """
    if delta < 0:
        raise ValueError(f"branch length must be non-negative, got {delta}")
    q = kernel.q[d]
    decay = np.exp(-delta * kernel.rates[d])
    return decay * np.eye(len(q)) + (1.0 - decay) * np.outer(np.ones(len(q)), q)


def sample_inverse_wishart(scale, dof, rng):
    out = stats.invwishart(df=dof, scale=np.atleast_2d(scale)).rvs(
        random_state=rng)
    return np.atleast_2d(out)


def sample_correlation(dim, rng):
    """Correlation matrix from the normalized Inverse-Wishart(I, D+1) draw.

    This is the construction whose marginal has uniform pairwise
    correlations.
    """
    cov = sample_inverse_wishart(np.eye(dim), dim + 1, rng)
    sd = np.sqrt(np.diag(cov))
    R = cov / np.outer(sd, sd)
    np.fill_diagonal(R, 1.0)
    return R


@dataclass
class SyntheticInstance:
    """Ground truth plus data drawn from one of the generative stories."""

    kind: str
    task: str
    tree: CoalescentTree
    lam: np.ndarray
    node_values: np.ndarray
    weights: np.ndarray
    tasks: list
    test_tasks: list = field(default_factory=list)
    R: np.ndarray | None = None
    log_std: np.ndarray | None = None
    input_means: np.ndarray | None = None


def _labels(X, w, task, rho2, rng):
    z = X @ w
    if task == "regression":
        if rho2 == 0.0:
            return z
        return z + np.sqrt(rho2) * rng.standard_normal(len(z))
    if task == "classification":
        p = expit(z)
        return np.where(rng.random(len(z)) < p, 1.0, -1.0)
    raise ConfigError(f"unknown task kind {task!r}")


def _diffuse(tree, root_value, lam, rng):
    values = np.zeros((tree.n_nodes, len(root_value)))
    values[tree.root] = root_value
    for node in reversed(range(tree.n_nodes - 1)):
        values[node] = brownian_transition(
            values[tree.parent[node]], tree.branch_length(node), lam, rng)
    return values


def _check_sizes(K, N_k, sigma2, rho2):
    if K < 2:
        raise ConfigError("need at least 2 tasks")
    if not sigma2 > 0 or rho2 < 0:
        raise ConfigError("sigma2 must be positive and rho2 non-negative")
    sizes = np.broadcast_to(np.asarray(N_k, dtype=int), (K,))
    if np.any(sizes < 0):
        raise ConfigError("task sizes must be non-negative")
    return sizes


def sample_da_instance(K, D, N_k, sigma2, rho2, task, rng, *, lam=None,
                       tree=None, min_duration=0.0, root_mean=None,
                       input_shift=1.0, n_test=0):
    """Draw a domain-adaptation problem: weights diffuse down a coalescent.

    Parameters
    ----------
    K, D : int
        Number of tasks and features.
    N_k : int or sequence of int
        Training examples per task.
    sigma2, rho2 : float
        Prior scale and regression noise variance.
    task : {"regression", "classification"}
    rng : numpy.random.Generator
    lam : array, optional
        Fixed Brownian covariance; drawn from IW(sigma2 I, D+1) otherwise.
    tree : CoalescentTree, optional
        Fixed tree; drawn from the coalescent otherwise.
    min_duration : float
        Lower bound added to every sampled inter-event duration.
    root_mean : array, optional
        Fixed root weight vector; drawn from N(0, sigma2 I) otherwise.
    input_shift : float
        Scale of the per-task Gaussian mean shift of the inputs.
    n_test : int
        Extra examples per task drawn into ``test_tasks``.
    """
    sizes = _check_sizes(K, N_k, sigma2, rho2)
    lam = (sample_inverse_wishart(sigma2 * np.eye(D), D + 1, rng)
           if lam is None else np.asarray(lam, dtype=float))
    kernel = DiffusionKernel(lam)
    if tree is None:
        tree = sample_coalescent(K, rng, min_duration=min_duration)
    elif tree.K != K:
        raise ConfigError(f"tree has {tree.K} leaves, need {K}")
    if root_mean is None:
        root_mean = np.sqrt(sigma2) * rng.standard_normal(D)
    values = _diffuse(tree, np.asarray(root_mean, dtype=float), kernel, rng)
    weights = values[:K].copy()
    shifts = input_shift * rng.standard_normal((K, D))
    tasks, tests = [], []
    for k in range(K):
        X = shifts[k] + rng.standard_normal((sizes[k], D))
        tasks.append(TaskDataset(X, _labels(X, weights[k], task, rho2, rng), k))
        if n_test:
            Xt = shifts[k] + rng.standard_normal((n_test, D))
            tests.append(
                TaskDataset(Xt, _labels(Xt, weights[k], task, rho2, rng), k))
    return SyntheticInstance("da", task, tree, kernel.lam, values, weights,
                             tasks, tests, input_means=shifts)


def sample_mtl_instance(K, D, N_k, sigma2, rho2, rng, *, task="regression",
                        R=None, lam=None, tree=None, min_duration=0.0,
                        root_log_std=None, n_test=0):
    """Draw a multitask problem: log standard deviations diffuse down a tree.

    Each task's weights are ``N(0, exp(S) R exp(S))`` with ``S`` the leaf's
    log standard deviations; inputs share one standard-normal distribution.
    Arguments mirror :func:`sample_da_instance`; ``R`` fixes the shared
    correlation matrix, otherwise drawn from its uniform-marginal prior.
    """
    sizes = _check_sizes(K, N_k, sigma2, rho2)
    R = sample_correlation(D, rng) if R is None else np.asarray(R, dtype=float)
    lam = (sample_inverse_wishart(sigma2 * np.eye(D), D + 1, rng)
           if lam is None else np.asarray(lam, dtype=float))
    kernel = DiffusionKernel(lam)
    if tree is None:
        tree = sample_coalescent(K, rng, min_duration=min_duration)
    elif tree.K != K:
        raise ConfigError(f"tree has {tree.K} leaves, need {K}")
    root = np.zeros(D) if root_log_std is None else np.asarray(root_log_std)
    values = _diffuse(tree, root, kernel, rng)
    log_std = values[:K].copy()
    weights = np.zeros((K, D))
    for k in range(K):
        sd = np.exp(log_std[k])
        cov = sd[:, None] * R * sd[None, :]
        weights[k] = _psd_sqrt(cov) @ rng.standard_normal(D)
    tasks, tests = [], []
    for k in range(K):
        X = rng.standard_normal((sizes[k], D))
        tasks.append(TaskDataset(X, _labels(X, weights[k], task, rho2, rng), k))
        if n_test:
            Xt = rng.standard_normal((n_test, D))
            tests.append(
                TaskDataset(Xt, _labels(Xt, weights[k], task, rho2, rng), k))
    return SyntheticInstance("mtl", task, tree, kernel.lam, values, weights,
                             tasks, tests, R=R, log_std=log_std)
