"""Domain adaptation with a latent coalescent over task weight vectors.

EM alternates a Laplace E-step (each task's weights under the prior its
position in the tree implies) with an M-step that rebuilds the tree by
Greedy-Rate1 and re-estimates the Brownian covariance from the scatter of
sibling differences.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse

from ._util import heldout_split, parallel_map, whitened_scatter
from .coalescent import (GaussianMessage, greedy_rate1, likelihood_cavities,
                         posterior_marginals)
from .diffusion import DiffusionKernel, DiscreteKernel
from .errors import ConfigError, NumericalError
from .learners import (WeightPosterior, infer_task_kind, laplace_covariance,
                       likelihood_message, log_likelihood, map_weights,
                       predict_scores)

logger = logging.getLogger(__name__)

VARIANTS = ("diag", "full", "diag+x", "full+x", "data")


def parse_variant(name):
    v = str(name).strip().lower().replace(" ", "")
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return v


@dataclass(frozen=True)
class DaConfig:
    variant: str = "full"
    sigma2: float = 1.0
    rho2: float = 1.0
    max_iter: int = 20
    heldout_fraction: float = 0.1
    seed: int = 0
    task_kind: str | None = None
    discrete_features: tuple = ()
    discrete_rate: float = 1.0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", parse_variant(self.variant))
        if not (self.sigma2 > 0 and self.rho2 > 0):
            raise ConfigError("sigma2 and rho2 must be positive")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError("heldout fraction must lie in (0, 1)")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be non-negative")
        if self.task_kind not in (None, "regression", "classification"):
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        object.__setattr__(self, "discrete_features",
                           tuple(int(i) for i in self.discrete_features))

    @property
    def diagonal(self):
        return self.variant.startswith("diag")

    @property
    def models_data(self):
        return self.variant.endswith("+x") or self.variant == "data"


@dataclass
class InputModel:
    """Per-task input statistics used as extra leaf evidence for the tree."""

    cont_idx: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    lam: np.ndarray
    disc_idx: np.ndarray
    disc_msgs: list
    kernel: DiscreteKernel | None

    def leaf_messages(self):
        return [GaussianMessage(m, v) for m, v in zip(self.means, self.variances)]

    @property
    def discrete(self):
        if self.kernel is None:
            return None
        return self.disc_msgs, self.kernel


def _column_moments(X):
    n = X.shape[0]
    if sparse.issparse(X):
        mean = np.asarray(X.mean(axis=0)).reshape(-1)
        sq = np.asarray(X.multiply(X).mean(axis=0)).reshape(-1)
    else:
        mean = X.mean(axis=0)
        sq = (X * X).mean(axis=0)
    return mean, np.maximum(sq - mean * mean, 0.0) * n / max(n - 1, 1)


def build_input_model(tasks, discrete_features=(), rate=1.0):
    """Gaussian statistics of continuous inputs and smoothed frequencies
    of discrete inputs, one leaf per task."""
    D = tasks[0].dim
    disc_idx = np.array(sorted(set(discrete_features)), dtype=int)
    if np.any((disc_idx < 0) | (disc_idx >= D)):
        raise ConfigError("discrete feature index out of range")
    cont_idx = np.setdiff1d(np.arange(D), disc_idx)
    nonempty = [t for t in tasks if t.n]
    if sparse.issparse(tasks[0].X):
        pooled = sparse.vstack([t.X for t in nonempty]).tocsr()
    else:
        pooled = np.vstack([t.X for t in nonempty])
    pooled_mean, pooled_var = _column_moments(pooled[:, cont_idx])
    means, variances = [], []
    for t in tasks:
        if t.n == 0:
            means.append(pooled_mean)
            variances.append(np.full(len(cont_idx), 1e6))
            continue
        m, v = _column_moments(t.X[:, cont_idx])
        means.append(m)
        variances.append(np.maximum(v, 1e-12) / t.n)
    means = np.array(means)
    variances = np.array(variances)
    filled = [k for k, t in enumerate(tasks) if t.n]
    spread = means[filled].var(axis=0) if len(filled) > 1 else pooled_var
    lam = np.maximum(spread, 1e-6 * pooled_var + 1e-12)
    disc_msgs, kernel = [[] for _ in tasks], None
    if len(disc_idx):
        qs = []
        for d in disc_idx:
            col = pooled[:, [d]]
            col = (col.toarray() if sparse.issparse(col) else col).reshape(-1)
            cats = np.unique(col)
            counts = np.array([(col == c).sum() for c in cats], dtype=float)
            qs.append((counts + 1.0) / (counts.sum() + len(cats)))
            for k, t in enumerate(tasks):
                xk = t.X[:, [d]]
                xk = (xk.toarray() if sparse.issparse(xk) else xk).reshape(-1)
                ck = np.array([(xk == c).sum() for c in cats], dtype=float)
                disc_msgs[k].append((ck + 1.0) / (ck.sum() + len(cats)))
        kernel = DiscreteKernel(tuple(qs), np.full(len(qs), float(rate)))
    return InputModel(cont_idx, means, variances, lam, disc_idx, disc_msgs,
                      kernel)


@dataclass
class DaModelState:
    config: DaConfig
    task_kind: str
    tree: object
    lam: DiffusionKernel
    posteriors: list
    node_marginals: list
    input_model: InputModel | None = None
    heldout_trace: list = field(default_factory=list)
    iteration: int = 0
    best_iteration: int = 0

    @property
    def K(self):
        return len(self.posteriors)

    @property
    def dim(self):
        return len(self.posteriors[0].mean)

    @property
    def weights(self):
        return np.array([p.mean for p in self.posteriors])


def _root_prior(config, D, diagonal):
    var = np.full(D, config.sigma2) if diagonal else config.sigma2 * np.eye(D)
    return GaussianMessage(np.zeros(D), var)


def weight_messages(posteriors, diagonal):
    return [GaussianMessage(p.mean, p.diag_cov() if diagonal else p.cov)
            for p in posteriors]


def _concat(msgs_a, lam_a, msgs_b, lam_b, diagonal):
    out = []
    for a, b in zip(msgs_a, msgs_b):
        if diagonal:
            out.append(GaussianMessage(np.concatenate([a.mean, b.mean]),
                                       np.concatenate([a.diag_var(), b.diag_var()])))
        else:
            out.append(GaussianMessage(np.concatenate([a.mean, b.mean]),
                                       linalg.block_diag(a.full_var(), b.full_var())))
    if diagonal:
        lam = np.concatenate([np.diag(lam_a) if lam_a.ndim == 2 else lam_a, lam_b])
    else:
        lam = linalg.block_diag(np.diag(lam_a) if lam_a.ndim == 1 else lam_a,
                                np.diag(lam_b))
    return out, lam


def build_tree(posteriors, lam, config, input_model=None):
    """Greedy-Rate1 over the variant's leaf evidence."""
    if config.variant == "data":
        return greedy_rate1(input_model.leaf_messages(), input_model.lam,
                            discrete=input_model.discrete)
    msgs = weight_messages(posteriors, config.diagonal)
    lam_arr = lam.lam
    discrete = None
    if config.models_data:
        msgs, lam_arr = _concat(msgs, lam_arr, input_model.leaf_messages(),
                                input_model.lam, config.diagonal)
        discrete = input_model.discrete
    return greedy_rate1(msgs, lam_arr, discrete=discrete)


def diffusion_scatter(tree, leaf_msgs, marginals, lam, diagonal):
    """Identity plus the whitened scatter of sibling differences.

    For every internal node with children ``l, r`` the difference
    ``mu_l - mu_r`` is whitened by ``v_l + v_r + (delta_l + delta_r) lam``.
    Leaves use their own messages, internal nodes their posterior
    marginals.
    """
    lam = np.asarray(getattr(lam, "lam", lam), dtype=float)
    D = leaf_msgs[0].dim
    Sigma = np.eye(D)

    def node_msg(n):
        return leaf_msgs[n] if tree.is_leaf(n) else marginals[n]

    for i in tree.internal_ids:
        l, r = tree.children[i]
        ml, mr = node_msg(l), node_msg(r)
        t_i = tree.branch_length(l) + tree.branch_length(r)
        if diagonal:
            lam_d = np.diag(lam) if lam.ndim == 2 else lam
            M = ml.diag_var() + mr.diag_var() + t_i * lam_d
        else:
            lam_f = np.diag(lam) if lam.ndim == 1 else lam
            M = ml.full_var() + mr.full_var() + t_i * lam_f
        try:
            Sigma = Sigma + whitened_scatter(ml.mean - mr.mean, M, diagonal)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"degenerate scatter at node {i}") from exc
    return Sigma


def lam_update(tree, leaf_msgs, lam, root_prior, diagonal):
    """Inverse-Wishart mode for the Brownian covariance.

    Returns the new kernel and the node marginals used to compute it.
    """
    marg = posterior_marginals(tree, leaf_msgs, lam, root_prior)
    Sigma = diffusion_scatter(tree, leaf_msgs, marg, lam, diagonal)
    if np.linalg.eigvalsh(0.5 * (Sigma + Sigma.T)).min() <= 0:
        raise NumericalError("scatter matrix is not positive definite")
    D, K = Sigma.shape[0], tree.K
    dof = D + K + 1
    mode = Sigma / (dof + D + 1)
    new = DiffusionKernel(np.diag(mode).copy() if diagonal else mode)
    return new, marg


def _task_kind(tasks, config):
    if config.task_kind is not None:
        return config.task_kind
    labels = np.concatenate([t.y for t in tasks]) if tasks else np.array([])
    return infer_task_kind(labels)


def da_init(tasks, config):
    """Independent MAP weights under ``N(0, sigma2 I)`` and an initial tree."""
    if len(tasks) < 2:
        raise ConfigError("need at least 2 tasks")
    D = tasks[0].dim
    if any(t.dim != D for t in tasks):
        raise ConfigError("all tasks must share one feature dimension")
    kind = _task_kind(tasks, config)
    prior_var = np.full(D, config.sigma2)

    def solve(t):
        w = map_weights(t, np.zeros(D), prior_var, config.rho2, kind)
        return WeightPosterior(w, laplace_covariance(t, w, prior_var,
                                                     config.rho2, kind))

    posteriors = parallel_map(solve, tasks, config.threads)
    lam = DiffusionKernel.isotropic(config.sigma2, D,
                                    "diag" if config.diagonal else "full")
    input_model = None
    if config.models_data:
        input_model = build_input_model(tasks, config.discrete_features,
                                        config.discrete_rate)
    tree = build_tree(posteriors, lam, config, input_model)
    marg = posterior_marginals(tree, weight_messages(posteriors, config.diagonal),
                               lam, _root_prior(config, D, config.diagonal))
    return DaModelState(config, kind, tree, lam, posteriors, marg, input_model)


def da_e_step(state, tasks, config):
    """Per-task posteriors under the tree-induced prior at each leaf.

    The prior for task ``k`` is the cavity Gaussian at its leaf: every
    other task's likelihood (Gaussian in information form, linearized at
    the current weights for classification) propagated through the tree
    and combined with the root prior.  Exact for regression.
    """
    D = state.dim
    kind = state.task_kind
    liks = [likelihood_message(t, p.mean, config.rho2, kind)
            for t, p in zip(tasks, state.posteriors)]
    cav = likelihood_cavities(state.tree, [J for J, _ in liks],
                              [h for _, h in liks], state.lam.matrix(),
                              np.zeros(D), config.sigma2 * np.eye(D))

    def solve(k):
        m, V = cav[k]
        w = map_weights(tasks[k], m, V, config.rho2, kind,
                        w0=state.posteriors[k].mean)
        return WeightPosterior(w, laplace_covariance(tasks[k], w, V,
                                                     config.rho2, kind))

    return parallel_map(solve, range(len(tasks)), config.threads)


def da_m_step(state, config):
    """New tree (unless the variant fixes it) and Brownian covariance."""
    tree = state.tree
    if config.variant != "data":
        tree = build_tree(state.posteriors, state.lam, config, state.input_model)
    msgs = weight_messages(state.posteriors, config.diagonal)
    lam, marg = lam_update(tree, msgs, state.lam,
                           _root_prior(config, state.dim, config.diagonal),
                           config.diagonal)
    return tree, lam, marg


def heldout_log_likelihood(weights, heldout, rho2, kind):
    return float(sum(log_likelihood(t, w, rho2, kind)
                     for t, w in zip(heldout, weights) if t.n))


def da_fit(tasks, config):
    """EM with heldout-likelihood model selection over iterations.

    A fraction of each task's training data is held out; after
    initialization and after every iteration the heldout log-likelihood
    of the posterior-mean weights is recorded and the best state returned.
    """
    rng = np.random.default_rng(config.seed)
    train, held = [], []
    for t in tasks:
        tr, ho = heldout_split(t.n, config.heldout_fraction, rng, t.task)
        train.append(t.subset(tr))
        held.append(t.subset(ho))
    state = da_init(train, config)
    kind = state.task_kind
    trace = [heldout_log_likelihood(state.weights, held, config.rho2, kind)]
    best, best_ll = state, trace[0]
    for it in range(1, config.max_iter + 1):
        posteriors = da_e_step(state, train, config)
        state = dataclasses.replace(state, posteriors=posteriors, iteration=it)
        tree, lam, marg = da_m_step(state, config)
        state = dataclasses.replace(state, tree=tree, lam=lam,
                                    node_marginals=marg)
        ll = heldout_log_likelihood(state.weights, held, config.rho2, kind)
        trace.append(ll)
        logger.debug("EM iteration %d heldout log-likelihood %.6f", it, ll)
        if ll > best_ll:
            best, best_ll = state, ll
    return dataclasses.replace(best, heldout_trace=trace,
                               best_iteration=best.iteration)


def da_predict(state, k, x):
    """Regression output, or positive-class probability, for task ``k``."""
    if not 0 <= k < state.K:
        raise IndexError(f"task {k} out of range for {state.K} tasks")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != state.dim:
        raise ValueError(f"input dimension {x.shape[-1]} != {state.dim}")
    out = predict_scores(state.posteriors[k].mean, np.atleast_2d(x),
                         state.task_kind)
    return float(out[0]) if x.ndim == 1 else out


def predict_label(prob):
    """+1 when the probability reaches 0.5, else -1."""
    return np.where(np.asarray(prob) >= 0.5, 1.0, -1.0)
