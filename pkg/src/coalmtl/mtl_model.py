"""Multitask learning with a latent coalescent over weight scales.

Each task's weights are ``N(0, e^S R e^S)`` with a shared correlation
matrix ``R`` and per-task log standard deviations ``S`` that diffuse down
the tree.  Fitting is hard EM: per task the weights and then ``S`` are set
to their modes; the M-step rebuilds the tree over the ``S`` estimates and
re-estimates the diffusion covariance and ``R``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._util import heldout_split, parallel_map
from .coalescent import GaussianMessage, cavity_messages, greedy_rate1
from .da_model import _task_kind, heldout_log_likelihood, lam_update
from .diffusion import DiffusionKernel
from .errors import ConfigError, NumericalError
from .learners import map_weights, predict_scores

logger = logging.getLogger(__name__)

MTL_VARIANTS = ("diag", "full")


@dataclass(frozen=True)
class MtlConfig:
    variant: str = "full"
    sigma2: float = 1.0
    rho2: float = 1.0
    max_iter: int = 20
    heldout_fraction: float = 0.1
    seed: int = 0
    task_kind: str | None = None
    threads: int = 1
    evidence_scale: float = 10.0

    def __post_init__(self):
        if not self.evidence_scale > 0:
            raise ConfigError("evidence_scale must be positive")
        v = str(self.variant).strip().lower()
        if v not in MTL_VARIANTS:
            raise ConfigError(
                f"multitask variant must be one of {MTL_VARIANTS}, got {self.variant!r}")
        object.__setattr__(self, "variant", v)
        if not (self.sigma2 > 0 and self.rho2 > 0):
            raise ConfigError("sigma2 and rho2 must be positive")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError("heldout fraction must lie in (0, 1)")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be non-negative")
        if self.task_kind not in (None, "regression", "classification"):
            raise ConfigError(f"unknown task kind {self.task_kind!r}")

    @property
    def diagonal(self):
        return self.variant == "diag"

    @property
    def evidence_var(self):
        """Prior variance behind each task's own ``S`` estimate."""
        return self.evidence_scale * self.sigma2


@dataclass
class MtlModelState:
    config: MtlConfig
    task_kind: str
    tree: object
    lam: DiffusionKernel
    R: np.ndarray
    S: np.ndarray
    weights: np.ndarray
    heldout_trace: list = field(default_factory=list)
    iteration: int = 0
    best_iteration: int = 0

    @property
    def K(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]

    def prior_cov(self, k):
        sd = np.exp(self.S[k])
        return sd[:, None] * self.R * sd[None, :]


# ---------------------------------------------------------------------------
# Correlation prior and the S objective
# ---------------------------------------------------------------------------


def correlation_log_prior(R):
    """Log density of the uniform-marginal correlation prior, up to a constant.

    ``(0.5 (D+1)(D-1) - 1) log det R - 0.5 (D+1) sum_i log det R_(ii)``
    where ``R_(ii)`` drops row and column ``i``.  Returns ``-inf`` for matrices that are not positive
    definite.
    """
    R = np.asarray(R, dtype=float)
    D = R.shape[0]
    if D == 1:
        return 0.0
    sign, logdet = np.linalg.slogdet(R)
    if sign <= 0:
        return -math.inf
    total = (0.5 * (D + 1) * (D - 1) - 1.0) * logdet
    for i in range(D):
        keep = np.arange(D) != i
        s, ld = np.linalg.slogdet(R[np.ix_(keep, keep)])
        if s <= 0:
            return -math.inf
        total -= 0.5 * (D + 1) * ld
    return float(total)


def _diag_inverse(mat, what):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim == 1:
        if np.any(mat <= 0):
            raise NumericalError(f"{what} must be positive")
        return 1.0 / mat
    try:
        return np.diag(np.linalg.inv(mat)).copy()
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is singular") from exc


def _s_terms(P, lam, R, w):
    return (np.asarray(P, dtype=float), _diag_inverse(lam, "diffusion variance"),
            _diag_inverse(R, "correlation matrix"), np.asarray(w, dtype=float) ** 2)


def s_log_posterior(S, P, lam, R, w):
    """Log posterior of the log standard deviations ``S`` (up to a constant).

    ``-sum S - 0.5 sum (S - P)^2 diag(lam^-1) - 0.5 sum w^2 e^{-2S} diag(R^-1)``.
    ``lam`` and ``R`` may be vectors (diagonal) or matrices; only the
    diagonals of their inverses enter, as in the trace form.
    """
    S = np.asarray(S, dtype=float)
    P, lam_inv, r_inv, w2 = _s_terms(P, lam, R, w)
    d = S - P
    return float(-S.sum() - 0.5 * np.sum(d * d * lam_inv)
                 - 0.5 * np.sum(w2 * np.exp(-2.0 * S) * r_inv))


def s_grad(S, P, lam, R, w):
    """Gradient of :func:`s_log_posterior` with respect to ``S``."""
    S = np.asarray(S, dtype=float)
    P, lam_inv, r_inv, w2 = _s_terms(P, lam, R, w)
    return -1.0 - (S - P) * lam_inv + w2 * np.exp(-2.0 * S) * r_inv


def optimize_s(S0, P, lam, R, w, step=0.1, tol=1e-6, max_iter=10_000,
               trace=None):
    """Gradient ascent on :func:`s_log_posterior` with a fixed base step.

    Each iteration tries ``S + step * g`` and halves the step until the
    objective does not decrease, so accepted iterates are monotone.
    Stops once the full step ``step * max|g|`` falls below ``tol``.

    Parameters
    ----------
    trace : list, optional
        Receives the objective value of every accepted iterate.

    Warns
    -----
    RuntimeWarning
        When ``max_iter`` is reached; the best iterate is returned.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    S = np.array(S0, dtype=float)
    P, lam_inv, r_inv, w2 = _s_terms(P, lam, R, w)

    def f(x):
        d = x - P
        return -x.sum() - 0.5 * np.sum(d * d * lam_inv) - 0.5 * np.sum(
            w2 * np.exp(-2.0 * x) * r_inv)

    fx = f(S)
    if trace is not None:
        trace.append(fx)
    for _ in range(max_iter):
        g = -1.0 - (S - P) * lam_inv + w2 * np.exp(-2.0 * S) * r_inv
        if step * np.max(np.abs(g)) < tol:
            return S
        alpha = step
        while True:
            cand = S + alpha * g
            fc = f(cand)
            if fc >= fx:
                break
            alpha *= 0.5
            if alpha * np.max(np.abs(g)) < 1e-15 * max(1.0, np.max(np.abs(S))):
                return S
        S, fx = cand, fc
        if trace is not None:
            trace.append(fx)
    warnings.warn(f"optimize_s stopped at the iteration cap ({max_iter})",
                  RuntimeWarning, stacklevel=2)
    return S


def s_leaf_variance(R):
    """Variance of a leaf's ``S`` message: inverse expected Fisher information.

    One draw ``w ~ N(0, e^S R e^S)`` carries information
    ``1 + R_jj (R^-1)_jj`` about ``S_j``; this does not depend on ``S``,
    so noisy small weights do not inflate the message.
    """
    R = np.asarray(R, dtype=float)
    return 1.0 / (1.0 + np.diag(R) * _diag_inverse(R, "correlation matrix"))


def r_update(S, W, tree=None):
    """Shared correlation from the scatter of whitened weights ``e^{-S} w``.

    The scale matrix ``I + sum_k u_k u_k^T`` is turned into the
    Inverse-Wishart mode and normalized to unit diagonal.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    K, D = W.shape
    if tree is not None and tree.K != K:
        raise ValueError(f"tree has {tree.K} leaves but {K} tasks were given")
    U = np.exp(-S) * W
    Sigma = np.eye(D) + U.T @ U
    mode = Sigma / ((D + K + 1) + D + 1)
    if not np.all(np.isfinite(mode)) or np.linalg.eigvalsh(mode).min() <= 0:
        warnings.warn("degenerate correlation scatter; adding jitter",
                      RuntimeWarning, stacklevel=2)
        mode = np.nan_to_num(mode) + 1e-8 * np.eye(D)
    sd = np.sqrt(np.diag(mode))
    R = mode / np.outer(sd, sd)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    return np.clip(R, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Hard EM
# ---------------------------------------------------------------------------


def s_evidence(W, R, sigma2):
    """Each task's own ``S`` estimate: the mode given only its weights.

    Uses a weak prior ``N(0, sigma2)`` per entry in place of the tree, so the
    estimate is not shrunk towards the other tasks.  These are the leaf
    messages for tree building, cavities and the diffusion update; the
    tree-informed modes are only used in the weight prior.
    """
    W = np.atleast_2d(W)
    D = W.shape[1]
    prior = np.full(D, float(sigma2))
    return np.array([optimize_s(np.zeros(D), np.zeros(D), prior, R, w)
                     for w in W])


def _s_messages(S, R, diagonal):
    v = s_leaf_variance(R)
    out = []
    for s in S:
        out.append(GaussianMessage(s, v if diagonal else np.diag(v)))
    return out


def _root_prior(config, D):
    var = np.full(D, config.sigma2) if config.diagonal else config.sigma2 * np.eye(D)
    return GaussianMessage(np.zeros(D), var)


def _check_tasks(tasks):
    if len(tasks) < 2:
        raise ConfigError("need at least 2 tasks")
    D = tasks[0].dim
    if any(t.dim != D for t in tasks):
        raise ConfigError("all tasks must share one feature dimension")
    return D


def mtl_init(tasks, config):
    """``S = 0``, ``R = I``, independent MAP weights under ``N(0, I)``.

    The initial tree is built from the tasks' own ``S`` evidence.
    """
    D = _check_tasks(tasks)
    kind = _task_kind(tasks, config)
    eye = np.ones(D)
    W = np.array(parallel_map(
        lambda t: map_weights(t, np.zeros(D), eye, config.rho2, kind),
        tasks, config.threads))
    S = np.zeros_like(W)
    R = np.eye(D)
    lam = DiffusionKernel.isotropic(config.sigma2, D, config.variant)
    msgs = _s_messages(s_evidence(W, R, config.evidence_var), R, config.diagonal)
    tree = greedy_rate1(msgs, lam.lam)
    return MtlModelState(config, kind, tree, lam, R, S, W)


def mtl_e_step(state, tasks, config, iteration=1):
    """Hard E-step: weights given ``S``, then ``S`` given the new weights.

    The prior on task ``k``'s ``S`` is its cavity: the other tasks' ``S``
    evidence propagated through the tree.
    """
    kind = state.task_kind
    D = state.dim
    W = np.array(parallel_map(
        lambda k: map_weights(tasks[k], np.zeros(D), state.prior_cov(k),
                              config.rho2, kind, w0=state.weights[k]),
        range(len(tasks)), config.threads))
    evidence = s_evidence(W, state.R, config.evidence_var)
    cav = cavity_messages(state.tree,
                          _s_messages(evidence, state.R, config.diagonal),
                          state.lam, _root_prior(config, D))
    step = 0.1 / max(iteration, 1)

    def solve(k):
        return optimize_s(state.S[k], cav[k].mean, cav[k].var, state.R, W[k],
                          step=step)

    S = np.array(parallel_map(solve, range(len(tasks)), config.threads))
    return W, S


def mtl_m_step(state, config):
    """New tree over the ``S`` evidence, diffusion covariance and ``R``."""
    evidence = s_evidence(state.weights, state.R, config.evidence_var)
    msgs = _s_messages(evidence, state.R, config.diagonal)
    tree = greedy_rate1(msgs, state.lam.lam)
    lam, _ = lam_update(tree, msgs, state.lam, _root_prior(config, state.dim),
                        config.diagonal)
    R = r_update(state.S, state.weights, tree)
    return tree, lam, R


def mtl_fit(tasks, config):
    """Hard EM with heldout-likelihood selection over iterations."""
    _check_tasks(tasks)
    rng = np.random.default_rng(config.seed)
    train, held = [], []
    for t in tasks:
        tr, ho = heldout_split(t.n, config.heldout_fraction, rng, t.task)
        train.append(t.subset(tr))
        held.append(t.subset(ho))
    state = mtl_init(train, config)
    kind = state.task_kind
    trace = [heldout_log_likelihood(state.weights, held, config.rho2, kind)]
    best, best_ll = state, trace[0]
    for it in range(1, config.max_iter + 1):
        W, S = mtl_e_step(state, train, config, it)
        state = dataclasses.replace(state, weights=W, S=S, iteration=it)
        tree, lam, R = mtl_m_step(state, config)
        state = dataclasses.replace(state, tree=tree, lam=lam, R=R)
        ll = heldout_log_likelihood(state.weights, held, config.rho2, kind)
        trace.append(ll)
        logger.debug("hard EM iteration %d heldout log-likelihood %.6f", it, ll)
        if ll > best_ll:
            best, best_ll = state, ll
    return dataclasses.replace(best, heldout_trace=trace,
                               best_iteration=best.iteration)


def mtl_predict(state, k, x):
    """Regression output, or positive-class probability, for task ``k``."""
    if not 0 <= k < state.K:
        raise IndexError(f"task {k} out of range for {state.K} tasks")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != state.dim:
        raise ValueError(f"input dimension {x.shape[-1]} != {state.dim}")
    out = predict_scores(state.weights[k], np.atleast_2d(x), state.task_kind)
    return float(out[0]) if x.ndim == 1 else out
