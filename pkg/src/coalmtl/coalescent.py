"""Kingman coalescent trees, Gaussian belief propagation and Greedy-Rate1.

Trees are stored with leaves ``0..K-1`` (one per task, labelled by task
index) followed by internal nodes ``K..2K-2`` in event order, i.e. sorted by
decreasing time.  Leaves sit at time 0 and internal times are negative.

Messages come in two flavours, selected by the shape of the variance: a
length-D vector (diagonal variant, every operation is coordinate-wise) or a
D x D matrix (full variant).
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InvalidTreeError, NumericalError

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_DELTA_GRID = np.logspace(-9.0, 4.0, 131)
_MIN_DELTA = 1e-12
_TIE_TOL = 1e-7


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeNode:
    id: int
    parent: int | None
    children: tuple[int, ...]
    time: float
    label: int | None


class CoalescentTree:
    """Binary coalescent tree with leaves at time 0.

    Parameters
    ----------
    n_leaves : int
        Number of leaves K.
    parent : sequence of int
        Parent id per node, ``-1`` for the root.
    children : sequence of tuple
        Child ids per node; empty for leaves.
    times : sequence of float
        Node times; 0 for leaves, strictly decreasing over internal ids.
    """

    __slots__ = ("K", "parent", "children", "times")

    def __init__(self, n_leaves, parent, children, times, validate=True):
        self.K = int(n_leaves)
        self.parent = tuple(int(p) for p in parent)
        self.children = tuple(tuple(int(c) for c in ch) for ch in children)
        self.times = tuple(float(t) for t in times)
        if validate:
            self._validate()

    @classmethod
    def from_merges(cls, n_leaves, merges, times):
        """Build a tree from an ordered list of merged node-id pairs.

        ``merges[i]`` joins two existing nodes into node ``n_leaves + i``
        at ``times[i]``.
        """
        K = int(n_leaves)
        if len(merges) != max(K - 1, 0) or len(times) != len(merges):
            raise InvalidTreeError(
                f"need {K - 1} merges and times for {K} leaves, "
                f"got {len(merges)} merges and {len(times)} times")
        n = 2 * K - 1
        parent = [-1] * n
        children = [()] * n
        node_times = [0.0] * n
        for i, (a, b) in enumerate(merges):
            node = K + i
            for c in (a, b):
                if not 0 <= c < node or parent[c] != -1:
                    raise InvalidTreeError(
                        f"merge {i} uses unavailable node {c}")
                parent[c] = node
            children[node] = (int(a), int(b))
            node_times[node] = float(times[i])
        return cls(K, parent, children, node_times)

    def _validate(self):
        K, n = self.K, len(self.parent)
        if K < 1:
            raise InvalidTreeError("tree needs at least one leaf")
        if n != 2 * K - 1 or len(self.children) != n or len(self.times) != n:
            raise InvalidTreeError(
                f"expected {2 * K - 1} nodes for {K} leaves, got {n}")
        roots = [i for i, p in enumerate(self.parent) if p == -1]
        if len(roots) != 1 or roots[0] != n - 1:
            raise InvalidTreeError(
                f"tree must have a single root with the last id, got {roots}")
        for i in range(n):
            ch = self.children[i]
            t = self.times[i]
            if not math.isfinite(t):
                raise InvalidTreeError(f"node {i} has non-finite time {t}")
            if i < K:
                if ch:
                    raise InvalidTreeError(f"leaf {i} has children")
                if t != 0.0:
                    raise InvalidTreeError(f"leaf {i} has time {t} != 0")
                continue
            if len(ch) != 2:
                raise InvalidTreeError(
                    f"internal node {i} has {len(ch)} children, need 2")
            for c in ch:
                if self.parent[c] != i:
                    raise InvalidTreeError(
                        f"node {c} lists parent {self.parent[c]}, not {i}")
                if not t < self.times[c]:
                    raise InvalidTreeError(
                        f"node {i} (t={t}) is not older than child {c} "
                        f"(t={self.times[c]})")
            prev = 0.0 if i == K else self.times[i - 1]
            if not t < prev:
                raise InvalidTreeError(
                    f"event {i - K + 1} has non-positive duration "
                    f"{prev - t}")

    # -- structure ---------------------------------------------------------

    @property
    def n_nodes(self):
        return len(self.parent)

    @property
    def root(self):
        return self.n_nodes - 1

    @property
    def internal_ids(self):
        return range(self.K, self.n_nodes)

    @property
    def nodes(self):
        return [
            TreeNode(i, None if p == -1 else p, self.children[i],
                     self.times[i], i if i < self.K else None)
            for i, p in enumerate(self.parent)
        ]

    def is_leaf(self, node):
        return node < self.K

    def branch_length(self, node):
        """Length of the branch above ``node`` (0 for the root)."""
        p = self.parent[node]
        return 0.0 if p == -1 else self.times[node] - self.times[p]

    @property
    def durations(self):
        """Inter-event durations ``delta_i`` in event order."""
        t = (0.0,) + self.times[self.K:]
        return np.array([t[i] - t[i + 1] for i in range(self.K - 1)])

    def leaves_under(self, node):
        stack, out = [node], []
        while stack:
            n = stack.pop()
            if n < self.K:
                out.append(n)
            else:
                stack.extend(self.children[n])
        return frozenset(out)

    def clades(self):
        """Leaf sets of all internal nodes (the unranked topology)."""
        return frozenset(self.leaves_under(i) for i in self.internal_ids)

    def same_topology(self, other):
        return self.K == other.K and self.clades() == other.clades()

    def __eq__(self, other):
        if not isinstance(other, CoalescentTree):
            return NotImplemented
        return (self.K == other.K and self.parent == other.parent
                and self.children == other.children
                and self.times == other.times)

    def __hash__(self):
        return hash((self.K, self.parent, self.children, self.times))

    def __repr__(self):
        return f"CoalescentTree(K={self.K}, newick={to_newick(self)!r})"


@dataclass(frozen=True)
class GaussianMessage:
    """Mean/variance pair attached to a tree node.

    ``var`` is a length-D vector for diagonal messages or a D x D matrix.
    """

    mean: np.ndarray
    var: np.ndarray = field(repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.asarray(self.var, dtype=float)
        if var.ndim == 0:
            var = np.full(mean.shape, float(var))
        if mean.ndim != 1:
            raise ValueError("message mean must be a vector")
        D = mean.shape[0]
        if var.shape not in ((D,), (D, D)):
            raise ValueError(
                f"variance shape {var.shape} does not match dimension {D}")
        if not np.all(np.isfinite(mean)):
            raise ValueError("message mean must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def is_diag(self):
        return self.var.ndim == 1

    def full_var(self):
        return np.diag(self.var) if self.is_diag else self.var

    def diag_var(self):
        return self.var if self.is_diag else np.diag(self.var).copy()


def _lam_array(lam):
    """Accept a DiffusionKernel-like object or a raw vector/matrix."""
    arr = np.asarray(getattr(lam, "lam", lam), dtype=float)
    return np.atleast_1d(arr)


# ---------------------------------------------------------------------------
# Gaussian algebra on moment-form messages
# ---------------------------------------------------------------------------


def _add_scaled(var, scale, lam):
    if var.ndim == 1 and lam.ndim == 1:
        return var + scale * lam
    if var.ndim == 1:
        var = np.diag(var)
    if lam.ndim == 1:
        lam = np.diag(lam)
    return var + scale * lam


def _combine(m1, V1, m2, V2, node=None):
    """Product of two Gaussians in moment form; tolerates zero variances."""
    if V1.ndim != V2.ndim:
        V1 = np.diag(V1) if V1.ndim == 1 else V1
        V2 = np.diag(V2) if V2.ndim == 1 else V2
    S = V1 + V2
    if S.ndim == 1:
        if np.any(S <= 0.0):
            raise NumericalError(
                f"singular combined precision at node {node}")
        return (V2 * m1 + V1 * m2) / S, V1 * V2 / S
    if not np.all(np.isfinite(S)):
        raise NumericalError(f"non-finite variance at node {node}")
    try:
        cf = linalg.cho_factor(S, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError(
            f"singular combined precision at node {node}") from exc
    D = len(m1)
    sol = linalg.cho_solve(cf, np.column_stack([V2, m1, m2]),
                           check_finite=False)
    V = V1 @ sol[:, :D]
    V = 0.5 * (V + V.T)
    m = V2 @ sol[:, D] + V1 @ sol[:, D + 1]
    return m, V


# ---------------------------------------------------------------------------
# Prior density and sampling
# ---------------------------------------------------------------------------


def coalescent_log_prior(tree):
    """Log density of the event durations under the K-coalescent.

    The topology term is constant for fixed K and is left out.
    """
    K = tree.K
    if K < 2:
        raise InvalidTreeError("log prior needs at least 2 leaves")
    deltas = tree.durations
    if np.any(deltas <= 0.0):
        raise InvalidTreeError(f"non-positive durations {deltas}")
    n = K - np.arange(K - 1)
    rates = n * (n - 1) / 2.0
    return float(np.sum(np.log(rates) - rates * deltas))


def sample_coalescent(K, rng, min_duration=0.0):
    """Draw a tree from the K-coalescent.

    At each event a uniformly random pair of the ``n`` remaining lineages
    merges after an ``Exp(n choose 2)`` waiting time.  ``min_duration``
    shifts every waiting time, which is handy for building well-separated
    synthetic trees; the default gives the plain coalescent.
    """
    if K < 2:
        raise InvalidTreeError("sample_coalescent needs K >= 2")
    active = list(range(K))
    merges, times = [], []
    t = 0.0
    for n in range(K, 1, -1):
        t -= min_duration + rng.exponential(2.0 / (n * (n - 1)))
        i, j = sorted(rng.choice(n, size=2, replace=False))
        a, b = active[i], active[j]
        merges.append((a, b))
        times.append(t)
        del active[j], active[i]
        active.append(K + len(merges) - 1)
    return CoalescentTree.from_merges(K, merges, times)


# ---------------------------------------------------------------------------
# Belief propagation
# ---------------------------------------------------------------------------


def _leaf_list(tree, leaf_messages):
    if isinstance(leaf_messages, dict):
        msgs = [leaf_messages[k] for k in range(tree.K)]
    else:
        msgs = list(leaf_messages)
    if len(msgs) != tree.K:
        raise ValueError(
            f"expected {tree.K} leaf messages, got {len(msgs)}")
    return msgs


def bp_upward(tree, leaf_messages, lam):
    """Upward Gaussian messages at every node.

    Each internal node combines its two children's messages after
    diffusing them over their branches, ``v + (t_child - t_node) * lam``.

    Returns
    -------
    list of GaussianMessage
        Indexed by node id; leaf entries are the inputs.
    """
    lam = _lam_array(lam)
    msgs = _leaf_list(tree, leaf_messages)
    dims = {m.dim for m in msgs}
    if len(dims) != 1 or lam.shape[0] not in dims:
        raise ValueError(
            f"message dimensions {sorted(dims)} do not match kernel "
            f"dimension {lam.shape[0]}")
    up = msgs + [None] * (tree.n_nodes - tree.K)
    for node in tree.internal_ids:
        parts = []
        for c in tree.children[node]:
            parts.append((up[c].mean,
                          _add_scaled(up[c].var, tree.branch_length(c), lam)))
        (ml, Vl), (mr, Vr) = parts
        m, V = _combine(ml, Vl, mr, Vr, node=node)
        up[node] = GaussianMessage(m, V)
    return up


def _outside(tree, up, lam, root_prior):
    """Downward (everything-but-the-subtree) messages; None means flat."""
    out = [None] * tree.n_nodes
    if root_prior is not None:
        out[tree.root] = (root_prior.mean, root_prior.var)
    for node in reversed(tree.internal_ids):
        a, b = tree.children[node]
        for c, s in ((a, b), (b, a)):
            ms = up[s].mean
            Vs = _add_scaled(up[s].var, tree.branch_length(s), lam)
            if out[node] is None:
                m, V = ms, Vs
            else:
                m, V = _combine(out[node][0], out[node][1], ms, Vs, node=node)
            out[c] = (m, _add_scaled(V, tree.branch_length(c), lam))
    return out


def posterior_marginals(tree, leaf_messages, lam, root_prior=None):
    """Posterior Gaussian at every node given Gaussian leaf evidence.

    Parameters
    ----------
    tree : CoalescentTree
    leaf_messages : list or dict of GaussianMessage
        Gaussian evidence on each leaf value.
    lam : DiffusionKernel or array
        Brownian covariance per unit time.
    root_prior : GaussianMessage, optional
        Prior on the root value; ``None`` is an improper flat prior.

    Returns
    -------
    list of GaussianMessage
        Indexed by node id.
    """
    lam = _lam_array(lam)
    up = bp_upward(tree, leaf_messages, lam)
    out = _outside(tree, up, lam, root_prior)
    post = []
    for node in range(tree.n_nodes):
        if out[node] is None:
            post.append(up[node])
        else:
            m, V = _combine(out[node][0], out[node][1],
                            up[node].mean, up[node].var, node=node)
            post.append(GaussianMessage(m, V))
    return post


def cavity_messages(tree, leaf_messages, lam, root_prior=None):
    """Prior on each leaf implied by all other leaves and the root prior.

    Returns a list of GaussianMessage (or ``None`` when the cavity is flat,
    which only happens for a single-leaf tree with a flat root prior).
    """
    lam = _lam_array(lam)
    up = bp_upward(tree, leaf_messages, lam)
    out = _outside(tree, up, lam, root_prior)
    return [None if out[k] is None else GaussianMessage(*out[k])
            for k in range(tree.K)]


def likelihood_cavities(tree, lik_prec, lik_info, lam, root_mean, root_cov):
    """Leaf cavity priors from information-form leaf likelihoods.

    Unlike :func:`cavity_messages` the leaf evidence is given as precision
    ``J_k`` and information vector ``h_k``, which may be singular (a task
    with fewer examples than features, or none at all).  The root prior
    must be proper.

    Returns
    -------
    list of (mean, cov)
        Cavity Gaussian at each leaf, full covariance.
    """
    lam = _lam_array(lam)
    if lam.ndim == 1:
        lam = np.diag(lam)
    D = lam.shape[0]
    eye = np.eye(D)
    n = tree.n_nodes
    J = [np.zeros((D, D)) for _ in range(n)]
    h = [np.zeros(D) for _ in range(n)]
    for k in range(tree.K):
        J[k] = np.asarray(lik_prec[k], dtype=float)
        h[k] = np.asarray(lik_info[k], dtype=float)
    sent = {}
    for node in tree.internal_ids:
        for c in tree.children[node]:
            B = tree.branch_length(c) * lam
            M = eye + J[c] @ B
            try:
                Jp = np.linalg.solve(M, J[c])
                hp = np.linalg.solve(M, h[c])
            except np.linalg.LinAlgError as exc:
                raise NumericalError(
                    f"singular upward message at node {c}") from exc
            Jp = 0.5 * (Jp + Jp.T)
            sent[c] = (Jp, hp)
            J[node] = J[node] + Jp
            h[node] = h[node] + hp
    out = [None] * n
    out[tree.root] = (np.asarray(root_mean, dtype=float),
                      np.asarray(root_cov, dtype=float))
    for node in reversed(tree.internal_ids):
        a, b = tree.children[node]
        m, V = out[node]
        for c, s in ((a, b), (b, a)):
            m2, V2 = absorb_information(m, V, *sent[s])
            out[c] = (m2, V2 + tree.branch_length(c) * lam)
    return [out[k] for k in range(tree.K)]


def absorb_information(mean, cov, prec, info):
    """Multiply a moment-form Gaussian by an information-form factor."""
    M = np.eye(len(mean)) + cov @ prec
    try:
        V = np.linalg.solve(M, cov)
        m = np.linalg.solve(M, mean + cov @ info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular information update") from exc
    return m, 0.5 * (V + V.T)


# ---------------------------------------------------------------------------
# Greedy-Rate1
# ---------------------------------------------------------------------------


class _PairObjective:
    """Merge-time objective for one candidate pair.

    With ``s = -t`` the difference of the two messages at merge time ``t``
    has covariance ``V0 + s * B`` where ``B = 2 lam``.  A generalized
    eigendecomposition of ``(V0, B)`` makes every evaluation O(D).
    """

    def __init__(self, ma, ta, mb, tb, lam, disc_a=None, disc_b=None,
                 disc_kernel=None):
        d = ma.mean - mb.mean
        self.ta, self.tb = ta, tb
        if ma.is_diag and mb.is_diag and lam.ndim == 1:
            B = 2.0 * lam
            V0 = ma.var + mb.var + (ta + tb) * lam
            self.eig = V0 / B
            self.z2 = d * d / B
            self.logdet_B = float(np.sum(np.log(B)))
        else:
            L = np.diag(lam) if lam.ndim == 1 else lam
            B = 2.0 * L
            V0 = ma.full_var() + mb.full_var() + (ta + tb) * L
            V0 = 0.5 * (V0 + V0.T)
            try:
                w, U = linalg.eigh(V0, B)
            except linalg.LinAlgError:
                jitter = 1e-10 * max(np.trace(B) / len(B), 1e-300)
                B = B + jitter * np.eye(len(B))
                w, U = linalg.eigh(V0, B)
            self.eig = w
            self.z2 = (U.T @ d) ** 2
            sign, logdet = np.linalg.slogdet(B)
            self.logdet_B = float(logdet)
        self.D = len(d)
        self.disc = None
        if disc_kernel is not None and disc_a is not None:
            self.disc = (disc_a, disc_b, disc_kernel)

    def __call__(self, deltas, c):
        deltas = np.atleast_1d(deltas)
        s = c + deltas
        denom = self.eig[None, :] + s[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = -0.5 * (self.D * math.log(2.0 * math.pi) + self.logdet_B
                         + np.sum(np.log(denom), axis=1)
                         + np.sum(self.z2[None, :] / denom, axis=1))
        ll = np.where(np.all(denom > 0.0, axis=1), ll, -np.inf)
        if self.disc is not None:
            ll = ll + _discrete_merge_score(self.disc, self.ta, self.tb,
                                            -s)
        return ll - deltas

    def optimize(self, c):
        """Best duration after the current time ``-c`` and its score."""
        vals = self(_DELTA_GRID, c)
        i = int(np.nanargmax(vals))
        lo = 0.0 if i == 0 else _DELTA_GRID[i - 1]
        hi = _DELTA_GRID[min(i + 1, len(_DELTA_GRID) - 1)]
        f = lambda x: float(self(x, c)[0])
        x = _golden_max(f, lo, hi, tol=1e-8)
        x = max(x, _MIN_DELTA)
        fx = f(x)
        if fx < vals[i]:
            x, fx = float(_DELTA_GRID[i]), float(vals[i])
        return x, fx


def _golden_max(f, lo, hi, tol):
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
    return 0.5 * (a + b)


def _telegraph(msg, q, rate, branch):
    """Apply the discrete transition kernel over ``branch`` to a message.

    ``branch`` may be an array; the result then has a leading axis.
    """
    decay = np.exp(-rate * np.asarray(branch, dtype=float))[..., None]
    return decay * msg + (1.0 - decay) * float(q @ msg)


def _discrete_merge_score(disc, ta, tb, t_merge):
    msgs_a, msgs_b, kernel = disc
    total = 0.0
    for d, (qa, qb) in enumerate(zip(msgs_a, msgs_b)):
        q = kernel.q[d]
        rate = kernel.rates[d]
        ua = _telegraph(qa, q, rate, ta - t_merge)
        ub = _telegraph(qb, q, rate, tb - t_merge)
        joint = (ua * ub) @ q
        total = total + np.log(joint) - math.log(q @ qa) - math.log(q @ qb)
    return total


def _sooner(delta, score, best_delta, best_score):
    """Shorter duration wins; equal durations fall back to the higher score."""
    if abs(delta - best_delta) <= _TIE_TOL * max(1.0, best_delta):
        return score > best_score
    return delta < best_delta


def merge_objective(msg_a, t_a, msg_b, t_b, lam, t_now=0.0):
    """Optimal merge duration and objective for a single pair.

    Exposed for diagnostics and tests; :func:`greedy_rate1` applies the
    same computation to every active pair.
    """
    pair = _PairObjective(msg_a, t_a, msg_b, t_b, _lam_array(lam))
    return pair.optimize(-t_now)


def greedy_rate1(leaf_messages, lam, discrete=None):
    """Agglomerative coalescent tree construction (Greedy-Rate1).

    For every active pair the merge duration maximizing a rate-1
    exponential prior times the Gaussian agreement of the two messages is
    found by a grid search refined with golden sections.  The pair with the
    shortest optimal duration merges, its message is replaced by the
    combined upward message, and the process repeats.  Ties go to the
    lexicographically smallest pair of node ids.  Durations within a
    relative 1e-7 of each other count as tied and are ranked by the pair
    objective first; this matters when several pairs agree within their
    message variances and all want to merge immediately.

    Parameters
    ----------
    leaf_messages : list of GaussianMessage
    lam : DiffusionKernel or array
    discrete : tuple (leaf_discrete, kernel), optional
        Per-leaf lists of categorical likelihood vectors (one per discrete
        feature) and a kernel with attributes ``q`` and ``rates``.
    """
    lam = _lam_array(lam)
    msgs = list(leaf_messages)
    K = len(msgs)
    if K < 2:
        raise InvalidTreeError("greedy_rate1 needs at least 2 leaves")
    if len({m.dim for m in msgs}) != 1:
        raise ValueError("leaf messages have inconsistent dimensions")
    if lam.shape[0] != msgs[0].dim:
        raise ValueError(
            f"kernel dimension {lam.shape[0]} != message dimension "
            f"{msgs[0].dim}")
    disc_msgs, disc_kernel = (None, None)
    if discrete is not None:
        disc_msgs, disc_kernel = discrete
        disc_msgs = [list(map(np.asarray, dm)) for dm in disc_msgs]

    node_msg = {k: msgs[k] for k in range(K)}
    node_time = {k: 0.0 for k in range(K)}
    node_disc = {k: (disc_msgs[k] if disc_msgs is not None else None)
                 for k in range(K)}
    active = list(range(K))
    cache = {}
    merges, times = [], []
    t_now = 0.0
    while len(active) > 1:
        best = None
        for a, b in itertools.combinations(sorted(active), 2):
            pair = cache.get((a, b))
            if pair is None:
                pair = _PairObjective(node_msg[a], node_time[a],
                                      node_msg[b], node_time[b], lam,
                                      node_disc[a], node_disc[b], disc_kernel)
                cache[(a, b)] = pair
            delta, score = pair.optimize(-t_now)
            if best is None or _sooner(delta, score, best[0], best[1]):
                best = (delta, score, a, b)
        delta, _, a, b = best
        t_new = t_now - delta
        new = K + len(merges)
        ma = node_msg[a]
        mb = node_msg[b]
        m, V = _combine(ma.mean, _add_scaled(ma.var, node_time[a] - t_new, lam),
                        mb.mean, _add_scaled(mb.var, node_time[b] - t_new, lam),
                        node=new)
        node_msg[new] = GaussianMessage(m, V)
        node_time[new] = t_new
        if disc_kernel is not None:
            merged = []
            for d, (qa, qb) in enumerate(zip(node_disc[a], node_disc[b])):
                q, rate = disc_kernel.q[d], disc_kernel.rates[d]
                u = (_telegraph(qa, q, rate, node_time[a] - t_new)
                     * _telegraph(qb, q, rate, node_time[b] - t_new))
                merged.append(u / u.max())
            node_disc[new] = merged
        else:
            node_disc[new] = None
        merges.append((a, b))
        times.append(t_new)
        active = [x for x in active if x not in (a, b)] + [new]
        cache = {k: v for k, v in cache.items()
                 if a not in k and b not in k}
        t_now = t_new
    return CoalescentTree.from_merges(K, merges, times)


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def _min_leaf(tree, node):
    return min(tree.leaves_under(node))


def to_newick(tree, names=None):
    """Newick string with branch lengths; children ordered by smallest leaf."""

    def label(k):
        return str(k) if names is None else _quote(str(names[k]))

    def rec(node):
        if tree.is_leaf(node):
            s = label(node)
        else:
            kids = sorted(tree.children[node], key=lambda c: _min_leaf(tree, c))
            s = "(" + ",".join(rec(c) for c in kids) + ")"
        if node != tree.root:
            s += ":" + repr(float(tree.branch_length(node)))
        return s

    return rec(tree.root) + ";"


def _quote(name):
    if re.fullmatch(r"[A-Za-z0-9_.\-]+", name):
        return name
    return "'" + name.replace("'", "''") + "'"


_NEWICK_TOKEN = re.compile(r"\s*(\(|\)|,|:|;|'(?:[^']|'')*'|[^():,;\s]+)")


def from_newick(text, names=None):
    """Parse a rooted ultrametric binary Newick tree.

    Leaf labels must be task indices, or entries of ``names`` when given.
    Node times are recovered from root-to-leaf path lengths.
    """
    tokens = _NEWICK_TOKEN.findall(text.strip())
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take(expected=None):
        nonlocal pos
        tok = peek()
        if tok is None or (expected is not None and tok != expected):
            raise InvalidTreeError(
                f"Newick parse error at token {pos}: expected {expected!r}, "
                f"got {tok!r}")
        pos += 1
        return tok

    def node():
        if peek() == "(":
            take("(")
            kids = [node()]
            while peek() == ",":
                take(",")
                kids.append(node())
            take(")")
            item = {"children": kids, "label": None}
            if peek() not in (None, ":", ",", ")", ";"):
                take()
        else:
            item = {"children": [], "label": take()}
        item["length"] = 0.0
        if peek() == ":":
            take(":")
            item["length"] = float(take())
        return item

    root = node()
    take(";")
    index = None
    if names is not None:
        index = {str(n): i for i, n in enumerate(names)}
    leaves, internals = [], []

    def walk(item, depth):
        item["depth"] = depth
        if not item["children"]:
            lab = item["label"]
            if lab.startswith("'"):
                lab = lab[1:-1].replace("''", "'")
            try:
                item["k"] = index[lab] if index is not None else int(lab)
            except (KeyError, ValueError) as exc:
                raise InvalidTreeError(f"unknown leaf label {lab!r}") from exc
            leaves.append(item)
            return
        if len(item["children"]) != 2:
            raise InvalidTreeError("Newick tree is not binary")
        internals.append(item)
        for c in item["children"]:
            walk(c, depth + c["length"])

    walk(root, 0.0)
    K = len(leaves)
    if sorted(x["k"] for x in leaves) != list(range(K)):
        raise InvalidTreeError("leaf labels must be 0..K-1 exactly once")
    depths = np.array([x["depth"] for x in leaves])
    height = float(depths.mean())
    if np.max(np.abs(depths - height)) > 1e-6 * max(1.0, height):
        raise InvalidTreeError("Newick tree is not ultrametric")
    for item in internals:
        item["time"] = item["depth"] - height
    order = sorted(internals, key=lambda x: -x["time"])
    for i, item in enumerate(order):
        item["id"] = K + i
    for item in leaves:
        item["id"] = item["k"]
    merges = [tuple(c["id"] for c in item["children"]) for item in order]
    return CoalescentTree.from_merges(K, merges, [x["time"] for x in order])


def to_dot(tree, names=None):
    """Graphviz DOT rendering with node times as labels."""
    lines = ["digraph coalescent {", "  node [shape=box];"]
    for i in range(tree.n_nodes):
        if tree.is_leaf(i):
            name = str(i) if names is None else str(names[i])
            lab = f"{name} (t=0)"
        else:
            lab = f"t={tree.times[i]:.6g}"
        lab = lab.replace('"', '\\"')
        lines.append(f'  n{i} [label="{lab}"];')
    for i in tree.internal_ids:
        for c in sorted(tree.children[i], key=lambda c: _min_leaf(tree, c)):
            lines.append(
                f'  n{i} -> n{c} [label="{tree.branch_length(c):.6g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
