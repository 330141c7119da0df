"""Shared oracles for the test suite."""

import itertools

import numpy as np
import pytest

from coalmtl.coalescent import CoalescentTree


def dense_tree_posterior(tree, lam, leaf_prec, leaf_info, root_mean=None,
                         root_cov=None):
    """Exact Gaussian posterior over all node values by dense inversion.

    Every non-root node ``c`` with parent ``p`` contributes the factor
    ``N(x_c; x_p, b_c lam)``; leaf ``k`` contributes the information-form
    evidence ``(leaf_prec[k], leaf_info[k])``; the root gets
    ``N(root_mean, root_cov)`` or nothing when ``root_cov`` is None.

    Returns per-node (mean, cov).
    """
    lam = np.atleast_2d(np.diag(lam) if np.ndim(lam) == 1 else lam)
    D = lam.shape[0]
    n = tree.n_nodes
    J = np.zeros((n * D, n * D))
    h = np.zeros(n * D)

    def blk(i):
        return slice(i * D, (i + 1) * D)

    for c in range(n - 1):
        p = tree.parent[c]
        P = np.linalg.inv(tree.branch_length(c) * lam)
        J[blk(c), blk(c)] += P
        J[blk(p), blk(p)] += P
        J[blk(c), blk(p)] -= P
        J[blk(p), blk(c)] -= P
    for k in range(tree.K):
        J[blk(k), blk(k)] += leaf_prec[k]
        h[blk(k)] += leaf_info[k]
    if root_cov is not None:
        P0 = np.linalg.inv(root_cov)
        J[blk(tree.root), blk(tree.root)] += P0
        h[blk(tree.root)] += P0 @ root_mean
    cov = np.linalg.inv(J)
    mean = cov @ h
    return [(mean[blk(i)], cov[blk(i), blk(i)]) for i in range(n)]


def star_tree(K, depth=1.0, eps=1e-10):
    """Binary tree whose leaves all sit ``depth`` below an almost-star root.

    Internal nodes are a caterpillar at times ``-depth - i eps``.
    """
    merges = [(0, 1)] + [(k, K + k - 2) for k in range(2, K)]
    times = [-depth - i * eps for i in range(K - 1)]
    return CoalescentTree.from_merges(K, merges, times)


def all_ranked_trees(K, times):
    """Every ranked history for K leaves with the given event times."""
    def rec(active, merges):
        if len(active) == 1:
            yield list(merges)
            return
        new = K + len(merges)
        for a, b in itertools.combinations(sorted(active), 2):
            rest = [x for x in active if x not in (a, b)] + [new]
            yield from rec(rest, merges + [(a, b)])

    for merges in rec(list(range(K)), []):
        yield CoalescentTree.from_merges(K, merges, times)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
