"""Small helpers shared across modules."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def resolve_threads(threads=None):
    """Thread count from the argument, then ``COALMTL_THREADS``, then 1."""
    if threads is None:
        env = os.environ.get("COALMTL_THREADS", "").strip()
        threads = int(env) if env else 1
    return max(1, int(threads))


def parallel_map(fn, items, threads=1):
    """Ordered map; runs on a thread pool when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def heldout_split(n, fraction, rng, task=None):
    """Random (train, heldout) index split; no heldout for tiny tasks."""
    perm = rng.permutation(n)
    if n < 2:
        if n == 1:
            warnings.warn(f"task {task} too small to hold out data",
                          RuntimeWarning, stacklevel=2)
        return np.sort(perm), np.array([], dtype=int)
    n_held = min(max(1, int(round(fraction * n))), n - 1)
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def whitened_scatter(diff, cov, diagonal):
    """``cov^{-1/2} d d^T cov^{-1/2}``, or its diagonal ``d_j^2 / cov_jj``."""
    if diagonal:
        c = np.diag(cov) if np.ndim(cov) == 2 else np.asarray(cov)
        return np.diag(diff * diff / c)
    cov = np.diag(cov) if np.ndim(cov) == 1 else cov
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min() <= 0:
        raise np.linalg.LinAlgError("scatter normalizer is not positive definite")
    u = U @ ((U.T @ diff) / np.sqrt(w))
    return np.outer(u, u)
