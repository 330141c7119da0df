"""Corpora, preprocessing, baselines, metrics and experiment drivers.

Corpus files use a sparse line format::

    # kind=da
    # D=5
    task_id label idx:val idx:val ...

with 1-based feature indices and labels ``+1``/``-1`` (classification) or
real numbers (regression).  Reports are CSV with header
``method,task,size,seed,metric,value``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg
from scipy.stats import rankdata

from ._util import parallel_map
from .da_model import DaConfig, da_fit, parse_variant
from .errors import ConfigError, DataError
from .learners import TaskDataset, infer_task_kind, map_weights, predict_scores
from .mtl_model import MtlConfig, mtl_fit

CORPUS_KINDS = ("da", "mtl")
BASELINES = ("indp", "pool", "feda")
REPORT_HEADER = ("method", "task", "size", "seed", "metric", "value")
_DENSE_PCA_MAX_DIM = 2000


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------


@dataclass
class MultiTaskCorpus:
    """Tasks over one shared feature space."""

    tasks: list
    dim: int
    names: list = None
    kind: str = "da"

    def __post_init__(self):
        if not self.tasks:
            raise DataError("no tasks")
        if self.kind not in CORPUS_KINDS:
            raise DataError(f"corpus kind must be one of {CORPUS_KINDS}")
        if self.names is None:
            self.names = [str(k) for k in range(len(self.tasks))]
        if len(self.names) != len(self.tasks):
            raise DataError("one name per task is required")
        for k, t in enumerate(self.tasks):
            if t.dim != self.dim:
                raise DataError(
                    f"task {self.names[k]} has dimension {t.dim}, corpus has {self.dim}")

    @property
    def K(self):
        return len(self.tasks)

    @property
    def task_kind(self):
        labels = np.concatenate([t.y for t in self.tasks])
        return infer_task_kind(labels)

    def with_tasks(self, tasks, names=None):
        return MultiTaskCorpus(list(tasks), self.dim,
                               list(self.names if names is None else names),
                               self.kind)


def _parse_number(tok, lineno, what):
    try:
        return float(tok.replace("−", "-"))
    except ValueError:
        raise DataError(f"line {lineno}: bad {what} {tok!r}") from None


def _parse_header(line, header):
    body = line.lstrip("#").strip()
    if "=" not in body:
        return
    key, _, value = body.partition("=")
    key = key.strip().lower()
    if key in ("d", "kind"):
        header[key] = value.strip()


def load_corpus(path, format="sparse", kind=None):
    """Read a corpus in the sparse line format.

    ``# D=<int>`` and ``# kind=<da|mtl>`` comment headers are honoured;
    otherwise D is the largest feature index seen and the kind is taken
    from ``kind`` (default ``da``).  Tasks are numbered in order of first
    appearance.

    Raises
    ------
    DataError
        On malformed lines (with the line number), an empty corpus or
        indices beyond the declared D.
    """
    if format != "sparse":
        raise ConfigError(f"unsupported corpus format {format!r}")
    header = {}
    order, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                _parse_header(line, header)
                continue
            toks = line.split()
            if len(toks) < 2:
                raise DataError(f"line {lineno}: expected 'task label idx:val ...'")
            name = toks[0]
            label = _parse_number(toks[1], lineno, "label")
            feats = {}
            for tok in toks[2:]:
                idx, sep, val = tok.partition(":")
                if not sep:
                    raise DataError(f"line {lineno}: bad feature {tok!r}")
                try:
                    j = int(idx)
                except ValueError:
                    raise DataError(f"line {lineno}: bad feature index {idx!r}") from None
                if j < 1:
                    raise DataError(f"line {lineno}: feature indices are 1-based")
                if j in feats:
                    raise DataError(f"line {lineno}: feature {j} repeated")
                feats[j] = _parse_number(val, lineno, "feature value")
            order.setdefault(name, len(order))
            rows.append((lineno, order[name], label, feats))
    if not rows:
        raise DataError(f"{path}: no tasks")
    max_idx = max((max(f) for _, _, _, f in rows if f), default=0)
    if "d" in header:
        try:
            D = int(header["d"])
        except ValueError:
            raise DataError(f"{path}: bad D header {header['d']!r}") from None
        if max_idx > D:
            bad = next(n for n, _, _, f in rows if f and max(f) > D)
            raise DataError(f"line {bad}: feature index exceeds D={D}")
    else:
        D = max_idx
    if D < 1:
        raise DataError(f"{path}: no features")
    kind = header.get("kind", kind or "da").lower()
    names = sorted(order, key=order.get)
    per_task = [[] for _ in names]
    for row in rows:
        per_task[row[1]].append(row)
    tasks = []
    for k, task_rows in enumerate(per_task):
        data, ind, ptr, y = [], [], [0], []
        for _, _, label, feats in task_rows:
            for j in sorted(feats):
                ind.append(j - 1)
                data.append(feats[j])
            ptr.append(len(ind))
            y.append(label)
        X = sparse.csr_matrix((data, ind, ptr), shape=(len(task_rows), D))
        tasks.append(TaskDataset(X, np.array(y), k))
    return MultiTaskCorpus(tasks, D, names, kind)


def _format_label(y, classification):
    if classification:
        return "+1" if y > 0 else "-1"
    return repr(float(y))


def save_corpus(corpus, path):
    """Write ``corpus`` in the sparse line format (exact float round-trip)."""
    for name in corpus.names:
        if not name or any(c.isspace() for c in name) or name.startswith("#"):
            raise DataError(f"task name {name!r} cannot be written")
    classification = corpus.task_kind == "classification"
    out = io.StringIO()
    out.write(f"# kind={corpus.kind}\n# D={corpus.dim}\n")
    for name, t in zip(corpus.names, corpus.tasks):
        X = sparse.csr_matrix(t.X)
        X.sort_indices()
        for i in range(t.n):
            lo, hi = X.indptr[i], X.indptr[i + 1]
            feats = " ".join(f"{j + 1}:{float(v)!r}"
                             for j, v in zip(X.indices[lo:hi], X.data[lo:hi])
                             if v != 0.0)
            line = f"{name} {_format_label(t.y[i], classification)}"
            out.write(f"{line} {feats}\n" if feats else f"{line}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(out.getvalue())


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray
    variances: np.ndarray

    @property
    def dim(self):
        return self.components.shape[1]

    def transform(self, X):
        if sparse.issparse(X):
            return np.asarray(X @ self.components) - self.mean @ self.components
        return (np.asarray(X, dtype=float) - self.mean) @ self.components

    def inverse_transform(self, Z):
        return Z @ self.components.T + self.mean


def _pooled(tasks):
    if any(sparse.issparse(t.X) for t in tasks):
        return sparse.vstack([sparse.csr_matrix(t.X) for t in tasks]).tocsr()
    return np.vstack([t.X for t in tasks])


def _fix_signs(U):
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def fit_pca(tasks, target_dim):
    """Principal directions of the pooled, centered inputs of ``tasks``."""
    X = _pooled(tasks)
    n, D = X.shape
    if target_dim < 1 or target_dim > D:
        raise ConfigError(f"target dimension must lie in [1, {D}]")
    if n < 2:
        raise DataError("PCA needs at least two pooled examples")
    mean = np.asarray(X.mean(axis=0)).reshape(-1)
    if D <= _DENSE_PCA_MAX_DIM:
        Xc = (X.toarray() if sparse.issparse(X) else X) - mean
        evals, evecs = np.linalg.eigh(Xc.T @ Xc / (n - 1))
        evals, evecs = evals[::-1], evecs[:, ::-1]
    else:
        k = min(target_dim, min(n, D) - 1)
        op = splinalg.LinearOperator(
            (n, D), dtype=float,
            matvec=lambda v: X @ v - mean @ v,
            rmatvec=lambda u: X.T @ u - mean * u.sum())
        _, s, vt = splinalg.svds(op, k=k, random_state=0)
        order = np.argsort(s)[::-1]
        evals, evecs = s[order] ** 2 / (n - 1), vt[order].T
    tol = max(D, n) * np.finfo(float).eps * max(evals[0], 0.0)
    rank = int(np.sum(evals > tol))
    keep = target_dim
    if target_dim > rank:
        warnings.warn(f"pooled data has rank {rank}; keeping {rank} of "
                      f"{target_dim} components", RuntimeWarning, stacklevel=2)
        keep = max(rank, 1)
    U = _fix_signs(evecs[:, :keep])
    return PcaProjection(mean, U, np.clip(evals[:keep], 0.0, None))


def apply_projection(corpus, proj):
    tasks = [TaskDataset(proj.transform(t.X), t.y, t.task) for t in corpus.tasks]
    return MultiTaskCorpus(tasks, proj.dim, list(corpus.names), corpus.kind)


def pca_project(corpus, target_dim):
    """Project every task onto the top principal directions of the pooled data.

    Returns the projected corpus and the :class:`PcaProjection` (whose
    ``components`` are orthonormal columns); apply the same projection to
    test data with :func:`apply_projection`.
    """
    proj = fit_pca(corpus.tasks, target_dim)
    return apply_projection(corpus, proj), proj


# ---------------------------------------------------------------------------
# Baselines and fitted predictors
# ---------------------------------------------------------------------------


@dataclass
class LinearModel:
    """Per-task linear weights; the common interface for every method."""

    method: str
    weights: np.ndarray
    task_kind: str
    heldout_trace: list = field(default_factory=list)
    state: object = None

    @property
    def K(self):
        return self.weights.shape[0]

    def predict(self, k, X):
        return predict_scores(self.weights[k], X, self.task_kind)


def _config(config):
    return DaConfig() if config is None else config


def _kind(corpus, config):
    return getattr(config, "task_kind", None) or corpus.task_kind


def baseline_indp(corpus, config=None):
    """Independent MAP weights per task under ``N(0, sigma2 I)``."""
    config = _config(config)
    kind = _kind(corpus, config)
    prior = np.full(corpus.dim, config.sigma2)
    W = parallel_map(
        lambda t: map_weights(t, np.zeros(corpus.dim), prior, config.rho2, kind),
        corpus.tasks, getattr(config, "threads", 1))
    return LinearModel("indp", np.array(W), kind)


def _stack(tasks):
    X = _pooled(tasks)
    return TaskDataset(X, np.concatenate([t.y for t in tasks]))


def baseline_pool(corpus, config=None):
    """One MAP weight vector on the concatenated data of all tasks."""
    config = _config(config)
    kind = _kind(corpus, config)
    w = map_weights(_stack(corpus.tasks), np.zeros(corpus.dim),
                    np.full(corpus.dim, config.sigma2), config.rho2, kind)
    return LinearModel("pool", np.tile(w, (corpus.K, 1)), kind)


def augment_features(X, k, K):
    """Map task-``k`` inputs to ``[x, 0, ..., x (block k+1), ..., 0]``."""
    n, D = X.shape
    if sparse.issparse(X):
        X = sparse.csr_matrix(X)
        blocks = [X] + [X if j == k else sparse.csr_matrix((n, D))
                        for j in range(K)]
        return sparse.hstack(blocks).tocsr()
    X = np.asarray(X, dtype=float)
    out = np.zeros((n, (K + 1) * D))
    out[:, :D] = X
    out[:, (k + 1) * D:(k + 2) * D] = X
    return out


def baseline_feda(corpus, config=None, shared_var=None, task_var=None):
    """Feature augmentation: a shared block plus one block per task.

    ``shared_var`` and ``task_var`` are the prior variances of the shared
    and task-specific blocks (default ``sigma2`` for both).  A variance of
    0 pins that block at zero, so ``task_var=0`` reproduces ``pool``.
    """
    config = _config(config)
    kind = _kind(corpus, config)
    K, D = corpus.K, corpus.dim
    shared_var = config.sigma2 if shared_var is None else float(shared_var)
    task_var = config.sigma2 if task_var is None else float(task_var)
    if shared_var < 0 or task_var < 0:
        raise ConfigError("block prior variances must be non-negative")
    var = np.concatenate([np.full(D, shared_var), np.full(K * D, task_var)])
    free = var > 0
    if not np.any(free):
        return LinearModel("feda", np.zeros((K, D)), kind)
    aug = [TaskDataset(augment_features(t.X, k, K)[:, free], t.y, k)
           for k, t in enumerate(corpus.tasks)]
    v = np.zeros((K + 1) * D)
    v[free] = map_weights(_stack(aug), np.zeros(int(free.sum())), var[free],
                          config.rho2, kind)
    blocks = v.reshape(K + 1, D)
    return LinearModel("feda", blocks[0] + blocks[1:], kind)


def method_names():
    return BASELINES + tuple(f"coal-{v}" for v in
                             ("full", "diag", "full+x", "diag+x", "data"))


def fit_method(method, corpus, config=None):
    """Fit ``indp``, ``pool``, ``feda`` or ``coal-<variant>`` on ``corpus``.

    ``coal-*`` runs the domain-adaptation model on ``da`` corpora and the
    multitask model on ``mtl`` corpora (where only ``full``/``diag``
    exist).  ``config`` supplies sigma2, rho2, iterations, heldout
    fraction, seed and threads.
    """
    config = _config(config)
    if method == "indp":
        return baseline_indp(corpus, config)
    if method == "pool":
        return baseline_pool(corpus, config)
    if method == "feda":
        return baseline_feda(corpus, config)
    if not method.startswith("coal-"):
        raise ConfigError(f"unknown method {method!r}; choose from {method_names()}")
    variant = parse_variant(method[len("coal-"):])
    common = dict(sigma2=config.sigma2, rho2=config.rho2,
                  max_iter=config.max_iter,
                  heldout_fraction=config.heldout_fraction, seed=config.seed,
                  task_kind=config.task_kind, threads=config.threads)
    if corpus.kind == "mtl":
        state = mtl_fit(corpus.tasks, MtlConfig(variant=variant, **common))
        W = state.weights
    else:
        da_cfg = DaConfig(variant=variant,
                          discrete_features=getattr(config, "discrete_features", ()),
                          discrete_rate=getattr(config, "discrete_rate", 1.0),
                          **common)
        state = da_fit(corpus.tasks, da_cfg)
        W = state.weights
    return LinearModel(method, np.array(W), state.task_kind,
                       list(state.heldout_trace), state)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _pair(a, b):
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ValueError("metrics need at least one example")
    return a, b


def metric_accuracy(preds, labels):
    """Fraction of predicted labels equal to the true labels."""
    p, y = _pair(preds, labels)
    return float(np.mean(p == y))


def metric_auc(scores, labels):
    """Probability a positive scores above a negative, ties counting 1/2."""
    s, y = _pair(scores, labels)
    pos = y > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metric_r2(preds, targets):
    """Coefficient of determination, clipped to [0, 1]."""
    p, y = _pair(preds, targets)
    ss = np.sum((y - y.mean()) ** 2)
    if ss == 0.0:
        return 1.0 if np.allclose(p, y) else 0.0
    return float(np.clip(1.0 - np.sum((y - p) ** 2) / ss, 0.0, 1.0))


def default_metric(task_kind):
    return "accuracy" if task_kind == "classification" else "r2"


def evaluate(model, k, data, metric):
    scores = model.predict(k, data.X)
    if metric == "accuracy":
        if model.task_kind != "classification":
            raise ConfigError("accuracy needs a classification model")
        return metric_accuracy(np.where(scores >= 0.5, 1.0, -1.0), data.y)
    if metric == "auc":
        return metric_auc(scores, data.y)
    if metric == "r2":
        return metric_r2(scores, data.y)
    raise ConfigError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# Scrambling
# ---------------------------------------------------------------------------


def scramble_task(corpus, k, p, rng, name=None):
    """Append a copy of task ``k`` with ``ceil(p D)`` columns permuted.

    The chosen columns are shuffled among themselves (a derangement is not
    required), so per-column statistics of the copy are a permutation of
    the original's.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError("scramble fraction must lie in [0, 1]")
    src = corpus.tasks[k]
    D = corpus.dim
    n_cols = math.ceil(p * D - 1e-12)
    cols = np.sort(rng.choice(D, size=n_cols, replace=False))
    perm = np.arange(D)
    perm[cols] = cols[rng.permutation(n_cols)]
    X = src.X[:, perm]
    new = TaskDataset(X, src.y.copy(), corpus.K)
    names = list(corpus.names) + [name or f"{corpus.names[k]}~{p:g}"]
    return corpus.with_tasks(list(corpus.tasks) + [new], names)


# ---------------------------------------------------------------------------
# Reports and drivers
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Metric rows plus the splits and heldout traces that produced them."""

    rows: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)

    def add(self, method, task, size, seed, metric, value):
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"metric {metric} out of [0, 1]: {value}")
        self.rows.append((method, str(task), size, int(seed), metric, value))

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for method, task, size, seed, metric, value in self.rows:
            writer.writerow([method, task, size, seed, metric, repr(value)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    def sidecar(self):
        return {"splits": self.splits, "traces": self.traces}

    def write_sidecar(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.sidecar(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def mean(self, method, task="macro", size=None, metric=None):
        vals = [r[5] for r in self.rows
                if r[0] == method and r[1] == str(task)
                and (size is None or r[2] == size)
                and (metric is None or r[4] == metric)]
        if not vals:
            raise KeyError((method, task, size))
        return float(np.mean(vals))


def split_task(n, test_fraction, seed):
    """Seeded (train, test) index split that depends only on ``n`` and seed.

    Tasks of equal size share a split, so a task and its copy are
    evaluated identically.
    """
    rng = np.random.default_rng([int(seed), int(n)])
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    if n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    else:
        n_test = 0
    return perm[n_test:], np.sort(perm[:n_test])


def _split_corpus(corpus, test_fraction, seed, test_corpus=None):
    if test_corpus is not None:
        if test_corpus.K != corpus.K or test_corpus.dim != corpus.dim:
            raise DataError("test corpus must match the training corpus")
        return ([np.arange(t.n) for t in corpus.tasks], corpus, test_corpus,
                None)
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test fraction must lie in (0, 1)")
    train_idx, test_idx = [], []
    for t in corpus.tasks:
        tr, te = split_task(t.n, test_fraction, seed)
        train_idx.append(tr)
        test_idx.append(te)
    test = corpus.with_tasks([t.subset(te) for t, te in
                              zip(corpus.tasks, test_idx)])
    return train_idx, corpus, test, test_idx


def _subsample(corpus, order, sizes):
    tasks = []
    for t, idx, m in zip(corpus.tasks, order, sizes):
        if m > len(idx):
            raise ConfigError(
                f"size {m} exceeds the {len(idx)} training examples of task {t.task}")
        tasks.append(t.subset(np.sort(idx[:m])))
    return corpus.with_tasks(tasks)


def _with_seed(config, seed):
    return replace(config, seed=int(seed))


def _prepare(train, test, pca_dim):
    if not pca_dim:
        return train, test
    proj = fit_pca(train.tasks, min(pca_dim, train.dim))
    return apply_projection(train, proj), apply_projection(test, proj)


def _cell(job):
    method, train, test, config, metric, task_ids = job
    model = fit_method(method, train, config)
    scores = {k: evaluate(model, k, test.tasks[k], metric) for k in task_ids}
    return scores, model.heldout_trace


def _run_cells(jobs, threads):
    # Cells run one per worker; the models themselves stay single-threaded.
    return parallel_map(_cell, jobs, threads)


def learning_curve(corpus, methods, sizes, seeds=(0,), config=None,
                   test_fraction=0.3, test_corpus=None, metric=None,
                   pca_dim=None, threads=1):
    """Metric per method as the per-task training size grows.

    For every seed each task is split once into train and test; training
    sets for increasing sizes are nested prefixes of one seeded
    permutation of the train indices.  ``size=None`` entries use all
    training data.  Rows are emitted in (size, method, seed) order,
    per task then ``macro``.
    """
    config = _config(config)
    metric = metric or default_metric(corpus.task_kind)
    report = EvalReport()
    jobs, keys = [], []
    for seed in seeds:
        train_idx, base, test, test_idx = _split_corpus(
            corpus, test_fraction, seed, test_corpus)
        rng = np.random.default_rng([int(seed), 1])
        order = [idx[rng.permutation(len(idx))] for idx in train_idx]
        report.splits[str(seed)] = {
            "test": None if test_idx is None else [i.tolist() for i in test_idx],
            "train_order": [o.tolist() for o in order]}
        for size in sizes:
            m = [len(o) if size is None else int(size) for o in order]
            train = _subsample(base, order, m)
            tr, te = _prepare(train, test, pca_dim)
            for method in methods:
                jobs.append((method, tr, te, _with_seed(config, seed), metric,
                             range(corpus.K)))
                keys.append((size, method, seed))
    results = _run_cells(jobs, threads)
    table = dict(zip(keys, results))
    for size in sizes:
        for method in methods:
            for seed in seeds:
                scores, trace = table[(size, method, seed)]
                label = "all" if size is None else size
                for k in range(corpus.K):
                    report.add(method, corpus.names[k], label, seed, metric,
                               scores[k])
                report.add(method, "macro", label, seed, metric,
                           np.mean(list(scores.values())))
                report.traces[f"{method}/{label}/{seed}"] = trace
    return report


def target_transfer(corpus, target, source_size, target_sizes, methods,
                    seeds=(0,), config=None, test_fraction=0.3,
                    test_corpus=None, metric=None, pca_dim=None, threads=1):
    """Target-task metric with sources fixed at ``source_size`` examples.

    ``source_size=None`` keeps all source training data.  Each target size
    is a nested prefix of a seeded permutation of the target's training
    data; size 0 leaves the target with no data, so tree methods predict
    from the prior their leaf position implies.
    """
    config = _config(config)
    if not 0 <= target < corpus.K:
        raise ConfigError(f"target task {target} out of range")
    metric = metric or default_metric(corpus.task_kind)
    report = EvalReport()
    jobs, keys = [], []
    for seed in seeds:
        train_idx, base, test, test_idx = _split_corpus(
            corpus, test_fraction, seed, test_corpus)
        rng = np.random.default_rng([int(seed), 2])
        order = [idx[rng.permutation(len(idx))] for idx in train_idx]
        report.splits[str(seed)] = {
            "test": None if test_idx is None else [i.tolist() for i in test_idx],
            "train_order": [o.tolist() for o in order]}
        for size in target_sizes:
            m = [len(o) if source_size is None else int(source_size)
                 for o in order]
            m[target] = int(size)
            train = _subsample(base, order, m)
            tr, te = _prepare(train, test, pca_dim)
            for method in methods:
                jobs.append((method, tr, te, _with_seed(config, seed), metric,
                             (target,)))
                keys.append((size, method, seed))
    results = _run_cells(jobs, threads)
    table = dict(zip(keys, results))
    for size in target_sizes:
        for method in methods:
            for seed in seeds:
                scores, trace = table[(size, method, seed)]
                report.add(method, corpus.names[target], int(size), seed,
                           metric, scores[target])
                report.traces[f"{method}/{size}/{seed}"] = trace
    return report


def scramble_sweep(corpus, task, fractions, methods, seeds=(0,), config=None,
                   test_fraction=0.3, metric=None, pca_dim=None, threads=1):
    """Metric on the original tasks as a scrambled copy of ``task`` is added.

    For each fraction ``p`` a copy of ``task`` with ``ceil(p D)`` permuted
    columns joins the corpus; rows report the original tasks (and their
    ``macro``), with ``p`` in the ``size`` column.
    """
    config = _config(config)
    metric = metric or default_metric(corpus.task_kind)
    report = EvalReport()
    jobs, keys = [], []
    originals = range(corpus.K)
    for seed in seeds:
        for p in fractions:
            rng = np.random.default_rng([int(seed), 3, int(round(p * 1e6))])
            scrambled = scramble_task(corpus, task, p, rng)
            train_idx, base, test, test_idx = _split_corpus(
                scrambled, test_fraction, seed)
            train = base.with_tasks([t.subset(np.sort(tr)) for t, tr in
                                     zip(base.tasks, train_idx)])
            report.splits[f"{seed}/{p:g}"] = {
                "test": [i.tolist() for i in test_idx]}
            tr, te = _prepare(train, test, pca_dim)
            for method in methods:
                jobs.append((method, tr, te, _with_seed(config, seed), metric,
                             originals))
                keys.append((p, method, seed))
    results = _run_cells(jobs, threads)
    table = dict(zip(keys, results))
    for p in fractions:
        for method in methods:
            for seed in seeds:
                scores, trace = table[(p, method, seed)]
                for k in originals:
                    report.add(method, corpus.names[k], p, seed, metric,
                               scores[k])
                report.add(method, "macro", p, seed, metric,
                           np.mean([scores[k] for k in originals]))
                report.traces[f"{method}/{p:g}/{seed}"] = trace
    return report
