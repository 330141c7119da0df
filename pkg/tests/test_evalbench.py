import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from coalmtl.da_model import DaConfig
from coalmtl.diffusion import sample_da_instance
from coalmtl.errors import ConfigError, DataError
from coalmtl.evalbench import (EvalReport, MultiTaskCorpus, augment_features,
                               baseline_feda, baseline_indp, baseline_pool,
                               evaluate, fit_method, fit_pca, learning_curve,
                               load_corpus, metric_accuracy, metric_auc,
                               metric_r2, pca_project, save_corpus,
                               scramble_sweep, scramble_task, split_task,
                               target_transfer)
from coalmtl.learners import TaskDataset


def write(tmp_path, text, name="corpus.txt"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def da_corpus(seed, K=3, D=4, N=40, task="classification", **kw):
    inst = sample_da_instance(K, D, N, 1.0, 0.5, task,
                              np.random.default_rng(seed), **kw)
    return MultiTaskCorpus(inst.tasks, D, [f"t{k}" for k in range(K)]), inst


def ridge(X, y, var, rho2):
    return np.linalg.solve(X.T @ X / rho2 + np.eye(X.shape[1]) / var,
                           X.T @ y / rho2)


class TestLoadCorpus:
    def test_two_line_file(self, tmp_path):
        corpus = load_corpus(write(tmp_path, "0 +1 1:1.0\n1 -1 2:0.5\n"))
        assert corpus.K == 2 and corpus.dim == 2
        np.testing.assert_array_equal(corpus.tasks[0].dense_X(), [[1.0, 0.0]])
        np.testing.assert_array_equal(corpus.tasks[1].dense_X(), [[0.0, 0.5]])
        np.testing.assert_array_equal(corpus.tasks[1].y, [-1.0])
        assert corpus.names == ["0", "1"]
        assert corpus.task_kind == "classification"

    def test_unicode_minus(self, tmp_path):
        corpus = load_corpus(write(tmp_path, "0 +1 1:1.0\n1 −1 2:0.5\n"))
        np.testing.assert_array_equal(corpus.tasks[1].y, [-1.0])

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError, match="no tasks"):
            load_corpus(write(tmp_path, "# only a comment\n\n"))

    @pytest.mark.parametrize("line,lineno", [("0 +1 1:1.0\nbad\n", 2),
                                             ("0 +1 x:1\n", 1),
                                             ("0 +1 0:1\n", 1),
                                             ("# c\n0 +1 1:1 1:2\n", 2),
                                             ("0 +1 1:abc\n", 1),
                                             ("0 +1 11\n", 1)])
    def test_malformed_line_numbers(self, tmp_path, line, lineno):
        with pytest.raises(DataError, match=f"line {lineno}"):
            load_corpus(write(tmp_path, line))

    def test_declared_dimension(self, tmp_path):
        corpus = load_corpus(write(tmp_path, "# D=5\n# kind=mtl\na 0.5 2:1\n"))
        assert corpus.dim == 5 and corpus.kind == "mtl"
        assert corpus.task_kind == "regression"
        with pytest.raises(DataError, match="line 2"):
            load_corpus(write(tmp_path, "# D=1\na 1 2:1\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_corpus(tmp_path / "nope.txt")

    def test_round_trip(self, tmp_path):
        corpus, _ = da_corpus(0, task="regression")
        path = tmp_path / "c.txt"
        save_corpus(corpus, path)
        back = load_corpus(path)
        assert back.names == corpus.names and back.dim == corpus.dim
        for a, b in zip(corpus.tasks, back.tasks):
            np.testing.assert_array_equal(a.dense_X(), b.dense_X())
            np.testing.assert_array_equal(a.y, b.y)
        save_corpus(back, tmp_path / "d.txt")
        assert (tmp_path / "d.txt").read_bytes() == path.read_bytes()

    def test_inconsistent_dimension(self):
        with pytest.raises(DataError):
            MultiTaskCorpus([TaskDataset(np.zeros((1, 2)), [1.0]),
                             TaskDataset(np.zeros((1, 3)), [1.0])], 2)


class TestPca:
    def test_full_dimension_is_rotation(self, rng):
        X = rng.normal(size=(30, 4))
        corpus = MultiTaskCorpus([TaskDataset(X, np.zeros(30))], 4)
        proj_corpus, proj = pca_project(corpus, 4)
        np.testing.assert_allclose(proj.components.T @ proj.components,
                                   np.eye(4), atol=1e-12)
        back = proj.inverse_transform(proj_corpus.tasks[0].X)
        np.testing.assert_allclose(back, X, atol=1e-12)

    def test_exact_subspace(self, rng):
        basis = np.linalg.qr(rng.normal(size=(6, 2)))[0]
        X = rng.normal(size=(50, 2)) @ basis.T + 3.0
        tasks = [TaskDataset(X[:25], np.zeros(25)), TaskDataset(X[25:], np.zeros(25))]
        proj = fit_pca(tasks, 2)
        err = np.abs(proj.inverse_transform(proj.transform(X)) - X).max()
        assert err <= 1e-10

    def test_variances_sorted_against_eigensolver(self, rng):
        X = rng.normal(size=(80, 5)) * np.array([5.0, 1.0, 3.0, 0.5, 2.0])
        proj = fit_pca([TaskDataset(X, np.zeros(80))], 5)
        assert np.all(np.diff(proj.variances) <= 0)
        oracle = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1]
        np.testing.assert_allclose(proj.variances, oracle, rtol=1e-10)
        Z = proj.transform(X)
        np.testing.assert_allclose(Z.var(axis=0, ddof=1), oracle, rtol=1e-10)

    def test_sparse_matches_dense(self, rng):
        X = sparse.random(40, 8, density=0.3, random_state=1, format="csr")
        a = fit_pca([TaskDataset(X, np.zeros(40))], 3)
        b = fit_pca([TaskDataset(X.toarray(), np.zeros(40))], 3)
        np.testing.assert_allclose(a.components, b.components, atol=1e-10)
        np.testing.assert_allclose(a.transform(X), b.transform(X.toarray()),
                                   atol=1e-10)

    def test_rank_deficient_warns(self, rng):
        X = np.outer(rng.normal(size=20), [1.0, 2.0, 3.0])
        with pytest.warns(RuntimeWarning, match="rank 1"):
            proj = fit_pca([TaskDataset(X, np.zeros(20))], 3)
        assert proj.dim == 1

    def test_bad_target(self, rng):
        with pytest.raises(ConfigError):
            fit_pca([TaskDataset(rng.normal(size=(5, 2)), np.zeros(5))], 3)


class TestBaselines:
    def test_pool_predicts_identically(self):
        corpus, _ = da_corpus(1)
        model = baseline_pool(corpus)
        x = np.ones((1, corpus.dim))
        preds = [model.predict(k, x)[0] for k in range(corpus.K)]
        assert len(set(preds)) == 1

    def test_pool_equals_indp_for_single_task(self):
        corpus, _ = da_corpus(2)
        single = corpus.with_tasks(corpus.tasks[:1], ["a"])
        np.testing.assert_allclose(baseline_pool(single).weights,
                                   baseline_indp(single).weights, rtol=1e-10)

    def test_pool_on_identical_tasks_is_doubled_ridge(self):
        corpus, _ = da_corpus(3, task="regression")
        t = corpus.tasks[0]
        twin = corpus.with_tasks([t, t], ["a", "b"])
        cfg = DaConfig(sigma2=0.7, rho2=0.4)
        X2, y2 = np.vstack([t.X, t.X]), np.concatenate([t.y, t.y])
        np.testing.assert_allclose(baseline_pool(twin, cfg).weights[0],
                                   ridge(X2, y2, 0.7, 0.4), rtol=1e-8)

    def test_indp_matches_ridge_and_zero_data(self):
        corpus, _ = da_corpus(4, task="regression")
        cfg = DaConfig(sigma2=2.0, rho2=0.5)
        model = baseline_indp(corpus, cfg)
        for t, w in zip(corpus.tasks, model.weights):
            np.testing.assert_allclose(w, ridge(t.X, t.y, 2.0, 0.5), rtol=1e-8)
        empty = corpus.with_tasks([TaskDataset(np.zeros((0, 4)), [])] * 2 +
                                  corpus.tasks[:1], ["a", "b", "c"])
        np.testing.assert_array_equal(baseline_indp(empty, cfg).weights[:2], 0.0)

    def test_augment(self):
        X = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(augment_features(X, 1, 3),
                                      [[1, 2, 0, 0, 1, 2, 0, 0]])
        assert augment_features(np.zeros((2, 3)), 0, 4).shape == (2, 15)
        np.testing.assert_array_equal(augment_features(np.zeros((1, 2)), 0, 2), 0)
        Xs = sparse.csr_matrix(X)
        np.testing.assert_array_equal(augment_features(Xs, 1, 3).toarray(),
                                      augment_features(X, 1, 3))

    def test_feda_single_task_is_double_variance_ridge(self):
        corpus, _ = da_corpus(5, task="regression")
        single = corpus.with_tasks(corpus.tasks[:1], ["a"])
        cfg = DaConfig(sigma2=0.8, rho2=0.3)
        t = single.tasks[0]
        np.testing.assert_allclose(baseline_feda(single, cfg).weights[0],
                                   ridge(t.X, t.y, 1.6, 0.3), rtol=1e-7)

    def test_feda_with_pinned_task_blocks_is_pool(self):
        corpus, _ = da_corpus(6)
        np.testing.assert_allclose(baseline_feda(corpus, task_var=0.0).weights,
                                   baseline_pool(corpus).weights, rtol=1e-10)

    def test_fit_method_dispatch(self):
        corpus, _ = da_corpus(7, N=20)
        cfg = DaConfig(max_iter=1)
        assert fit_method("coal-diag", corpus, cfg).state.config.variant == "diag"
        with pytest.raises(ConfigError):
            fit_method("svm", corpus, cfg)
        mtl = MultiTaskCorpus(corpus.tasks, corpus.dim, kind="mtl")
        model = fit_method("coal-full", mtl, cfg)
        assert type(model.state).__name__ == "MtlModelState"


def auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y > 0]
    neg = [s for s, y in zip(scores, labels) if y <= 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0
                for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


class TestMetrics:
    def test_auc_examples(self):
        assert metric_auc([0.1, 0.2, 0.8, 0.9], [-1, -1, 1, 1]) == 1.0
        assert metric_auc([0.3] * 4, [-1, 1, -1, 1]) == 0.5
        with pytest.raises(ValueError):
            metric_auc([0.1, 0.2], [1, 1])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2,
                    max_size=25))
    def test_auc_matches_pairwise_count(self, pairs):
        scores = [float(s) for s, _ in pairs]
        labels = [1 if b else -1 for _, b in pairs]
        if len(set(labels)) < 2:
            return
        assert metric_auc(scores, labels) == pytest.approx(
            auc_oracle(scores, labels), abs=1e-12)
        transformed = np.exp(np.asarray(scores)) * 3 - 7
        assert metric_auc(transformed, labels) == pytest.approx(
            metric_auc(scores, labels), abs=1e-12)

    def test_accuracy_and_r2(self):
        assert metric_accuracy([1, -1, 1, 1], [1, 1, 1, 1]) == 0.75
        assert metric_r2([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
        assert metric_r2([10.0, -10.0, 5.0], [1.0, 2.0, 3.0]) == 0.0
        with pytest.raises(ValueError):
            metric_accuracy([1], [1, 1])

    def test_evaluate_metric_checks(self):
        corpus, _ = da_corpus(8, task="regression")
        model = baseline_indp(corpus)
        with pytest.raises(ConfigError):
            evaluate(model, 0, corpus.tasks[0], "accuracy")
        with pytest.raises(ConfigError):
            evaluate(model, 0, corpus.tasks[0], "f1")


class TestScramble:
    def test_zero_fraction_copies(self):
        corpus, _ = da_corpus(9)
        out = scramble_task(corpus, 1, 0.0, np.random.default_rng(0))
        assert out.K == 4 and out.names[-1] == "t1~0"
        np.testing.assert_array_equal(out.tasks[3].X, corpus.tasks[1].X)
        np.testing.assert_array_equal(out.tasks[3].y, corpus.tasks[1].y)

    def test_full_fraction_permutes_all_columns(self, rng):
        corpus, _ = da_corpus(10, D=6)
        out = scramble_task(corpus, 0, 1.0, rng)
        X, Y = corpus.tasks[0].X, out.tasks[-1].X
        matches = [[np.array_equal(X[:, i], Y[:, j]) for j in range(6)]
                   for i in range(6)]
        assert all(sum(row) == 1 for row in matches)

    @pytest.mark.parametrize("p,count", [(0.25, 2), (0.5, 3), (0.1, 1)])
    def test_column_statistics_are_permuted(self, p, count):
        corpus, _ = da_corpus(11, D=6)
        rng = np.random.default_rng(3)
        out = scramble_task(corpus, 2, p, rng)
        X, Y = corpus.tasks[2].X, out.tasks[-1].X
        np.testing.assert_allclose(np.sort(Y.mean(axis=0)),
                                   np.sort(X.mean(axis=0)), rtol=1e-14)
        np.testing.assert_allclose(np.sort(Y.var(axis=0)),
                                   np.sort(X.var(axis=0)), rtol=1e-14)
        for j in range(6):
            assert any(np.array_equal(Y[:, j], X[:, i]) for i in range(6))
        moved = np.sum([not np.array_equal(X[:, j], Y[:, j]) for j in range(6)])
        assert moved <= count

    def test_bad_fraction(self, rng):
        corpus, _ = da_corpus(12)
        with pytest.raises(ConfigError):
            scramble_task(corpus, 0, 1.5, rng)


class TestReport:
    def test_rows_and_csv(self, tmp_path):
        report = EvalReport()
        report.add("indp", "a", 10, 0, "accuracy", 0.5)
        report.add("indp", "macro", 10, 0, "accuracy", 0.25)
        assert report.to_csv() == ("method,task,size,seed,metric,value\n"
                                   "indp,a,10,0,accuracy,0.5\n"
                                   "indp,macro,10,0,accuracy,0.25\n")
        assert report.mean("indp") == 0.25
        with pytest.raises(ValueError):
            report.add("indp", "a", 10, 0, "accuracy", 1.5)
        report.write_sidecar(tmp_path / "s.json")
        assert (tmp_path / "s.json").read_text().startswith("{")

    def test_split_task(self):
        tr, te = split_task(10, 0.3, 4)
        assert len(te) == 3 and sorted(np.concatenate([tr, te])) == list(range(10))
        tr2, te2 = split_task(10, 0.3, 4)
        np.testing.assert_array_equal(te, te2)
        assert len(split_task(1, 0.3, 0)[1]) == 0


class TestDrivers:
    def test_learning_curve_shape_and_determinism(self):
        corpus, _ = da_corpus(13, N=30)
        kw = dict(methods=["indp", "pool", "coal-full"], sizes=[5, 10, None],
                  seeds=[0], config=DaConfig(max_iter=2))
        a = learning_curve(corpus, **kw)
        b = learning_curve(corpus, **kw)
        assert a.to_csv() == b.to_csv()
        assert a.splits == b.splits
        sizes = [r[2] for r in a.rows]
        assert sizes == sorted(sizes, key=lambda s: math.inf if s == "all" else s)
        assert len(a.rows) == 3 * 3 * (corpus.K + 1)
        assert {r[0] for r in a.rows} == {"indp", "pool", "coal-full"}

    def test_learning_curve_noiseless_regression(self):
        inst = sample_da_instance(3, 4, 60, 1.0, 0.0, "regression",
                                  np.random.default_rng(14))
        corpus = MultiTaskCorpus(inst.tasks, 4)
        report = learning_curve(corpus, ["indp"], [None], [0],
                                DaConfig(rho2=1e-6))
        # Bayes-optimal R^2 is exactly 1 on noiseless data.
        assert report.mean("indp") >= 1 - 1e-6

    def test_size_too_large(self):
        corpus, _ = da_corpus(15, N=10)
        with pytest.raises(ConfigError):
            learning_curve(corpus, ["indp"], [50], [0])

    def test_target_transfer(self):
        corpus, _ = da_corpus(16, K=3, N=60)
        kw = dict(target=2, source_size=None, target_sizes=[0, 10, 42],
                  methods=["indp", "coal-full"], seeds=[0, 1],
                  config=DaConfig(max_iter=3))
        a = target_transfer(corpus, **kw)
        assert a.to_csv() == target_transfer(corpus, **kw).to_csv()
        assert {r[1] for r in a.rows} == {"t2"}
        assert len(a.rows) == 3 * 2 * 2
        # With all target data the tree model stays close to indp.
        assert abs(a.mean("coal-full", "t2", 42) - a.mean("indp", "t2", 42)) <= 0.1
        # With no target data indp predicts from a zero weight vector.
        assert a.mean("indp", "t2", 0) <= 0.75

    def test_scramble_sweep_rows(self):
        corpus, _ = da_corpus(17, K=3, N=30)
        fr = [0.0, 0.25, 0.5, 0.75, 1.0]
        report = scramble_sweep(corpus, 0, fr, ["indp", "pool"], seeds=[0],
                                config=DaConfig(max_iter=1))
        for method in ("indp", "pool"):
            for task in corpus.names + ["macro"]:
                rows = [r for r in report.rows if r[0] == method and r[1] == task]
                assert [r[2] for r in rows] == fr

    def test_zero_scramble_copy_scores_like_original(self):
        corpus, _ = da_corpus(18, K=3, N=40)
        scrambled = scramble_task(corpus, 1, 0.0, np.random.default_rng(0))
        for method in ("indp", "pool"):
            report = learning_curve(scrambled, [method], [None], [3])
            vals = {r[1]: r[5] for r in report.rows}
            assert vals["t1~0"] == vals["t1"]

    def test_pca_in_driver(self):
        corpus, _ = da_corpus(19, D=6, N=30)
        report = learning_curve(corpus, ["indp"], [None], [0], pca_dim=3)
        assert all(0 <= r[5] <= 1 for r in report.rows)
