"""Command-line interface: ``coalmtl <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 data error (including
missing or unreadable files), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import sparse

from . import __version__
from ._util import resolve_threads
from .coalescent import to_dot, to_newick
from .da_model import DaConfig, da_fit, predict_label
from .diffusion import sample_da_instance, sample_mtl_instance
from .errors import ConfigError, DataError, NumericalError
from .evalbench import (MultiTaskCorpus, evaluate, default_metric,
                        learning_curve, load_corpus, method_names,
                        save_corpus, scramble_sweep, target_transfer)
from .learners import predict_scores
from .modelio import load_model, save_model
from .mtl_model import MtlConfig, mtl_fit

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
logger = logging.getLogger("coalmtl")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from None


def _size_list(text):
    out = []
    for v in text.split(","):
        v = v.strip()
        if not v:
            continue
        if v == "all":
            out.append(None)
            continue
        try:
            out.append(int(v))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad size {v!r}") from None
    return out


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_common(p):
    p.add_argument("--config", metavar="FILE",
                   help="key=value file; command-line flags take precedence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $COALMTL_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model_opts(p):
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--rho2", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--heldout", type=float, default=0.1)
    p.add_argument("--task-kind", choices=("classification", "regression"),
                   default=None)


def build_parser():
    parser = _Parser(prog="coalmtl", description=(
        "Multitask learning and domain adaptation with a latent coalescent "
        "tree over tasks."))
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model and export its tree")
    _add_common(p)
    _add_model_opts(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", choices=("da", "mtl"), default="da")
    p.add_argument("--variant", default="full")
    p.add_argument("--discrete", type=_int_list, default=[],
                   help="1-based indices of discrete features (+x variants)")
    p.add_argument("--discrete-rate", type=float, default=1.0)
    p.add_argument("--out", required=True, help="model file (JSON)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-example predictions")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="per-task and macro metrics")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--metric", choices=("accuracy", "auc", "r2"), default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="sample a synthetic corpus")
    _add_common(p)
    p.add_argument("--kind", choices=("da", "mtl"), default="da")
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--D", type=int, default=10)
    p.add_argument("--N", type=int, default=100, help="examples per task")
    p.add_argument("--task", choices=("classification", "regression"),
                   default=None)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--rho2", type=float, default=1.0)
    p.add_argument("--min-duration", type=float, default=0.0)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("experiment", help="learning curve, transfer or scramble")
    _add_common(p)
    _add_model_opts(p)
    p.add_argument("name", choices=("curve", "target", "scramble"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--test-corpus", default=None)
    p.add_argument("--methods", type=_str_list, default=["indp", "pool", "coal-full"])
    p.add_argument("--sizes", type=_size_list, default=[None])
    p.add_argument("--seeds", type=_int_list, default=None,
                   help="comma list of seeds (default: --seed)")
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--source-size", type=_size_list, default=[None])
    p.add_argument("--target-sizes", type=_int_list, default=[0, 10, 50])
    p.add_argument("--task", type=int, default=0, help="task to scramble")
    p.add_argument("--fractions", type=_float_list,
                   default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--pca-dim", type=int, default=None)
    p.add_argument("--metric", choices=("accuracy", "auc", "r2"), default=None)
    p.add_argument("--out", required=True, help="report CSV")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("export-tree", help="write a model's tree")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=("newick", "dot"), default="newick")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_export_tree)
    return parser


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _subcommands(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def _config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv):
    """Parse ``argv`` with flags > config file > defaults precedence."""
    parser = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if path and command in _subcommands(parser):
        values = read_config_file(path)
        sub = _subcommands(parser)[command]
        dests = {a.dest: a for a in sub._actions if a.option_strings}
        for key in values:
            if key not in dests or key in ("config", "help"):
                raise ConfigError(f"unknown config key {key!r} for {command}")
        defaults = {}
        for key, value in values.items():
            action = dests[key]
            action.required = False
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = value
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _stem(path):
    p = Path(path)
    return p.with_suffix("") if p.suffix else p


def _open_out(path):
    if path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def _fit_config(args, model):
    common = dict(sigma2=args.sigma2, rho2=args.rho2, max_iter=args.iters,
                  heldout_fraction=args.heldout, seed=args.seed,
                  task_kind=args.task_kind, threads=resolve_threads(args.threads))
    if model == "mtl":
        return MtlConfig(variant=getattr(args, "variant", "full"), **common)
    discrete = tuple(j - 1 for j in getattr(args, "discrete", []) or [])
    return DaConfig(variant=getattr(args, "variant", "full"),
                    discrete_features=discrete,
                    discrete_rate=getattr(args, "discrete_rate", 1.0), **common)


def cmd_train(args):
    corpus = load_corpus(args.corpus, kind=args.model)
    config = _fit_config(args, args.model)
    fit = mtl_fit if args.model == "mtl" else da_fit
    state = fit(corpus.tasks, config)
    save_model(state, args.out, corpus.names)
    stem = _stem(args.out)
    with open(f"{stem}.trace.csv", "w", encoding="utf-8") as fh:
        fh.write("iteration,heldout_loglik\n")
        for i, v in enumerate(state.heldout_trace):
            fh.write(f"{i},{v!r}\n")
    Path(f"{stem}.nwk").write_text(to_newick(state.tree, corpus.names) + "\n",
                                   encoding="utf-8")
    Path(f"{stem}.dot").write_text(to_dot(state.tree, corpus.names),
                                   encoding="utf-8")
    print(f"trained {args.model}/{config.variant} on {corpus.K} tasks; "
          f"best iteration {state.best_iteration} of {config.max_iter}")
    print(f"wrote {args.out}, {stem}.trace.csv, {stem}.nwk, {stem}.dot")
    return 0


def _weights(state):
    if hasattr(state, "posteriors"):
        return np.array([p.mean for p in state.posteriors])
    return state.weights


def _match_tasks(corpus, names):
    index = {n: k for k, n in enumerate(names)}
    missing = [n for n in corpus.names if n not in index]
    if missing:
        raise DataError(f"tasks {missing} are not in the model")
    return [index[n] for n in corpus.names]


def _check_dim(corpus, state):
    if corpus.dim > state.dim:
        raise DataError(f"corpus has {corpus.dim} features, model {state.dim}")


def _padded(X, dim):
    # Corpora without a D header can infer fewer features than the model.
    if X.shape[1] == dim:
        return X
    return sparse.hstack([X, sparse.csr_matrix((X.shape[0], dim - X.shape[1]))]).tocsr()


def cmd_predict(args):
    state, names = load_model(args.model)
    corpus = load_corpus(args.corpus)
    _check_dim(corpus, state)
    ids = _match_tasks(corpus, names)
    W = _weights(state)
    fh, close = _open_out(args.out)
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "index", "score", "label"])
        for t, name, k in zip(corpus.tasks, corpus.names, ids):
            scores = predict_scores(W[k], _padded(t.X, state.dim), state.task_kind)
            for i, s in enumerate(scores):
                label = ""
                if state.task_kind == "classification":
                    label = "+1" if predict_label(s) > 0 else "-1"
                writer.writerow([name, i, repr(float(s)), label])
    finally:
        if close:
            fh.close()
    return 0


class _Loaded:
    def __init__(self, W, task_kind):
        self.W, self.task_kind = W, task_kind

    def predict(self, k, X):
        return predict_scores(self.W[k], X, self.task_kind)


def cmd_eval(args):
    state, names = load_model(args.model)
    corpus = load_corpus(args.corpus)
    _check_dim(corpus, state)
    ids = _match_tasks(corpus, names)
    metric = args.metric or default_metric(state.task_kind)
    model = _Loaded(_weights(state), state.task_kind)
    method = ("coal-" if hasattr(state, "posteriors") else "coal-mtl-") + \
        state.config.variant
    rows = []
    for t, name, k in zip(corpus.tasks, corpus.names, ids):
        if t.n == 0:
            raise DataError(f"task {name} has no evaluation examples")
        data = type(t)(_padded(t.X, state.dim), t.y, t.task)
        rows.append((name, evaluate(model, k, data, metric)))
    macro = float(np.mean([v for _, v in rows]))
    for name, v in rows:
        print(f"{name}\t{metric}\t{v:.6f}")
    print(f"macro\t{metric}\t{macro:.6f}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["method", "task", "size", "seed", "metric", "value"])
            for name, v in rows + [("macro", macro)]:
                writer.writerow([method, name, "all", state.config.seed, metric,
                                 repr(v)])
    return 0


def _truth(inst, kind):
    out = {"kind": kind, "task": inst.task,
           "newick": to_newick(inst.tree),
           "parent": list(inst.tree.parent),
           "times": list(inst.tree.times),
           "lam": np.asarray(inst.lam).tolist(),
           "weights": inst.weights.tolist()}
    if kind == "mtl":
        out["R"] = inst.R.tolist()
        out["log_std"] = inst.log_std.tolist()
    else:
        out["input_means"] = inst.input_means.tolist()
    return out


def cmd_synth(args):
    if args.K < 2 or args.D < 1 or args.N < 0 or args.n_test < 0:
        raise ConfigError("need K >= 2, D >= 1, N >= 0 and n-test >= 0")
    rng = np.random.default_rng(args.seed)
    if args.kind == "da":
        inst = sample_da_instance(args.K, args.D, args.N, args.sigma2, args.rho2,
                                  args.task or "classification", rng,
                                  min_duration=args.min_duration,
                                  n_test=args.n_test)
    else:
        inst = sample_mtl_instance(args.K, args.D, args.N, args.sigma2, args.rho2,
                                   rng, task=args.task or "regression",
                                   min_duration=args.min_duration,
                                   n_test=args.n_test)
    corpus = MultiTaskCorpus(inst.tasks, args.D, kind=args.kind)
    save_corpus(corpus, args.out)
    stem = _stem(args.out)
    with open(f"{stem}.truth.json", "w", encoding="utf-8") as fh:
        json.dump(_truth(inst, args.kind), fh, indent=1, sort_keys=True)
        fh.write("\n")
    written = [args.out, f"{stem}.truth.json"]
    if args.n_test:
        save_corpus(MultiTaskCorpus(inst.test_tasks, args.D, kind=args.kind),
                    f"{stem}.test.txt")
        written.append(f"{stem}.test.txt")
    print("wrote " + ", ".join(map(str, written)))
    return 0


def cmd_experiment(args):
    corpus = load_corpus(args.corpus)
    test = load_corpus(args.test_corpus) if args.test_corpus else None
    if test is not None and test.dim < corpus.dim:
        test = MultiTaskCorpus([type(t)(_padded(t.X, corpus.dim), t.y, t.task)
                                for t in test.tasks], corpus.dim, test.names,
                               test.kind)
    for m in args.methods:
        if m not in method_names():
            raise ConfigError(f"unknown method {m!r}; choose from {method_names()}")
    config = _fit_config(args, "da")
    seeds = args.seeds if args.seeds else [args.seed]
    threads = resolve_threads(args.threads)
    common = dict(seeds=seeds, config=config, test_fraction=args.test_fraction,
                  metric=args.metric, pca_dim=args.pca_dim, threads=threads)
    if args.name == "curve":
        report = learning_curve(corpus, args.methods, args.sizes,
                                test_corpus=test, **common)
    elif args.name == "target":
        if len(args.source_size) != 1:
            raise ConfigError("--source-size takes a single value")
        report = target_transfer(corpus, args.target, args.source_size[0],
                                 args.target_sizes, args.methods,
                                 test_corpus=test, **common)
    else:
        if test is not None:
            raise ConfigError("scramble splits the corpus itself; drop --test-corpus")
        report = scramble_sweep(corpus, args.task, args.fractions, args.methods,
                                **common)
    report.to_csv(args.out)
    report.write_sidecar(f"{_stem(args.out)}.splits.json")
    print(f"wrote {len(report.rows)} rows to {args.out}")
    return 0


def cmd_export_tree(args):
    state, names = load_model(args.model)
    text = (to_newick(state.tree, names) + "\n" if args.format == "newick"
            else to_dot(state.tree, names))
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return 0


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
