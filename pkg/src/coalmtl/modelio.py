"""Versioned JSON container for fitted models.

The tree is stored twice: as Newick for humans and other tools, and as
explicit parent/children/times arrays so a reload is exact.  Floats are
written with ``repr`` precision, so save/load round-trips bit for bit.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .coalescent import CoalescentTree, to_newick
from .da_model import DaConfig, DaModelState
from .diffusion import DiffusionKernel
from .errors import DataError
from .learners import WeightPosterior
from .mtl_model import MtlConfig, MtlModelState

FORMAT = "coalmtl-model"
VERSION = 1


def _tree_dict(tree, names):
    return {"newick": to_newick(tree, names), "K": tree.K,
            "parent": list(tree.parent),
            "children": [list(c) for c in tree.children],
            "times": list(tree.times)}


def _tree_from(d):
    return CoalescentTree(d["K"], d["parent"], [tuple(c) for c in d["children"]],
                          d["times"])


def _config_dict(config):
    out = dataclasses.asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def model_to_dict(state, names=None):
    names = list(names) if names is not None else [str(k) for k in range(state.K)]
    base = {"format": FORMAT, "version": VERSION, "task_names": names,
            "task_kind": state.task_kind, "config": _config_dict(state.config),
            "tree": _tree_dict(state.tree, names),
            "lam": np.asarray(state.lam.lam).tolist(),
            "heldout_trace": [float(v) for v in state.heldout_trace],
            "iteration": state.iteration,
            "best_iteration": state.best_iteration}
    if isinstance(state, DaModelState):
        base["model"] = "da"
        base["weights"] = [p.mean.tolist() for p in state.posteriors]
        base["covariances"] = [p.cov.tolist() for p in state.posteriors]
    elif isinstance(state, MtlModelState):
        base["model"] = "mtl"
        base["weights"] = state.weights.tolist()
        base["R"] = state.R.tolist()
        base["S"] = state.S.tolist()
    else:
        raise TypeError(f"cannot serialize {type(state).__name__}")
    return base


def dumps(state, names=None):
    return json.dumps(model_to_dict(state, names), indent=1, sort_keys=True) + "\n"


def save_model(state, path, names=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(state, names))


def model_from_dict(d):
    """Rebuild a fitted state; returns ``(state, task_names)``.

    DA input-model statistics and internal-node marginals are not stored;
    they are only needed during fitting.
    """
    if d.get("format") != FORMAT:
        raise DataError("not a coalmtl model file")
    if d.get("version") != VERSION:
        raise DataError(f"unsupported model version {d.get('version')}")
    try:
        tree = _tree_from(d["tree"])
        lam = DiffusionKernel(np.array(d["lam"]))
        common = dict(task_kind=d["task_kind"], tree=tree, lam=lam,
                      heldout_trace=list(d["heldout_trace"]),
                      iteration=d["iteration"],
                      best_iteration=d["best_iteration"])
        cfg = dict(d["config"])
        if d["model"] == "da":
            cfg["discrete_features"] = tuple(cfg.get("discrete_features", ()))
            posts = [WeightPosterior(np.array(w), np.array(c))
                     for w, c in zip(d["weights"], d["covariances"])]
            state = DaModelState(config=DaConfig(**cfg), posteriors=posts,
                                 node_marginals=[], **common)
        elif d["model"] == "mtl":
            state = MtlModelState(config=MtlConfig(**cfg), R=np.array(d["R"]),
                                  S=np.array(d["S"]),
                                  weights=np.array(d["weights"]), **common)
        else:
            raise DataError(f"unknown model kind {d['model']!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model file: {exc}") from exc
    return state, list(d["task_names"])


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(d)
