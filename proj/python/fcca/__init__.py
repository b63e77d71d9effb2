"""Counterfactual-driven discretization and surrogate decision trees."""

import json

from . import _fcca
from ._fcca import (
    BinDataset,
    ConfigError,
    DataError,
    Dataset,
    FccaError,
    InfeasibleError,
    SurrogateTree,
    TargetModel,
    ThresholdBag,
    binarize,
    extract_thresholds,
    fit_target,
    load_csv,
    make_synthetic,
    metrics,
    model_from_json,
    scale,
    select_quantile,
    solve_ce,
    train_cart,
    train_optimal,
    tree_objective,
)

__all__ = [
    "BinDataset",
    "ConfigError",
    "DataError",
    "Dataset",
    "FccaError",
    "InfeasibleError",
    "SurrogateTree",
    "TargetModel",
    "ThresholdBag",
    "binarize",
    "extract_thresholds",
    "fit_target",
    "gtre",
    "load_csv",
    "make_synthetic",
    "metrics",
    "model_from_json",
    "run",
    "scale",
    "select_quantile",
    "solve_ce",
    "sweep_q",
    "train_cart",
    "train_optimal",
    "tree_objective",
]


def _options(kwargs):
    out = {}
    for key, value in kwargs.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            value = ",".join(repr(float(v)) for v in value)
        out[key] = str(value)
    return out


def run(dataset, **options):
    """Cross-validated pipeline; returns the report as a dict.

    Options use config key names (q, depth, folds, target, p0, ...). Pass
    out="dir" to also write report files.
    """
    return json.loads(_fcca.run_json("run", _options({"dataset": dataset, **options})))


def sweep_q(dataset, **options):
    return json.loads(_fcca.run_json("sweep-q", _options({"dataset": dataset, **options})))


def gtre(dataset, **options):
    return json.loads(_fcca.run_json("gtre", _options({"dataset": dataset, **options})))

