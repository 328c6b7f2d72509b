"""Pluggable supervised learners for nuisance regression.

Every nuisance in the estimating equations is a conditional expectation of
an observable label given covariates, so one small interface covers them
all: ``fit_learner(config, X, y, seed)`` returns an immutable
:class:`FittedPredictor` whose ``predict`` is deterministic given the
fitted state.  Probability-type nuisances get a clip range applied at
prediction time.

Kinds
-----
``logistic``
    L2-penalized logistic regression fit by IRLS (Newton) to gradient norm
    1e-8 or 100 iterations.  The intercept is not penalized.
``ridge``
    Closed-form penalized least squares (intercept not penalized).
``gbt``
    Squared-loss gradient boosting over histogram-binned features; exact
    greedy splits at bin boundaries.  ``trees=0`` predicts the target mean.
``constant``
    Target mean.
``oracle``
    Wraps an externally supplied function of the covariate rows; training
    data are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from . import _boosting
from .errors import (
    DimensionMismatch,
    EmptyTrainingSet,
    NonBinaryLabels,
    SingularDesign,
)

KINDS = ("logistic", "ridge", "gbt", "constant", "oracle")


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters for one nuisance learner slot."""

    kind: str = "gbt"
    l2_penalty: float = 1e-4
    trees: int = 200
    depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    bins: int = 64
    oracle_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.kind in ("logistic", "ridge") and self.l2_penalty < 0:
            raise ValueError("l2_penalty must be nonnegative")
        if self.kind == "gbt":
            if self.trees < 0 or self.depth < 1 or self.min_leaf < 1:
                raise ValueError("gbt needs trees >= 0, depth >= 1, min_leaf >= 1")
            if not 0.0 < self.learning_rate <= 1.0:
                raise ValueError("learning_rate must be in (0, 1]")
            if not 2 <= self.bins <= _boosting.MAX_BINS:
                raise ValueError(f"bins must be in [2, {_boosting.MAX_BINS}]")
        if (self.oracle_fn is not None) != (self.kind == "oracle"):
            raise ValueError("oracle_fn must be present iff kind='oracle'")


class FittedPredictor:
    """Immutable fitted model; prediction optionally clipped to a range."""

    def __init__(self, kind: str, state: dict, n_features: int,
                 clip_range: Optional[Tuple[float, float]] = None):
        self.kind = kind
        self._state = state
        self.n_features = n_features
        self.clip_range = clip_range

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or (self.n_features >= 0 and x.shape[1] != self.n_features):
            raise DimensionMismatch(
                f"expected (m, {self.n_features}) features, got {x.shape}"
            )
        out = _PREDICT[self.kind](self._state, x)
        if self.clip_range is not None:
            out = np.clip(out, self.clip_range[0], self.clip_range[1])
        return out

    def with_clip(self, clip_range) -> "FittedPredictor":
        return FittedPredictor(self.kind, self._state, self.n_features, clip_range)


def _design(x: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((x.shape[0], 1)), x])


def _fit_logistic(config, x, y, rng):
    if not np.isin(y, (0.0, 1.0)).all():
        raise NonBinaryLabels("logistic targets must be 0/1")
    if y.min() == y.max():
        # degenerate: unpenalized intercept diverges; pin the base rate
        return {"constant": float(y[0])}
    d = _design(x)
    q = d.shape[1]
    beta = np.zeros(q)
    pen = np.full(q, config.l2_penalty)
    pen[0] = 0.0
    for _ in range(100):
        lin = np.clip(d @ beta, -30.0, 30.0)
        p = 1.0 / (1.0 + np.exp(-lin))
        grad = d.T @ (p - y) + pen * beta
        if np.linalg.norm(grad) <= 1e-8:
            break
        w = p * (1.0 - p)
        hess = (d * w[:, None]).T @ d + np.diag(pen)
        hess[np.diag_indices_from(hess)] += 1e-10
        beta = beta - np.linalg.solve(hess, grad)
    return {"beta": beta}


def _predict_logistic(state, x):
    if "constant" in state:
        return np.full(x.shape[0], state["constant"])
    lin = np.clip(_design(x) @ state["beta"], -30.0, 30.0)
    return 1.0 / (1.0 + np.exp(-lin))


def _fit_ridge(config, x, y, rng):
    d = _design(x)
    q = d.shape[1]
    if config.l2_penalty == 0.0 and np.linalg.matrix_rank(d) < q:
        raise SingularDesign("rank-deficient design with zero penalty")
    pen = np.full(q, config.l2_penalty)
    pen[0] = 0.0
    beta = np.linalg.solve(d.T @ d + np.diag(pen), d.T @ y)
    return {"beta": beta}


def _predict_ridge(state, x):
    return _design(x) @ state["beta"]


def _fit_gbt(config, x, y, rng):
    n_bins = min(config.bins, max(2, x.shape[0]))
    if config.trees == 0 or x.shape[1] == 0:
        return {"base": float(y.mean()), "trees": None}
    edges = _boosting.bin_edges(x, n_bins, rng)
    codes = _boosting.bin_codes(x, edges)
    base, feat, cut, val, kids, mse_path = _boosting._boost_fit(
        codes, y, n_bins, config.trees, config.depth,
        config.learning_rate, config.min_leaf,
    )
    return {
        "base": base, "trees": (feat, cut, val, kids), "edges": edges,
        "learning_rate": config.learning_rate, "train_mse_path": mse_path,
    }


def _predict_gbt(state, x):
    if state["trees"] is None:
        return np.full(x.shape[0], state["base"])
    codes = _boosting.bin_codes(x, state["edges"])
    feat, cut, val, kids = state["trees"]
    return _boosting._boost_predict(
        codes, state["base"], feat, cut, val, kids, state["learning_rate"]
    )


def _fit_constant(config, x, y, rng):
    return {"mean": float(y.mean())}


def _predict_constant(state, x):
    return np.full(x.shape[0], state["mean"])


def _fit_oracle(config, x, y, rng):
    return {"fn": config.oracle_fn}


def _predict_oracle(state, x):
    out = np.asarray(state["fn"](x), dtype=np.float64)
    if out.shape != (x.shape[0],):
        raise DimensionMismatch("oracle_fn must return one value per row")
    return out


_FIT = {
    "logistic": _fit_logistic,
    "ridge": _fit_ridge,
    "gbt": _fit_gbt,
    "constant": _fit_constant,
    "oracle": _fit_oracle,
}
_PREDICT = {
    "logistic": _predict_logistic,
    "ridge": _predict_ridge,
    "gbt": _predict_gbt,
    "constant": _predict_constant,
    "oracle": _predict_oracle,
}


def fit_learner(config: LearnerConfig, features: np.ndarray, targets: np.ndarray,
                seed: int = 0, clip_range: Optional[Tuple[float, float]] = None,
                ) -> FittedPredictor:
    """Fit one nuisance model; deterministic given ``seed`` and inputs."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch("features must be a 2-d matrix")
    if x.shape[0] == 0:
        raise EmptyTrainingSet("no training rows")
    if y.shape != (x.shape[0],):
        raise DimensionMismatch("targets length must match feature rows")
    if not np.isfinite(y).all():
        raise ValueError("targets must be finite")
    rng = np.random.default_rng(seed)
    state = _FIT[config.kind](config, x, y, rng)
    return FittedPredictor(config.kind, state, x.shape[1], clip_range)


def train_mse_path(model: FittedPredictor) -> np.ndarray:
    """Training MSE after 0, 1, ..., trees boosting rounds (gbt only)."""
    state = model._state
    if model.kind != "gbt" or state.get("trees") is None:
        raise ValueError("train_mse_path is only recorded for boosted fits")
    return state["train_mse_path"]
