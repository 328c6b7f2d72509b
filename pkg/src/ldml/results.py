"""Result containers shared by the engine and inference layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .data import FoldPlan


@dataclass(frozen=True)
class JacobianEstimate:
    """Estimate of the moment Jacobian at the solution."""

    matrix: np.ndarray
    method: str
    bandwidth: Optional[float] = None


@dataclass(frozen=True)
class VarianceEstimate:
    """Sandwich variance of sqrt(n) times the estimator."""

    sigma: np.ndarray
    n: int
    jacobian: JacobianEstimate


@dataclass(frozen=True)
class ConfidenceInterval:
    contrast: np.ndarray
    level: float
    lower: float
    upper: float


@dataclass
class SplitResult:
    """Point estimate and inference pieces from one random fold split."""

    theta: np.ndarray
    sigma: np.ndarray
    jacobian: JacobianEstimate
    influence: np.ndarray          # (n, d) rows of Jinv @ psi
    diagnostics: dict
    plan: FoldPlan
    seed: int

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma) / self.influence.shape[0])


@dataclass
class EstimateReport:
    """Aggregated estimate across repeated random splits."""

    estimand: str
    gamma: float
    theta: np.ndarray
    sigma: np.ndarray
    stderr: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    alpha: float
    n: int
    aggregate: str
    splits: List[SplitResult] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "gamma": self.gamma,
            "theta": self.theta.tolist(),
            "jacobian": [s.jacobian.matrix.tolist() for s in self.splits],
            "sigma": self.sigma.tolist(),
            "stderr": self.stderr.tolist(),
            "ci": {
                "lower": self.ci_lower.tolist(),
                "upper": self.ci_upper.tolist(),
                "alpha": self.alpha,
            },
            "n": self.n,
            "aggregate": self.aggregate,
            "splits": [
                {
                    "theta": s.theta.tolist(),
                    "stderr": s.stderr.tolist(),
                    "seed": s.seed,
                    **{k: v for k, v in s.diagnostics.items()},
                }
                for s in self.splits
            ],
            "warnings": list(self.warnings),
            "seed": self.seed,
        }


def aggregate_splits(thetas: np.ndarray, sigmas: np.ndarray, rule: str):
    """Combine per-split estimates and variances.

    The point estimate follows ``rule`` (component-wise median or mean);
    the variance always pools the per-split variances plus the
    between-split spread around the mean, which accounts for the extra
    randomness of fold splitting.
    """
    if rule not in ("median", "mean"):
        raise ValueError(f"unknown aggregate rule {rule!r}")
    s = thetas.shape[0]
    theta_mean = thetas.mean(axis=0)
    theta_hat = np.median(thetas, axis=0) if rule == "median" else theta_mean
    dev = thetas - theta_mean
    spread = np.einsum("si,sj->ij", dev, dev) / s
    sigma = sigmas.mean(axis=0) + spread / s
    return theta_hat, sigma
