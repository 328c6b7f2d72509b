"""Variance estimation, Jacobian estimation, and confidence intervals.

The sandwich variance conjugates the per-row estimating-function outer
products by the inverse Jacobian.  Quantile-type Jacobians are weighted
kernel density estimates at the solution (the equations are not
differentiable there); the expectile Jacobian has a closed form in the
reweighted outcome distribution function.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np
from scipy.special import ndtri

from ._seeding import child_seed
from .data import FoldPlan, ObservationTable
from .errors import (
    DegenerateTreatmentArm,
    FoldPlanMismatch,
    NoContributingRows,
    NonPositiveBandwidth,
    NuTooSmall,
    SingularJacobian,
)
from .estimands import PROBABILITY_CLIP, MomentModel, NuisanceValues
from .learners import LearnerConfig, fit_learner
from .results import (
    ConfidenceInterval,
    EstimateReport,
    JacobianEstimate,
    SplitResult,
    VarianceEstimate,
    aggregate_splits,
)

logger = logging.getLogger(__name__)

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _gauss(u: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * u * u) / _SQRT_2PI


def silverman_bandwidth(sample: np.ndarray) -> float:
    """0.9 * min(sd, IQR/1.34) * m^(-1/5) on the contributing outcome sample."""
    m = len(sample)
    sd = float(np.std(sample, ddof=1)) if m > 1 else 0.0
    q75, q25 = np.percentile(sample, [75.0, 25.0]) if m > 0 else (0.0, 0.0)
    iqr = float(q75 - q25)
    scale = min(sd, iqr / 1.34) if min(sd, iqr) > 0 else max(sd, iqr / 1.34)
    return 0.9 * scale * m ** (-0.2)


def estimate_jacobian_kde(table: ObservationTable, propensity: np.ndarray,
                          theta1: float, bandwidth: Optional[float] = None,
                          self_normalize: bool = True, mode: str = "treated",
                          arm: int = 1, nu: Optional[float] = None,
                          ) -> JacobianEstimate:
    """Weighted kernel density estimate of the quantile-type Jacobian.

    ``treated`` mode reweights by the inverse treatment propensity;
    ``lqte-signed`` mode uses the signed instrument-propensity weights and
    the complier-share scalar ``nu``.  Gaussian kernel; bandwidth defaults
    to the Silverman-type rule on the contributing outcomes.
    """
    n = table.n
    contrib = table.treatment == arm
    if not contrib.any():
        raise NoContributingRows(f"no rows with treatment == {arm}")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(table.outcome[contrib])
    if not bandwidth > 0:
        raise NonPositiveBandwidth(f"bandwidth {bandwidth} must be positive")
    kern = _gauss((table.outcome - theta1) / bandwidth)
    if mode == "treated":
        wts = np.where(contrib, 1.0 / propensity, 0.0)
        raw = float(np.sum(wts * kern)) / (n * bandwidth)
        if self_normalize:
            raw /= float(np.sum(wts)) / n
    elif mode == "lqte-signed":
        signed = (table.instrument - propensity) / (propensity * (1.0 - propensity))
        active = np.where(contrib, signed, 0.0)
        raw = float(np.sum(active * kern)) / (nu * n * bandwidth)
        if self_normalize:
            denom = float(np.sum(active)) / (nu * n)
            raw /= denom
    else:
        raise ValueError(f"unknown kde mode {mode!r}")
    return JacobianEstimate(np.array([[raw]]), f"kde_{mode}", bandwidth)


def estimate_jacobian_analytic(moment: MomentModel, table: ObservationTable,
                               nuis: NuisanceValues, theta: np.ndarray,
                               bandwidth: Optional[float] = None,
                               self_normalize: bool = True) -> JacobianEstimate:
    """Closed-form Jacobian recipes for the joint quantile/CVaR and expectile."""
    if moment.jacobian_recipe == "qcvar_block":
        kde = estimate_jacobian_kde(
            table, nuis.eta2, float(theta[0]), bandwidth=bandwidth,
            self_normalize=self_normalize, arm=moment.arm,
        )
        j = np.array([[kde.matrix[0, 0], 0.0], [0.0, -1.0]])
        return JacobianEstimate(j, "qcvar_block", kde.bandwidth)
    if moment.jacobian_recipe == "expectile_cdf":
        contrib = table.treatment == moment.arm
        wts = np.where(contrib, 1.0 / nuis.eta2, 0.0)
        below = (table.outcome <= theta[0]).astype(np.float64)
        f_hat = float(np.sum(wts * below) / np.sum(wts))
        g = moment.gamma
        j = -g - (1.0 - 2.0 * g) * f_hat
        return JacobianEstimate(np.array([[j]]), "expectile_cdf", None)
    raise ValueError(f"no analytic recipe for {moment.jacobian_recipe!r}")


def jacobian_for(moment: MomentModel, table: ObservationTable,
                 nuis: NuisanceValues, theta: np.ndarray,
                 bandwidth: Optional[float] = None,
                 self_normalize: bool = True) -> JacobianEstimate:
    """Dispatch on the moment's Jacobian recipe."""
    recipe = moment.jacobian_recipe
    if recipe == "kde_quantile":
        return estimate_jacobian_kde(
            table, nuis.eta2, float(theta[0]), bandwidth=bandwidth,
            self_normalize=self_normalize, arm=moment.arm,
        )
    if recipe == "kde_lqte":
        return estimate_jacobian_kde(
            table, nuis.eta2, float(theta[0]), bandwidth=bandwidth,
            self_normalize=self_normalize, mode="lqte-signed",
            arm=moment.arm, nu=nuis.nu,
        )
    return estimate_jacobian_analytic(
        moment, table, nuis, theta, bandwidth=bandwidth,
        self_normalize=self_normalize,
    )


def _inverse(jacobian: JacobianEstimate) -> np.ndarray:
    j = jacobian.matrix
    if not np.isfinite(j).all():
        raise SingularJacobian("Jacobian has non-finite entries")
    smin = np.linalg.svd(j, compute_uv=False).min()
    if smin <= 1e-10:
        raise SingularJacobian(f"Jacobian smallest singular value {smin:.3g} <= 1e-10")
    return np.linalg.inv(j)


def influence_rows(moment: MomentModel, table: ObservationTable,
                   nuis: NuisanceValues, theta: np.ndarray,
                   jacobian: JacobianEstimate) -> np.ndarray:
    """Per-row influence values Jinv @ psi, shape (n, d)."""
    return moment.psi(table, theta, nuis) @ _inverse(jacobian).T


def estimate_variance(moment: MomentModel, table: ObservationTable,
                      nuis: NuisanceValues, theta: np.ndarray,
                      jacobian: JacobianEstimate) -> VarianceEstimate:
    """Sandwich variance: mean of Jinv psi psi' Jinv' over all rows."""
    rows = influence_rows(moment, table, nuis, theta, jacobian)
    sigma = rows.T @ rows / table.n
    sigma = 0.5 * (sigma + sigma.T)
    evals = np.linalg.eigvalsh(sigma)
    if evals.min() < 0:
        logger.warning("variance estimate numerically indefinite; flooring eigenvalues at 0")
        w, v = np.linalg.eigh(sigma)
        sigma = (v * np.maximum(w, 0.0)) @ v.T
    return VarianceEstimate(sigma, table.n, jacobian)


def confidence_interval(theta: np.ndarray, variance: VarianceEstimate,
                        zeta: np.ndarray, alpha: float) -> ConfidenceInterval:
    """Two-sided normal interval for the contrast zeta' theta."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    zeta = np.asarray(zeta, dtype=np.float64).reshape(-1)
    center = float(zeta @ np.atleast_1d(theta))
    quad = float(zeta @ variance.sigma @ zeta)
    half = float(ndtri(1.0 - alpha / 2.0)) * np.sqrt(max(quad, 0.0) / variance.n)
    return ConfidenceInterval(zeta, 1.0 - alpha, center - half, center + half)


def componentwise_intervals(theta: np.ndarray, sigma: np.ndarray, n: int,
                            alpha: float):
    z = float(ndtri(1.0 - alpha / 2.0))
    half = z * np.sqrt(np.maximum(np.diag(sigma), 0.0) / n)
    return theta - half, theta + half


def effect_difference(report_treated: EstimateReport, report_control: EstimateReport,
                      share_propensity: bool = False) -> EstimateReport:
    """Treatment-effect report: difference of two per-arm reports.

    Both arms must have been estimated on the same data with identical
    fold plans, so per-split influence rows can be differenced row by row.
    With ``share_propensity`` the caller asserts both arms consumed the
    same propensity fits (which holds when both runs used the same seed,
    since the propensity task is fit on identical rows with identical
    derived seeds).
    """
    r1, r0 = report_treated, report_control
    if r1.n != r0.n or len(r1.splits) != len(r0.splits):
        raise FoldPlanMismatch("arm reports differ in sample size or split count")
    for s1, s0 in zip(r1.splits, r0.splits):
        if not s1.plan.same_partition(s0.plan):
            raise FoldPlanMismatch("arm reports were built on different fold plans")
    taus = []
    sigmas = []
    splits = []
    for s1, s0 in zip(r1.splits, r0.splits):
        omega = s1.influence - s0.influence
        tau = s1.theta - s0.theta
        sigma = omega.T @ omega / r1.n
        taus.append(tau)
        sigmas.append(sigma)
        splits.append(SplitResult(
            theta=tau, sigma=sigma, jacobian=s1.jacobian, influence=omega,
            diagnostics={"share_propensity": share_propensity},
            plan=s1.plan, seed=s1.seed,
        ))
    tau_hat, sigma_hat = aggregate_splits(np.asarray(taus), np.asarray(sigmas),
                                          r1.aggregate)
    lo, hi = componentwise_intervals(tau_hat, sigma_hat, r1.n, r1.alpha)
    return EstimateReport(
        estimand=f"{r1.estimand}_effect",
        gamma=r1.gamma,
        theta=tau_hat,
        sigma=sigma_hat,
        stderr=np.sqrt(np.maximum(np.diag(sigma_hat), 0.0) / r1.n),
        ci_lower=lo,
        ci_upper=hi,
        alpha=r1.alpha,
        n=r1.n,
        aggregate=r1.aggregate,
        splits=splits,
        warnings=list(dict.fromkeys(r1.warnings + r0.warnings)),
        seed=r1.seed,
    )


def estimate_nu_dml(table: ObservationTable, plan: FoldPlan,
                    instrument_learner: LearnerConfig,
                    treatment_learner: LearnerConfig,
                    seed: int = 0, clip=PROBABILITY_CLIP) -> float:
    """Cross-fitted augmented weighting estimate of the complier share.

    For each fold, the instrument propensity P(W=1|X) and the treatment
    take-up model P(T=1|X,W) are fit on the fold's complement and
    evaluated on the fold.
    """
    if table.instrument is None:
        raise NuTooSmall("complier-share estimation requires an instrument")
    w = table.instrument.astype(np.float64)
    t = table.treatment.astype(np.float64)
    x = table.covariates
    contrib = np.empty(table.n)
    for k in range(plan.K):
        test = plan.fold_rows(k)
        train = plan.rows_of_folds([j for j in range(plan.K) if j != k])
        if w[train].min() == w[train].max():
            raise DegenerateTreatmentArm(f"fold {k}: training data has a single instrument class")
        pi_w = fit_learner(instrument_learner, x[train], w[train],
                           seed=child_seed(seed, "nu_w", k), clip_range=clip)
        xw_train = np.hstack([x[train], w[train, None]])
        pi_t = fit_learner(treatment_learner, xw_train, t[train],
                           seed=child_seed(seed, "nu_t", k), clip_range=clip)
        pw = pi_w.predict(x[test])
        x_test = x[test]
        p_obs = pi_t.predict(np.hstack([x_test, w[test, None]]))
        p1 = pi_t.predict(np.hstack([x_test, np.ones((len(test), 1))]))
        p0 = pi_t.predict(np.hstack([x_test, np.zeros((len(test), 1))]))
        contrib[test] = (w[test] - pw) / (pw * (1.0 - pw)) * (t[test] - p_obs) + p1 - p0
    nu = float(contrib.mean())
    if nu < 0.01:
        raise NuTooSmall(f"estimated complier share {nu:.4f} < 0.01")
    return nu
