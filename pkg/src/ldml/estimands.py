"""Estimating-equation definitions.

Each estimand is packaged as a :class:`MomentModel`: the per-row estimating
function ``psi``, the recipe of nuisance regressions (split into
estimand-dependent tasks, which are localized at a fixed initial value of
the target parameter, and estimand-independent ones), the recipe for the
Jacobian used in variance estimation, and a solver hint for the engine.

Conventions: the indicator in outcome-threshold terms is the weak
inequality ``y <= theta1``; localized labels such as ``max(y - theta1', 0)``
are built on the raw outcome scale.  ``arm`` selects which potential
outcome the parameters refer to (1 by default); propensity-type values are
always modeled as P(T=1 | X) and complemented internally for arm 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from ._solvers import StepParts, solve_step_equation, solve_decreasing_root
from .data import ObservationTable
from .errors import MissingInstrument

#: default clip range for probability-type nuisance predictions
PROBABILITY_CLIP = (0.01, 0.99)


@dataclass(frozen=True)
class NuisanceTask:
    """One nuisance regression slot.

    ``target`` maps (y, t, w, theta1) for the already-filtered subsample to
    training labels; ``theta1`` is ignored when the task is
    estimand-independent.  ``subset`` is one of ``all``, ``treated`` (rows
    with T equal to the estimand's arm), ``w1``, ``w0``.
    """

    name: str
    depends_on_estimand: bool
    kind: str                    # "probability" or "real"
    subset: str
    target: Callable


@dataclass
class NuisanceValues:
    """Per-row nuisance predictions entering the estimating function."""

    eta1: np.ndarray                       # (n, m) localized conditional expectations
    eta2: np.ndarray                       # (n,) propensity-type values
    nu: Optional[float] = None             # scalar nuisance (LQTE only)
    aux: Optional[np.ndarray] = None       # (n,) extra regression (expectile outcome mean)

    def take(self, idx: np.ndarray) -> "NuisanceValues":
        return NuisanceValues(
            eta1=self.eta1[idx],
            eta2=self.eta2[idx],
            nu=self.nu,
            aux=None if self.aux is None else self.aux[idx],
        )


class MomentModel:
    """Base class; concrete estimands fill in psi and the solver pieces."""

    name: str = ""
    d: int = 1
    d1: int = 1
    gamma: float = 0.5
    arm: int = 1
    tasks: Tuple[NuisanceTask, ...] = ()
    jacobian_recipe: str = "kde_quantile"
    solver_hint: str = "monotone_step"
    requires_instrument: bool = False
    initializer: str = "ipw"          # "ipw" | "lqte_weighting" | "none"
    uses_nu: bool = False

    # -- evaluation -----------------------------------------------------------

    def psi(self, table: ObservationTable, theta: np.ndarray,
            nuis: NuisanceValues) -> np.ndarray:
        raise NotImplementedError

    def residual(self, table: ObservationTable, theta: np.ndarray,
                 nuis: NuisanceValues) -> np.ndarray:
        """Mean of psi over the table rows, shape (d,)."""
        return self.psi(table, theta, nuis).mean(axis=0)

    def indicator(self, table: ObservationTable) -> np.ndarray:
        return (table.treatment == self.arm).astype(np.float64)

    # -- solving --------------------------------------------------------------

    def step_parts(self, table: ObservationTable, nuis: NuisanceValues) -> StepParts:
        """Jump decomposition of the first component as a step function of theta1."""
        raise NotImplementedError(f"{self.name} has no step decomposition")

    def solve_theta1(self, table: ObservationTable, nuis: NuisanceValues) -> float:
        if self.solver_hint == "bisection":
            return solve_decreasing_root(
                lambda th: float(self.residual(table, np.array([th]), nuis)[0]),
                lo=float(table.outcome.min()) - 1.0,
                hi=float(table.outcome.max()) + 1.0,
            )
        parts = self.step_parts(table, nuis)
        return solve_step_equation(
            parts.values, parts.weights, parts.offset,
            monotone=self.solver_hint == "monotone_step",
        )

    def complete_theta(self, table: ObservationTable, nuis: NuisanceValues,
                       theta1: float) -> np.ndarray:
        """Extend the solved theta1 to the full parameter vector."""
        return np.array([theta1])

    def solve(self, table: ObservationTable, nuis: NuisanceValues) -> np.ndarray:
        return self.complete_theta(table, nuis, self.solve_theta1(table, nuis))

    # -- initial estimate -----------------------------------------------------

    def solve_initial(self, y: np.ndarray, t: np.ndarray, w: Optional[np.ndarray],
                      pi: np.ndarray, nu: Optional[float]) -> float:
        """Rough theta1 from the weighting-only equation on pooled rows.

        ``pi`` holds cross-fitted propensity-type values (treatment
        propensity for the incomplete-data family, instrument propensity
        for the local quantile).
        """
        raise NotImplementedError

    # -- bookkeeping ----------------------------------------------------------

    def assemble(self, preds: dict, nu: Optional[float]) -> NuisanceValues:
        """Pack per-task prediction arrays into NuisanceValues."""
        raise NotImplementedError

    def propensity_values(self, raw: np.ndarray) -> np.ndarray:
        """Arm-specific propensity from the canonical P(T=1|X) prediction."""
        return raw if self.arm == 1 else 1.0 - raw


def _ipw_quantile_init(y, t, pi, gamma, arm, scale=1.0):
    ind = t == arm
    return solve_step_equation(
        y[ind], scale / (pi[ind] * len(y)), -gamma, monotone=bool(scale > 0)
    )


# -- quantile ------------------------------------------------------------------

class QuantileMoment(MomentModel):
    """Efficient quantile estimating equation under ignorable treatment."""

    def __init__(self, gamma: float, arm: int = 1):
        _check_gamma(gamma)
        self.gamma = float(gamma)
        self.arm = int(arm)
        self.name = "quantile"
        self.d = self.d1 = 1
        self.jacobian_recipe = "kde_quantile"
        self.solver_hint = "monotone_step"
        self.tasks = (
            NuisanceTask("outcome_cdf", True, "probability", "treated",
                         lambda y, t, w, th: (y <= th).astype(np.float64)),
            NuisanceTask("propensity", False, "probability", "all",
                         lambda y, t, w, th: t.astype(np.float64)),
        )

    def assemble(self, preds, nu):
        return NuisanceValues(
            eta1=preds["outcome_cdf"][:, None],
            eta2=self.propensity_values(preds["propensity"]),
        )

    def psi(self, table, theta, nuis):
        ind = self.indicator(table)
        u = (table.outcome <= theta[0]).astype(np.float64)
        e1 = nuis.eta1[:, 0]
        out = ind * (u - e1) / nuis.eta2 + e1 - self.gamma
        return out[:, None]

    def step_parts(self, table, nuis):
        ind = table.treatment == self.arm
        n = table.n
        e1 = nuis.eta1[:, 0]
        offset = float(np.mean(-np.where(ind, e1 / nuis.eta2, 0.0) + e1) - self.gamma)
        return StepParts(table.outcome[ind], 1.0 / (nuis.eta2[ind] * n), offset)

    def solve_initial(self, y, t, w, pi, nu):
        return _ipw_quantile_init(y, t, pi, self.gamma, self.arm)


# -- quantile + CVaR -----------------------------------------------------------

class QuantileCvarMoment(MomentModel):
    """Joint quantile / conditional-value-at-risk equation (d = 2)."""

    def __init__(self, gamma: float, arm: int = 1):
        _check_gamma(gamma)
        self.gamma = float(gamma)
        self.arm = int(arm)
        self.name = "quantile_cvar"
        self.d = 2
        self.d1 = 1
        self.jacobian_recipe = "qcvar_block"
        self.solver_hint = "monotone_step"
        self.tasks = (
            NuisanceTask("outcome_cdf", True, "probability", "treated",
                         lambda y, t, w, th: (y <= th).astype(np.float64)),
            NuisanceTask("exceedance", True, "real", "treated",
                         lambda y, t, w, th: np.maximum(y - th, 0.0)),
            NuisanceTask("propensity", False, "probability", "all",
                         lambda y, t, w, th: t.astype(np.float64)),
        )

    def assemble(self, preds, nu):
        return NuisanceValues(
            eta1=np.column_stack([preds["outcome_cdf"], preds["exceedance"]]),
            eta2=self.propensity_values(preds["propensity"]),
        )

    def psi(self, table, theta, nuis):
        g = self.gamma
        ind = self.indicator(table)
        y = table.outcome
        e11, e12 = nuis.eta1[:, 0], nuis.eta1[:, 1]
        u1 = (y <= theta[0]).astype(np.float64)
        u2 = np.maximum(y - theta[0], 0.0)
        psi1 = ind * (u1 - e11) / nuis.eta2 + e11 - g
        psi2 = ind * (u2 - e12) / ((1.0 - g) * nuis.eta2) + theta[0] + e12 / (1.0 - g) - theta[1]
        return np.column_stack([psi1, psi2])

    def step_parts(self, table, nuis):
        ind = table.treatment == self.arm
        n = table.n
        e11 = nuis.eta1[:, 0]
        offset = float(np.mean(-np.where(ind, e11 / nuis.eta2, 0.0) + e11) - self.gamma)
        return StepParts(table.outcome[ind], 1.0 / (nuis.eta2[ind] * n), offset)

    def complete_theta(self, table, nuis, theta1):
        g = self.gamma
        ind = self.indicator(table)
        e12 = nuis.eta1[:, 1]
        u2 = np.maximum(table.outcome - theta1, 0.0)
        theta2 = theta1 + float(np.mean(ind * (u2 - e12) / nuis.eta2 + e12)) / (1.0 - g)
        return np.array([theta1, theta2])

    def solve_initial(self, y, t, w, pi, nu):
        return _ipw_quantile_init(y, t, pi, self.gamma, self.arm)


# -- expectile -----------------------------------------------------------------

class ExpectileMoment(MomentModel):
    """Asymmetric-least-squares (expectile) estimating equation."""

    def __init__(self, gamma: float, arm: int = 1):
        _check_gamma(gamma)
        self.gamma = float(gamma)
        self.arm = int(arm)
        self.name = "expectile"
        self.d = self.d1 = 1
        self.jacobian_recipe = "expectile_cdf"
        self.solver_hint = "bisection"
        self.tasks = (
            NuisanceTask("exceedance", True, "real", "treated",
                         lambda y, t, w, th: np.maximum(y - th, 0.0)),
            NuisanceTask("outcome_mean", False, "real", "treated",
                         lambda y, t, w, th: y.astype(np.float64)),
            NuisanceTask("propensity", False, "probability", "all",
                         lambda y, t, w, th: t.astype(np.float64)),
        )

    def assemble(self, preds, nu):
        return NuisanceValues(
            eta1=preds["exceedance"][:, None],
            eta2=self.propensity_values(preds["propensity"]),
            aux=preds["outcome_mean"],
        )

    def psi(self, table, theta, nuis):
        g = self.gamma
        ind = self.indicator(table)
        y = table.outcome
        e1 = nuis.eta1[:, 0]
        mu = nuis.aux
        inner = (1.0 - g) * (y - mu) - (1.0 - 2.0 * g) * (np.maximum(y - theta[0], 0.0) - e1)
        out = ind * inner / nuis.eta2 + (1.0 - g) * (mu - theta[0]) - (1.0 - 2.0 * g) * e1
        return out[:, None]

    def solve_initial(self, y, t, w, pi, nu):
        g = self.gamma
        ind = t == self.arm
        wts = np.where(ind, 1.0 / pi, 0.0)

        def f(th):
            u = (1.0 - g) * (y - th) - (1.0 - 2.0 * g) * np.maximum(y - th, 0.0)
            return float(np.mean(wts * u))

        return solve_decreasing_root(f, float(y.min()) - 1.0, float(y.max()) + 1.0)


# -- local quantile (instrumented) ----------------------------------------------

class LqteMoment(MomentModel):
    """Local (complier) quantile estimating equation using a binary instrument."""

    def __init__(self, gamma: float, arm: int = 1):
        _check_gamma(gamma)
        self.gamma = float(gamma)
        self.arm = int(arm)
        self.name = "lqte"
        self.d = self.d1 = 1
        self.jacobian_recipe = "kde_lqte"
        self.solver_hint = "step_scan_then_linear"
        self.requires_instrument = True
        self.initializer = "lqte_weighting"
        self.uses_nu = True
        ind_target = (lambda y, t, w, th:
                      ((t == self.arm) & (y <= th)).astype(np.float64))
        self.tasks = (
            NuisanceTask("joint_cdf_w1", True, "probability", "w1", ind_target),
            NuisanceTask("joint_cdf_w0", True, "probability", "w0", ind_target),
            NuisanceTask("instrument_propensity", False, "probability", "all",
                         lambda y, t, w, th: w.astype(np.float64)),
        )

    @property
    def _sign(self) -> float:
        return 1.0 if self.arm == 1 else -1.0

    def assemble(self, preds, nu):
        return NuisanceValues(
            eta1=np.column_stack([preds["joint_cdf_w1"], preds["joint_cdf_w0"]]),
            eta2=preds["instrument_propensity"],
            nu=nu,
        )

    def _check_instrument(self, table):
        if table.instrument is None:
            raise MissingInstrument("lqte requires an instrument column")

    def psi(self, table, theta, nuis):
        self._check_instrument(table)
        w = table.instrument.astype(np.float64)
        ind = self.indicator(table)
        u = ind * (table.outcome <= theta[0])
        e11, e12 = nuis.eta1[:, 0], nuis.eta1[:, 1]
        pw = nuis.eta2
        bracket = (e11 - e12
                   + w / pw * (u - e11)
                   - (1.0 - w) / (1.0 - pw) * (u - e12))
        out = self._sign * bracket / nuis.nu - self.gamma
        return out[:, None]

    def step_parts(self, table, nuis):
        self._check_instrument(table)
        w = table.instrument.astype(np.float64)
        ind = table.treatment == self.arm
        pw = nuis.eta2
        e11, e12 = nuis.eta1[:, 0], nuis.eta1[:, 1]
        signed = (w / pw - (1.0 - w) / (1.0 - pw)) * self._sign / nuis.nu
        const = self._sign * (e11 - e12 - w / pw * e11
                              + (1.0 - w) / (1.0 - pw) * e12) / nuis.nu
        offset = float(np.mean(const) - self.gamma)
        return StepParts(table.outcome[ind], signed[ind] / table.n, offset)

    def solve_initial(self, y, t, w, pi, nu):
        ind = t == self.arm
        signed = (np.where(w == 1, 1.0 / pi, -1.0 / (1.0 - pi))
                  * self._sign / nu / len(y))
        return solve_step_equation(y[ind], signed[ind], -self.gamma, monotone=False)


# -- pure weighting (IPW) estimating equations -----------------------------------

class IpwMoment(MomentModel):
    """Weighting-only equation: indicator * U(y; theta1) / propensity + V(theta).

    Has no estimand-dependent nuisance, so the cross-fitting scheme reduces
    to plain K-fold cross-fitted IPW and no initial estimate is needed.
    """

    def __init__(self, u: Callable, v: Callable, d: int, d1: int, gamma: float,
                 arm: int = 1, solver_hint: str = "monotone_step",
                 jacobian_recipe: str = "kde_quantile", name: str = "ipw"):
        _check_gamma(gamma)
        self.gamma = float(gamma)
        self.arm = int(arm)
        self.name = name
        self.d = d
        self.d1 = d1
        self.u = u
        self.v = v
        self.jacobian_recipe = jacobian_recipe
        self.solver_hint = solver_hint
        self.initializer = "none"
        self.tasks = (
            NuisanceTask("propensity", False, "probability", "all",
                         lambda y, t, w, th: t.astype(np.float64)),
        )

    def assemble(self, preds, nu):
        n = len(preds["propensity"])
        return NuisanceValues(
            eta1=np.zeros((n, 1)),
            eta2=self.propensity_values(preds["propensity"]),
        )

    def psi(self, table, theta, nuis):
        ind = self.indicator(table)
        u = np.atleast_2d(np.asarray(self.u(table.outcome, theta[:self.d1])))
        if u.shape[0] != table.n:
            u = u.T
        v = np.asarray(self.v(theta), dtype=np.float64)
        return (ind / nuis.eta2)[:, None] * u + v[None, :]

    def step_parts(self, table, nuis):
        ind = table.treatment == self.arm
        return StepParts(
            table.outcome[ind],
            1.0 / (nuis.eta2[ind] * table.n),
            float(self.v(np.zeros(self.d))[0]),
        )


def ipw_quantile_moment(gamma: float, arm: int = 1) -> IpwMoment:
    """Cross-fitted IPW quantile equation (also the quantile initializer)."""
    return IpwMoment(
        u=lambda y, th: (y <= th[0]).astype(np.float64)[:, None],
        v=lambda theta: np.array([-gamma]),
        d=1, d1=1, gamma=gamma, arm=arm,
        solver_hint="monotone_step", name="ipw_quantile",
    )


def ipw_moment(u: Callable, v: Callable, d: int, d1: int, gamma: float,
               arm: int = 1, solver_hint: str = "monotone_step") -> IpwMoment:
    """Weighting-only moment for a user-supplied complete-data pair (U, V)."""
    return IpwMoment(u=u, v=v, d=d, d1=d1, gamma=gamma, arm=arm,
                     solver_hint=solver_hint)


# -- generic incomplete-data moment ----------------------------------------------

class IncompleteDataMoment(MomentModel):
    """Orthogonal equation for a user-supplied complete-data pair (U, V).

    ``u(y, theta1)`` returns an (n, d) matrix, ``v(theta)`` a length-d
    vector, and ``labels`` names one regression task per U component
    (fitted among rows with T equal to ``arm``).  Solving supports scalar
    theta1 via bisection (continuous U) or a candidate scan over observed
    outcomes of the first component's mean equation.
    """

    def __init__(self, u, v, d, d1, gamma,
                 labels: Sequence[Tuple[str, bool, str]], arm: int = 1,
                 solver_hint: str = "bisection",
                 jacobian_recipe: str = "kde_quantile", name: str = "custom"):
        _check_gamma(gamma)
        if d1 != 1:
            raise ValueError("generic incomplete-data moments support d1=1 only")
        self.gamma = float(gamma)
        self.arm = int(arm)
        self.name = name
        self.d = d
        self.d1 = d1
        self.u = u
        self.v = v
        self.solver_hint = solver_hint
        self.jacobian_recipe = jacobian_recipe
        self._label_names = [nm for nm, _, _ in labels]
        tasks = []
        for j, (nm, depends, kind) in enumerate(labels):
            tasks.append(NuisanceTask(
                nm, depends, kind, "treated",
                (lambda jj: lambda y, t, w, th:
                    np.asarray(np.atleast_2d(u(y, np.array([th])))).reshape(len(y), -1)[:, jj])(j),
            ))
        tasks.append(NuisanceTask("propensity", False, "probability", "all",
                                  lambda y, t, w, th: t.astype(np.float64)))
        self.tasks = tuple(tasks)

    def assemble(self, preds, nu):
        return NuisanceValues(
            eta1=np.column_stack([preds[nm] for nm in self._label_names]),
            eta2=self.propensity_values(preds["propensity"]),
        )

    def psi(self, table, theta, nuis):
        ind = self.indicator(table)
        u = np.asarray(self.u(table.outcome, theta[:1])).reshape(table.n, -1)
        v = np.asarray(self.v(theta), dtype=np.float64)
        return (ind / nuis.eta2)[:, None] * (u - nuis.eta1) + nuis.eta1 + v[None, :]

    def solve_theta1(self, table, nuis):
        if self.solver_hint == "bisection":
            return solve_decreasing_root(
                lambda th: float(self.residual(table, self._pad(th), nuis)[0]),
                lo=float(table.outcome.min()) - 1.0,
                hi=float(table.outcome.max()) + 1.0,
            )
        cands = np.unique(table.outcome[table.treatment == self.arm])
        vals = np.array([
            abs(float(self.residual(table, self._pad(c), nuis)[0])) for c in cands
        ])
        return float(cands[int(np.argmin(vals))])

    def _pad(self, theta1: float) -> np.ndarray:
        return np.concatenate([[theta1], np.zeros(self.d - 1)])

    def solve_initial(self, y, t, w, pi, nu):
        ind = t == self.arm
        wts = np.where(ind, 1.0 / pi, 0.0)

        def f(th):
            u = np.asarray(self.u(y, np.array([th]))).reshape(len(y), -1)[:, 0]
            return float(np.mean(wts * u)) + float(self.v(self._pad(th))[0])

        if self.solver_hint == "bisection":
            return solve_decreasing_root(f, float(y.min()) - 1.0, float(y.max()) + 1.0)
        cands = np.unique(y[ind])
        vals = np.array([abs(f(c)) for c in cands])
        return float(cands[int(np.argmin(vals))])


def incomplete_data_moment(u, v, d, d1, gamma, labels, arm=1,
                           solver_hint="bisection") -> IncompleteDataMoment:
    return IncompleteDataMoment(u, v, d, d1, gamma, labels, arm=arm,
                                solver_hint=solver_hint)


# -- factories -------------------------------------------------------------------

def _check_gamma(gamma: float):
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")


def quantile_moment(gamma: float, arm: int = 1) -> QuantileMoment:
    return QuantileMoment(gamma, arm)


def quantile_cvar_moment(gamma: float, arm: int = 1) -> QuantileCvarMoment:
    return QuantileCvarMoment(gamma, arm)


def expectile_moment(gamma: float, arm: int = 1) -> ExpectileMoment:
    return ExpectileMoment(gamma, arm)


def lqte_moment(gamma: float, arm: int = 1) -> LqteMoment:
    return LqteMoment(gamma, arm)


MOMENT_FACTORIES = {
    "quantile": quantile_moment,
    "quantile_cvar": quantile_cvar_moment,
    "expectile": expectile_moment,
    "lqte": lqte_moment,
    "ipw_quantile": ipw_quantile_moment,
}
