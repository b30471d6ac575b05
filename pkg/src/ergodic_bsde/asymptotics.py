"""Large-time defect w_T(0, x) = Y_0^{T,x} - lambda T - v(x): computation,
limit-and-rate extraction and shape checks.

As the horizon grows, w_T(0, x) converges to a constant L, with an
exponentially small defect whose x-dependence is bounded by
C (1 + |x|^{2+mu}).  The operations here estimate w over a horizon grid
(coupled through a shared master seed, so the exponentially small
T-differences are not drowned by independent noise), fit
w_T = L + c exp(-rho T) and test the qualitative shape of the bounds.
The fit refuses to fabricate a rate from a flat-within-noise curve: the
degenerate path returns the mean with the rate flagged unresolved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import curve_fit

from .basis import RegressionBasis
from .bsde import solve_bsde_from
from .ergodic import ErgodicSolution
from .model import DriverSpec, Model, TerminalSpec


class FitDivergedError(RuntimeError):
    """Nonlinear fit failed; carries the raw (T, w, se) triples."""

    def __init__(self, message, triples):
        super().__init__(message)
        self.triples = triples


@dataclass(frozen=True)
class SolverParams:
    """Budgets shared by every solve inside one report."""

    paths: int
    steps_per_unit: int
    basis: RegressionBasis
    seed: int
    picard_iters: int = 2

    def steps_for(self, T: float) -> int:
        return max(1, int(math.ceil(T * self.steps_per_unit)))


def compute_w(model: Model, driver: DriverSpec, terminal: TerminalSpec,
              ergodic: ErgodicSolution, T: float, x, params: SolverParams):
    """(w, se) at one horizon: w = Y_0^{T,x} - lambda T - v(x).

    The standard error adds the BSDE level error and T times the lambda
    half-width (conservative, the two are independent estimates).
    """
    sol = solve_bsde_from(model, driver, terminal, x, float(T),
                          params.steps_for(T), params.basis, params.paths,
                          params.seed, params.picard_iters)
    x_arr = np.asarray(x, dtype=float).reshape(1, -1)
    w = sol.y0 - ergodic.lambda_ * T - float(ergodic.v(x_arr)[0])
    se = sol.y0_std_error + T * ergodic.lambda_ci
    return float(w), float(se)


def w_curve(model: Model, driver: DriverSpec, terminal: TerminalSpec,
            ergodic: ErgodicSolution, T_grid, x, params: SolverParams):
    """(T, w, se) triples over the horizon grid, all on the master seed."""
    return [(float(T), *compute_w(model, driver, terminal, ergodic, T, x, params))
            for T in np.asarray(T_grid, dtype=float)]


@dataclass(frozen=True)
class LimitRateFit:
    limit: float
    rate: Optional[float]          # None when flagged unresolved
    amplitude: Optional[float]
    resolved: bool
    residual_rms: float


def fit_limit_and_rate(triples) -> LimitRateFit:
    """Fit w_T = L + c exp(-rho T) to (T, w, se) triples.

    Initialisation: L from w at the largest T, rho from the log-slope of
    |w - L0| over the remaining points.  If the curve is flat within
    3 standard errors of its mean the fit degenerates on purpose:
    L = mean, rate unresolved.
    """
    data = np.asarray([(t, w, se) for t, w, se in triples], dtype=float)
    if data.shape[0] < 4:
        raise ValueError("need at least 4 grid points to fit a rate")
    t, w, se = data[:, 0], data[:, 1], data[:, 2]
    noise = np.maximum(se, 1e-15)
    if np.all(np.abs(w - w.mean()) < 3.0 * noise):
        return LimitRateFit(limit=float(w.mean()), rate=None, amplitude=None,
                            resolved=False,
                            residual_rms=float(np.sqrt(np.mean((w - w.mean()) ** 2))))

    l0 = w[-1]
    gaps = np.abs(w[:-1] - l0)
    usable = gaps > 0
    if np.count_nonzero(usable) >= 2:
        rho0 = -float(np.polyfit(t[:-1][usable], np.log(gaps[usable]), 1)[0])
        rho0 = min(max(rho0, 1e-3), 1e3)
    else:
        rho0 = 1.0
    c0 = (w[0] - l0) * math.exp(rho0 * t[0])

    def shape(tt, L, c, rho):
        return L + c * np.exp(-rho * tt)

    sigma = noise if np.all(se > 0) else None
    try:
        popt, _ = curve_fit(shape, t, w, p0=[l0, c0, rho0], sigma=sigma,
                            absolute_sigma=sigma is not None, maxfev=20000,
                            bounds=([-np.inf, -np.inf, 1e-6], [np.inf, np.inf, 1e4]))
    except (RuntimeError, ValueError) as exc:
        raise FitDivergedError("limit/rate fit diverged: %s" % exc,
                               [tuple(row) for row in data])
    if not np.all(np.isfinite(popt)):
        raise FitDivergedError("limit/rate fit returned non-finite parameters",
                               [tuple(row) for row in data])
    resid = w - shape(t, *popt)
    return LimitRateFit(limit=float(popt[0]), rate=float(popt[2]),
                        amplitude=float(popt[1]), resolved=True,
                        residual_rms=float(np.sqrt(np.mean(resid ** 2))))


def approximate_v_from_finite_horizon(model: Model, driver: DriverSpec,
                                      terminal: TerminalSpec, T: float, x,
                                      params: SolverParams):
    """(v_hat, se) with v_hat(x) = Y_0^{T,x} - Y_0^{T,0}.

    The two solves run on the same seed, so their forward ensembles share
    every increment and the difference is almost noise-free.
    """
    sol_x = solve_bsde_from(model, driver, terminal, x, float(T),
                            params.steps_for(T), params.basis, params.paths,
                            params.seed, params.picard_iters)
    sol_0 = solve_bsde_from(model, driver, terminal, np.zeros(model.dim), float(T),
                            params.steps_for(T), params.basis, params.paths,
                            params.seed, params.picard_iters)
    return (float(sol_x.y0 - sol_0.y0),
            float(sol_x.y0_std_error + sol_0.y0_std_error))


@dataclass(frozen=True)
class GrowthSweep:
    """|w_T(0,x) - w_T(0,0)| against the bound shape (1 + |x|^{2+mu})."""

    x_values: np.ndarray
    w_values: np.ndarray
    std_errors: np.ndarray
    gaps: np.ndarray               # |w(x) - w(0)|
    bound_shape: np.ndarray        # 1 + |x|^{2+mu}
    ratios: np.ndarray
    bounded: bool

    def rows(self):
        return [(float(x), float(w), float(s), float(g), float(b), float(r))
                for x, w, s, g, b, r in zip(self.x_values, self.w_values,
                                            self.std_errors, self.gaps,
                                            self.bound_shape, self.ratios)]


def x_growth_sweep(model: Model, driver: DriverSpec, terminal: TerminalSpec,
                   ergodic: ErgodicSolution, T_fixed: float, x_list,
                   params: SolverParams) -> GrowthSweep:
    """Sweep |w_T(0,x) - w_T(0,0)| over x at a fixed horizon.

    Verdict ``bounded``: the ratios to (1 + |x|^{2+mu}) show no
    increasing trend beyond two standard errors of a fitted slope.
    """
    xs = [np.atleast_1d(np.asarray(x, dtype=float)) for x in x_list]
    mu = max(driver.growth_mu, terminal.growth_mu)
    w0, se0 = compute_w(model, driver, terminal, ergodic, T_fixed,
                        np.zeros(model.dim), params)
    w = np.empty(len(xs))
    se = np.empty(len(xs))
    for i, x in enumerate(xs):
        w[i], se[i] = compute_w(model, driver, terminal, ergodic, T_fixed, x, params)
    norms = np.array([float(np.linalg.norm(x)) for x in xs])
    gaps = np.abs(w - w0)
    shape = 1.0 + norms ** (2.0 + mu)
    ratios = gaps / shape
    if len(xs) >= 3:
        slope = float(np.polyfit(norms, ratios, 1)[0])
        resid = ratios - np.polyval(np.polyfit(norms, ratios, 1), norms)
        scale = math.sqrt(max(float(np.sum(resid ** 2)) / max(len(xs) - 2, 1), 1e-300))
        se_slope = scale / math.sqrt(float(np.sum((norms - norms.mean()) ** 2)))
        bounded = slope <= 2.0 * se_slope + 1e-12
    else:
        bounded = bool(ratios[-1] <= ratios[0] + 3.0 * (se[-1] + se[0]))
    return GrowthSweep(x_values=norms, w_values=w, std_errors=se, gaps=gaps,
                       bound_shape=shape, ratios=ratios, bounded=bool(bounded))


@dataclass(frozen=True)
class AsymptoticsReport:
    """w over a horizon grid with the fitted limit/rate and bound verdicts."""

    x: np.ndarray
    T_grid: np.ndarray
    w_values: np.ndarray
    std_errors: np.ndarray
    fit: LimitRateFit
    monotone_defect: bool          # |w - L| decreasing, at most 1 inversion
    rate_positive: Optional[bool]
    rate_exceeds_2eta: Optional[bool]
    growth_sweep: Optional[GrowthSweep] = field(default=None)

    def rows(self):
        gap = np.abs(self.w_values - self.fit.limit)
        return [(float(t), float(w), float(s), float(g))
                for t, w, s, g in zip(self.T_grid, self.w_values,
                                      self.std_errors, gap)]


def build_report(model: Model, driver: DriverSpec, terminal: TerminalSpec,
                 ergodic: ErgodicSolution, T_grid, x, params: SolverParams,
                 x_sweep: Optional[list] = None) -> AsymptoticsReport:
    """Full second/third-behaviour report at one starting point."""
    triples = w_curve(model, driver, terminal, ergodic, T_grid, x, params)
    t = np.array([row[0] for row in triples])
    w = np.array([row[1] for row in triples])
    se = np.array([row[2] for row in triples])
    fit = fit_limit_and_rate(triples)

    gap = np.abs(w - fit.limit)
    tol = 2.0 * (se[:-1] + se[1:])
    inversions = int(np.count_nonzero(gap[1:] > gap[:-1] + tol))
    rate_positive = None
    rate_exceeds = None
    if fit.resolved:
        rate_positive = fit.rate > 0.0
        rate_exceeds = fit.rate > 2.0 * model.eta + 1e-12
    sweep = None
    if x_sweep:
        sweep = x_growth_sweep(model, driver, terminal, ergodic,
                               float(t[-1]), x_sweep, params)
    return AsymptoticsReport(x=np.atleast_1d(np.asarray(x, dtype=float)),
                             T_grid=t, w_values=w, std_errors=se, fit=fit,
                             monotone_defect=inversions <= 1,
                             rate_positive=rate_positive,
                             rate_exceeds_2eta=rate_exceeds,
                             growth_sweep=sweep)
