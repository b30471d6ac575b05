"""Ergodic triple (v, lambda) by two independent estimators.

The ergodic BSDE

    Y_t = Y_T + int_t^T (f(X_s, Z_s) - lambda) ds - int_t^T Z_s dW_s

has a solution Y = v(X), Z = grad v . G with v(0) = 0.  Two estimators:

* discounted construction: for a vanishing discount alpha, solve the
  finite-horizon BSDE with driver f(x, z) - alpha y over the horizon
  T_alpha = horizon_factor / alpha with terminal 0 (the y-damping is the
  standard contractive device and is handled implicitly).  Then
  alpha Y_0^alpha(0) -> lambda, and the value field at a late mixed time
  minus its value at 0 -> v.  A Richardson step over the last two alphas
  removes the leading O(alpha) bias; the extrapolation distance is
  reported as the confidence half-width.

* finite-horizon slope: Y_0^{T,x} grows like lambda T + O(1), so a least
  squares line through (T, Y_0^{T,x}) estimates lambda; the accompanying
  bound report checks the shape of |Y_0^{T,x}/T - lambda|.

``cross_check`` compares the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .basis import RegressionBasis, fit_least_squares
from .bsde import solve_bsde_from
from .model import DriverSpec, Model, TerminalKind, TerminalSpec

# time (in units of 1/eta) the ensemble needs to forget x0; the v field
# is read no earlier than this
MIXING_MULTIPLE = 4.0


class NonMonotoneAlphaError(ValueError):
    pass


class DiscountedDivergedError(RuntimeError):
    """|Y_0^alpha| violated the growth sanity bound."""


@dataclass(frozen=True)
class ErgodicSolution:
    """lambda with a confidence half-width, and regression representations
    of v (normalised to v(0) = 0) and of the field x -> grad v(x) G."""

    lambda_: float
    lambda_ci: float
    v_coeffs: np.ndarray            # (B,)
    z_coeffs: np.ndarray            # (B, d)
    basis: RegressionBasis
    method_tags: dict

    def v(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        phi = self.basis.design(np.atleast_2d(x))
        out = phi @ self.v_coeffs
        return float(out[0]) if single else out

    def z(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        phi = self.basis.design(np.atleast_2d(x))
        out = phi @ self.z_coeffs
        return out[0] if single else out


def exact_ergodic_solution(model: Model, lambda_: float,
                           v: Callable[[np.ndarray], np.ndarray],
                           basis: RegressionBasis,
                           half_width: float = 4.0) -> ErgodicSolution:
    """ErgodicSolution from closed-form (lambda, v), e.g. preset data.

    v is fitted on a deterministic grid; exact (up to roundoff) whenever
    v lies in the span of the basis, which covers every preset.
    """
    d = basis.dim_in
    grid_1d = np.linspace(-half_width, half_width, max(10 * basis.n_functions, 50))
    if d == 1:
        pts = grid_1d[:, None]
    else:
        rng = np.random.default_rng(12345)
        pts = rng.uniform(-half_width, half_width, size=(10 * basis.n_functions, d))
    phi = basis.design(pts)
    v_coeffs, _ = fit_least_squares(phi, np.asarray(v(pts), dtype=float))
    # normalise v(0) = 0 through the constant component
    v0 = float(basis.design(np.zeros((1, d))) @ v_coeffs)
    v_coeffs = v_coeffs - basis.constant_coefficients(v0)
    # z = grad v . G by central differences on the fitted field
    eps = 1e-5
    grad_cols = []
    for k in range(model.dim):
        e = np.zeros(d)
        e[k] = eps
        grad_cols.append((np.asarray(v(pts + e)) - np.asarray(v(pts - e))) / (2 * eps))
    grad = np.column_stack(grad_cols) @ model.g_matrix
    z_coeffs, _ = fit_least_squares(phi, grad)
    return ErgodicSolution(lambda_=float(lambda_), lambda_ci=0.0,
                           v_coeffs=v_coeffs, z_coeffs=z_coeffs, basis=basis,
                           method_tags={"estimator": "closed-form"})


def solve_ebsde_discounted(model: Model, driver: DriverSpec, alpha_schedule,
                           horizon_factor: float, basis: RegressionBasis,
                           steps_per_unit: int, paths: int,
                           seed: int, picard_iters: int = 2) -> ErgodicSolution:
    """Vanishing-discount estimate of (v, lambda).

    alpha_schedule must be strictly decreasing with at least two entries;
    all solves share the seed, so they run on common random numbers (the
    shorter horizons read a prefix of the longest increment stream).
    """
    alphas = [float(a) for a in alpha_schedule]
    if len(alphas) < 2:
        raise NonMonotoneAlphaError("need at least two alpha values to extrapolate")
    if any(a <= 0 for a in alphas) or any(b >= a for a, b in zip(alphas, alphas[1:])):
        raise NonMonotoneAlphaError("alpha schedule must be positive and strictly decreasing")

    terminal = TerminalSpec(kind=TerminalKind.STATE,
                            g=lambda x: np.zeros(x.shape[:-1]), growth_mu=0.0)
    growth_c = driver.validate(model.dim)
    x0 = np.zeros(model.dim)

    lam, lam_se, v_list, z_list = [], [], [], []
    for alpha in alphas:
        horizon = horizon_factor / alpha
        steps = max(1, int(math.ceil(horizon * steps_per_unit)))
        sol = solve_bsde_from(model, driver, terminal, x0, horizon, steps, basis,
                              paths, seed, picard_iters, discount_alpha=alpha)
        sanity = 50.0 * (growth_c + 1.0) * (1.0 / alpha + 1.0)
        if abs(sol.y0) > sanity:
            raise DiscountedDivergedError(
                "|Y0^alpha| = %.3g exceeds the growth sanity bound %.3g at alpha=%.3g"
                % (abs(sol.y0), sanity, alpha))
        lam.append(alpha * sol.y0)
        lam_se.append(alpha * sol.y0_std_error)
        # value field at a late mixed time: x0 is forgotten, the remaining
        # horizon still looks infinite to the discount
        t_star = max(MIXING_MULTIPLE / model.eta, horizon / 2.0)
        n_star = min(steps - 1, sol.time_index(t_star))
        vc = sol.y_coeffs[n_star].copy()
        v0 = float(basis.design(np.zeros((1, basis.dim_in))) @ vc)
        v_list.append(vc - basis.constant_coefficients(v0))
        z_list.append(sol.z_coeffs[n_star])

    # Richardson step over the last two alphas: removes the O(alpha) bias
    a1, a2 = alphas[-2], alphas[-1]
    w = a2 / (a1 - a2)
    lam_ext = lam[-1] + (lam[-1] - lam[-2]) * w
    v_ext = v_list[-1] + (v_list[-1] - v_list[-2]) * w
    z_ext = z_list[-1] + (z_list[-1] - z_list[-2]) * w
    v0 = float(basis.design(np.zeros((1, basis.dim_in))) @ v_ext)
    v_ext = v_ext - basis.constant_coefficients(v0)
    lambda_ci = abs(lam_ext - lam[-1]) + 2.0 * lam_se[-1]

    tags = {"estimator": "discounted", "alphas": alphas,
            "horizon_factor": float(horizon_factor),
            "lambda_per_alpha": [float(v) for v in lam],
            "lambda_se_per_alpha": [float(v) for v in lam_se]}
    return ErgodicSolution(lambda_=float(lam_ext), lambda_ci=float(lambda_ci),
                           v_coeffs=v_ext, z_coeffs=z_ext, basis=basis,
                           method_tags=tags)


@dataclass(frozen=True)
class BoundReport:
    """Shape checks of the first-behaviour estimate.

    ``markov_ratios`` holds |Y_0/T - lambda| T / (1 + |x|^{1+mu}); for a
    running-max terminal ``path_ratios`` divides by the extra (1+T^{1/4})
    factor of the path-dependent bound.  A shape passes when the ratios
    show no increasing trend beyond two standard errors of the fitted
    slope.
    """

    t_grid: np.ndarray
    y0_values: np.ndarray
    y0_std_errors: np.ndarray
    markov_ratios: np.ndarray
    markov_bounded: bool
    path_ratios: Optional[np.ndarray]
    path_bounded: Optional[bool]


@dataclass(frozen=True)
class LambdaSlopeEstimate:
    lambda_: float
    lambda_ci: float
    intercept: float
    bound_report: BoundReport

    def rows(self):
        rep = self.bound_report
        return [(float(t), float(y), float(se), float(y / t))
                for t, y, se in zip(rep.t_grid, rep.y0_values, rep.y0_std_errors)]


def _no_increasing_trend(values: np.ndarray, t: np.ndarray) -> bool:
    if values.size < 3:
        return True
    slope, intercept = np.polyfit(t, values, 1)
    resid = values - (slope * t + intercept)
    scale = math.sqrt(max(float(np.sum(resid ** 2)) / max(values.size - 2, 1), 1e-300))
    se = scale / math.sqrt(float(np.sum((t - t.mean()) ** 2)))
    return slope <= 2.0 * se


def estimate_lambda_slope(model: Model, driver: DriverSpec, terminal: TerminalSpec,
                          T_grid, x, basis: RegressionBasis, paths: int,
                          seed: int, steps_per_unit: int = 50,
                          picard_iters: int = 2) -> LambdaSlopeEstimate:
    """lambda from the slope of T -> Y_0^{T,x} over the grid.

    The solves share forward noise through the common seed.  Returns the
    estimate with a confidence half-width (2 x the larger of the
    residual-based and propagated slope standard errors) and the bound
    report on |Y_0^{T,x}/T - lambda|.
    """
    t_grid = np.asarray(T_grid, dtype=float)
    if t_grid.size < 3:
        raise ValueError("T_grid needs at least 3 points")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("T_grid must be strictly increasing")
    y0 = np.empty(t_grid.size)
    se = np.empty(t_grid.size)
    for i, T in enumerate(t_grid):
        steps = max(1, int(math.ceil(T * steps_per_unit)))
        sol = solve_bsde_from(model, driver, terminal, x, float(T), steps, basis,
                              paths, seed, picard_iters)
        y0[i] = sol.y0
        se[i] = sol.y0_std_error

    slope, intercept = np.polyfit(t_grid, y0, 1)
    resid = y0 - (slope * t_grid + intercept)
    spread = float(np.sum((t_grid - t_grid.mean()) ** 2))
    se_resid = math.sqrt(max(float(np.sum(resid ** 2)) / max(t_grid.size - 2, 1), 0.0)
                         / spread)
    weights = (t_grid - t_grid.mean()) / spread
    se_mc = math.sqrt(float(np.sum((weights * se) ** 2)))
    ci = 2.0 * max(se_resid, se_mc)

    mu = max(driver.growth_mu, terminal.growth_mu)
    xnorm = float(np.linalg.norm(np.asarray(x, dtype=float).reshape(-1)))
    defect = np.abs(y0 / t_grid - slope) * t_grid
    markov = defect / (1.0 + xnorm ** (1.0 + mu))
    path_ratios = None
    path_bounded = None
    if terminal.kind is TerminalKind.RUNNING_MAX:
        path_ratios = markov / (1.0 + t_grid ** 0.25)
        path_bounded = _no_increasing_trend(path_ratios, t_grid)
    report = BoundReport(t_grid=t_grid, y0_values=y0, y0_std_errors=se,
                         markov_ratios=markov,
                         markov_bounded=_no_increasing_trend(markov, t_grid),
                         path_ratios=path_ratios, path_bounded=path_bounded)
    return LambdaSlopeEstimate(lambda_=float(slope), lambda_ci=float(ci),
                               intercept=float(intercept), bound_report=report)


@dataclass(frozen=True)
class CrossCheckVerdict:
    passed: bool
    lambda_discounted: float
    lambda_slope: float
    ci_discounted: float
    ci_slope: float

    @property
    def gap(self) -> float:
        return abs(self.lambda_discounted - self.lambda_slope)


def cross_check(sol_discounted: ErgodicSolution,
                lambda_slope: LambdaSlopeEstimate) -> CrossCheckVerdict:
    """Agreement verdict: the two estimators must differ by at most twice
    the sum of their confidence half-widths."""
    gap = abs(sol_discounted.lambda_ - lambda_slope.lambda_)
    tol = 2.0 * (sol_discounted.lambda_ci + lambda_slope.lambda_ci)
    return CrossCheckVerdict(passed=bool(gap <= tol),
                             lambda_discounted=sol_discounted.lambda_,
                             lambda_slope=lambda_slope.lambda_,
                             ci_discounted=sol_discounted.lambda_ci,
                             ci_slope=lambda_slope.lambda_ci)
