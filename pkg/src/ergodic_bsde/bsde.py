"""Backward least-squares Monte-Carlo solver for the finite-horizon BSDE

    Y_s = xi_T + int_s^T f(X_r, Z_r) dr - int_s^T Z_r dW_r,

with xi_T = g(X_T) (Markovian) or a function of (X_T, sup_s |X_s|)
(running-max augmentation, which keeps the backward recursion Markovian
in the pair).  Y_0 at the starting point is the value u(T, x0) of the
associated HJB problem and Z is the gradient field grad u . G.

One backward step from the per-path values V ~ Y_{t_{n+1}}:

    Z_{t_n}: regress V dW_n^T / h on the basis at X_{t_n},
    Y_{t_n}: regress V + h f(X_{t_n}, Z_{t_n}) on the basis at X_{t_n},

with the driver step iterated `picard_iters` times; after each Y fit the
Z regressand is re-centred as (V - Yhat(X_{t_n})) dW_n^T / h, which has
the same conditional expectation and far lower variance (for z-free
drivers the centred fit is exactly zero).  The driver never depends on
y; the discounted ergodic construction passes ``discount_alpha`` > 0,
handled implicitly by dividing each fitted level by (1 + alpha h).

Time 0 is deterministic (all paths at x0), so the last step uses plain
means instead of a regression and Y_0 is the empirical mean of the
time-0 conditional value.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import (RegressionBasis, basis_from_descriptor, fit_least_squares,
                    assemble_gram)
from .model import DriverSpec, Model, TerminalKind, TerminalSpec
from .sde import PathEnsemble, simulate_paths

ENVELOPE_QUANTILES = (0.0025, 0.9975)


class NonFiniteYError(RuntimeError):
    """Backward recursion produced non-finite values."""


class ExtrapolationWarning(UserWarning):
    """Field evaluated outside the 99.5% envelope of the forward ensemble."""


@dataclass(frozen=True)
class StepDiagnostics:
    """Per-step regression health: condition numbers, ridge activations
    and the RMS residual of the Y fit."""

    condition_numbers: np.ndarray   # (N,)
    ridge_flags: np.ndarray         # (N,) bool
    y_residual_rms: np.ndarray      # (N,)


@dataclass(frozen=True)
class BsdeSolution:
    """Regression representation of (Y, Z) on the time grid.

    y_coeffs[n] represents x -> Y_{t_n}(x); z_coeffs[n] represents
    x -> Z_{t_n}(x) for n < N (the terminal index reuses n = N-1 by the
    one-sided convention).  ``envelope[n, k]`` holds the (0.25%, 99.75%)
    quantiles of feature k of the forward ensemble at t_n; evaluations
    outside it carry an ExtrapolationWarning.
    """

    times: np.ndarray
    basis: RegressionBasis
    y_coeffs: np.ndarray            # (N+1, B)
    z_coeffs: np.ndarray            # (N, B, d)
    y0: float
    y0_std_error: float
    x0: np.ndarray
    envelope: np.ndarray            # (N+1, dim_in, 2)
    diagnostics: StepDiagnostics

    @property
    def n_steps(self) -> int:
        return self.z_coeffs.shape[0]

    @property
    def step_size(self) -> float:
        return float(self.times[1] - self.times[0])

    def time_index(self, t: float) -> int:
        return int(np.clip(round(t / self.step_size), 0, self.n_steps))


def _features(ensemble: PathEnsemble, n: int, augmented: bool) -> np.ndarray:
    if augmented:
        return np.column_stack([ensemble.states[:, n], ensemble.running_max[:, n]])
    return ensemble.states[:, n]


def _backward_sweep(model: Model, ensemble: PathEnsemble, driver: DriverSpec,
                    terminal_values: np.ndarray, basis: RegressionBasis,
                    picard_iters: int, discount_alpha: float = 0.0):
    """Shared backward engine; returns the arrays of a BsdeSolution."""
    m, n_steps = ensemble.n_paths, ensemble.n_steps
    d = model.dim
    h = ensemble.step_size
    augmented = ensemble.running_max is not None and basis.dim_in == d + 1
    nb = basis.n_functions
    damp = 1.0 + discount_alpha * h

    y_coeffs = np.zeros((n_steps + 1, nb))
    z_coeffs = np.zeros((n_steps, nb, d))
    conds = np.zeros(n_steps)
    ridges = np.zeros(n_steps, dtype=bool)
    resid = np.zeros(n_steps)
    envelope = np.empty((n_steps + 1, basis.dim_in, 2))
    for n in range(n_steps + 1):
        feats = _features(ensemble, n, augmented)
        envelope[n] = np.quantile(feats, ENVELOPE_QUANTILES, axis=0).T

    v = np.asarray(terminal_values, dtype=float)
    # terminal field stored as the best-effort projection of g
    phi_term = basis.design(_features(ensemble, n_steps, augmented))
    y_coeffs[n_steps], _ = fit_least_squares(phi_term, v)

    # pathwise telescoped value: every projection preserves sample means
    # (the basis contains constants), so y0 = mean(pathwise) up to roundoff
    # and std(pathwise)/sqrt(M) is the honest Monte-Carlo standard error
    pathwise = v * damp ** (-n_steps)

    for n in range(n_steps - 1, 0, -1):
        feats = _features(ensemble, n, augmented)
        states = ensemble.states[:, n]
        dw = ensemble.increments[:, n]
        phi = basis.design(feats)
        gram = assemble_gram(phi)

        zc, z_info = fit_least_squares(phi, v[:, None] * dw / h, gram=gram)
        step_cond = z_info.condition_number
        step_ridge = z_info.ridge_used
        yc = None
        fitted = None
        for k in range(max(1, picard_iters)):
            z_vals = phi @ zc
            y_target = v + h * driver.f(states, z_vals)
            yc, y_info = fit_least_squares(phi, y_target, gram=gram)
            fitted = phi @ yc
            step_cond = max(step_cond, y_info.condition_number)
            step_ridge = step_ridge or y_info.ridge_used
            if k < picard_iters - 1:
                zc, z_info = fit_least_squares(phi, (v - fitted)[:, None] * dw / h,
                                               gram=gram)
                step_cond = max(step_cond, z_info.condition_number)
                step_ridge = step_ridge or z_info.ridge_used
        resid[n] = float(np.sqrt(np.mean((y_target - fitted) ** 2)))
        conds[n] = step_cond
        ridges[n] = step_ridge
        y_coeffs[n] = yc / damp
        z_coeffs[n] = zc
        pathwise += damp ** (-(n + 1)) * (y_target - v)   # = h f(X_n, Z_n) terms
        v = fitted / damp
        if not np.isfinite(v).all():
            raise NonFiniteYError("non-finite Y values at step %d" % n)

    # time 0: deterministic state, conditional expectations are means
    x0 = ensemble.states[0, 0].copy()
    dw0 = ensemble.increments[:, 0]
    z0 = np.mean(v[:, None] * dw0, axis=0) / h
    x0_row = x0[None, :]
    y0_raw = None
    f0 = 0.0
    for k in range(max(1, picard_iters)):
        f0 = float(driver.f(x0_row, z0[None, :])[0])
        y0_raw = float(np.mean(v)) + h * f0
        if k < picard_iters - 1:
            z0 = np.mean((v - y0_raw)[:, None] * dw0, axis=0) / h
    y0 = y0_raw / damp
    pathwise += (h / damp) * f0
    y0_se = float(np.std(pathwise) / math.sqrt(m))
    if not math.isfinite(y0):
        raise NonFiniteYError("y0 is not finite")
    # time-0 fields are constants: value y0, gradient field z0
    y_coeffs[0] = basis.constant_coefficients(y0)
    for k in range(d):
        z_coeffs[0, :, k] = basis.constant_coefficients(z0[k])

    diagnostics = StepDiagnostics(condition_numbers=conds, ridge_flags=ridges,
                                  y_residual_rms=resid)
    return y_coeffs, z_coeffs, y0, y0_se, x0, envelope, diagnostics


def solve_bsde(model: Model, driver: DriverSpec, terminal: TerminalSpec,
               T: float, steps: int, basis: RegressionBasis, paths: int,
               seed: int, picard_iters: int = 2) -> BsdeSolution:
    """Solve the finite-horizon BSDE by backward regression.

    Parameters
    ----------
    basis : regression basis whose ``dim_in`` must be the model dimension,
        plus one when ``terminal.kind`` is RUNNING_MAX.
    picard_iters : driver sweeps per step; 2 engages the variance-reduced
        re-centred Z fit.

    Returns a BsdeSolution; ``y0`` is Y_0^{T, x0} with x0 = 0 unless set
    through ``solve_bsde_from``.
    """
    return solve_bsde_from(model, driver, terminal, np.zeros(model.dim), T,
                           steps, basis, paths, seed, picard_iters)


def solve_bsde_from(model: Model, driver: DriverSpec, terminal: TerminalSpec,
                    x0, T: float, steps: int, basis: RegressionBasis,
                    paths: int, seed: int, picard_iters: int = 2,
                    discount_alpha: float = 0.0) -> BsdeSolution:
    """solve_bsde with an explicit starting point (and, for the ergodic
    construction only, a linear damping -alpha y folded into the driver)."""
    augmented = terminal.kind is TerminalKind.RUNNING_MAX
    expected_dim = model.dim + 1 if augmented else model.dim
    if basis.dim_in != expected_dim:
        raise ValueError("basis.dim_in=%d, expected %d for terminal kind %s"
                         % (basis.dim_in, expected_dim, terminal.kind.value))
    ensemble = simulate_paths(model, x0, T, steps, paths, seed,
                              augment_max=augmented)
    term_feats = _features(ensemble, steps, augmented)
    terminal_values = np.asarray(terminal.g(term_feats), dtype=float)
    y_coeffs, z_coeffs, y0, y0_se, x0_arr, envelope, diag = _backward_sweep(
        model, ensemble, driver, terminal_values, basis, picard_iters,
        discount_alpha)
    return BsdeSolution(times=ensemble.times, basis=basis, y_coeffs=y_coeffs,
                        z_coeffs=z_coeffs, y0=y0, y0_std_error=y0_se,
                        x0=x0_arr, envelope=envelope, diagnostics=diag)


def evaluate_fields(sol: BsdeSolution, n: int, x):
    """(y, z) of the regression fields at grid index n and state(s) x.

    x may be a single feature vector or a batch (rows).  The terminal
    index returns the z field of the previous step (one-sided
    convention).  Points outside the stored ensemble envelope are still
    evaluated but carry an ExtrapolationWarning.
    """
    if not 0 <= n <= sol.n_steps:
        raise IndexError("time index %d outside 0..%d" % (n, sol.n_steps))
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != sol.envelope.shape[1]:
        raise ValueError("state dimension %d, expected %d"
                         % (pts.shape[1], sol.envelope.shape[1]))
    lo, hi = sol.envelope[n, :, 0], sol.envelope[n, :, 1]
    if np.any(pts < lo) or np.any(pts > hi):
        warnings.warn("evaluating outside the ensemble envelope at index %d" % n,
                      ExtrapolationWarning, stacklevel=2)
    phi = sol.basis.design(pts)
    y = phi @ sol.y_coeffs[n]
    z = np.einsum("mb,bd->md", phi, sol.z_coeffs[min(n, sol.n_steps - 1)])
    if single:
        return float(y[0]), z[0]
    return y, z


@dataclass(frozen=True)
class ResidualReport:
    per_step_rms: np.ndarray
    max_residual: float
    holdout_fraction: float
    n_holdout: int


def residual_diagnostics(sol: BsdeSolution, ensemble: PathEnsemble,
                         driver: DriverSpec,
                         holdout_fraction: float = 0.1) -> ResidualReport:
    """L2 defect of the one-step identity Y_n = Y_{n+1} + h f - Z dW on a
    held-out trailing slice of paths, per step; fields are evaluated from
    the stored regression representations."""
    if ensemble.n_steps != sol.n_steps or not np.allclose(ensemble.times, sol.times):
        raise ValueError("solution was not produced from this ensemble")
    m = ensemble.n_paths
    n_hold = max(1, int(math.ceil(holdout_fraction * m)))
    sl = slice(m - n_hold, m)
    h = sol.step_size
    augmented = ensemble.running_max is not None and sol.basis.dim_in > ensemble.states.shape[2]

    def field_values(n):
        phi = sol.basis.design(_features(ensemble, n, augmented)[sl])
        return phi, phi @ sol.y_coeffs[n]

    rms = np.empty(sol.n_steps)
    _, y_next = field_values(sol.n_steps)
    for n in range(sol.n_steps - 1, -1, -1):
        phi, y_here = field_values(n)
        z_here = np.einsum("mb,bd->md", phi, sol.z_coeffs[n])
        f_vals = driver.f(ensemble.states[sl, n], z_here)
        mart = np.einsum("md,md->m", z_here, ensemble.increments[sl, n])
        r = y_here - (y_next + h * f_vals - mart)
        rms[n] = float(np.sqrt(np.mean(r ** 2)))
        y_next = y_here
    return ResidualReport(per_step_rms=rms, max_residual=float(np.max(rms)),
                          holdout_fraction=holdout_fraction, n_holdout=n_hold)


FORMAT_VERSION = 1


def save_solution(sol: BsdeSolution, path) -> None:
    """Persist a solution as a versioned npz archive.

    Layout: ``format_version`` (int), ``basis`` (JSON descriptor),
    ``times``/``y_coeffs``/``z_coeffs``/``envelope`` arrays, scalars
    ``y0``/``y0_std_error``, ``x0``, and the diagnostics arrays.
    """
    np.savez(path,
             format_version=FORMAT_VERSION,
             basis=json.dumps(sol.basis.descriptor()),
             times=sol.times, y_coeffs=sol.y_coeffs, z_coeffs=sol.z_coeffs,
             y0=sol.y0, y0_std_error=sol.y0_std_error, x0=sol.x0,
             envelope=sol.envelope,
             cond=sol.diagnostics.condition_numbers,
             ridge=sol.diagnostics.ridge_flags,
             y_resid=sol.diagnostics.y_residual_rms)


def load_solution(path) -> BsdeSolution:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError("unsupported solution format %d" % version)
        basis = basis_from_descriptor(json.loads(str(data["basis"])))
        diag = StepDiagnostics(condition_numbers=data["cond"],
                               ridge_flags=data["ridge"],
                               y_residual_rms=data["y_resid"])
        return BsdeSolution(times=data["times"], basis=basis,
                            y_coeffs=data["y_coeffs"], z_coeffs=data["z_coeffs"],
                            y0=float(data["y0"]),
                            y0_std_error=float(data["y0_std_error"]),
                            x0=data["x0"], envelope=data["envelope"],
                            diagnostics=diag)
