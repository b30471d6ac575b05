"""Forward simulation of the dissipative OU dynamics, semigroup averages
and coupling-decay measurements.

The one-step update on the uniform grid t_n = n h is the exponential
Euler scheme with exact sampling of the linear part:

    X_{n+1} = e^{hA} X_n + Phi(h) F(X_n) + B(h) (dW_n / sqrt(h)),

where e^{hA} is the diagonal matrix exponential, Phi(h) = A^{-1}(e^{hA}-I)
is the exact integral of the semigroup, and B(h) B(h)^T = Q_h with

    (Q_h)_{jk} = (G G^T)_{jk} (e^{(a_j+a_k) h} - 1) / (a_j + a_k)

the exact covariance of the stochastic convolution.  The drift F is
frozen at the left endpoint.  For F = 0 the scheme samples the exact
transition kernel, so the law of X on the grid is independent of h.

Brownian increments dW_n are drawn from the counter-based streams in
``rng`` and stored: re-applying the update to the stored increments
reproduces the states bit for bit, and any two runs sharing (seed, h)
share increments (common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import parallel, rng
from .model import Model

# memory budget for one ensemble (states + increments), in float64 elements
MEMORY_BUDGET_ELEMENTS = 800_000_000


class SimulationError(RuntimeError):
    pass


class BudgetExceededError(SimulationError):
    """Requested ensemble does not fit the configured memory budget."""


class NonFiniteStateError(SimulationError):
    """Simulation overflowed; the model is most likely mis-specified."""


@dataclass(frozen=True)
class PathEnsemble:
    """Forward trajectories with the Brownian increments that drove them.

    states      (M, N+1, d), states[m, 0] = x0
    increments  (M, N, d) Brownian increments dW
    running_max (M, N+1) sup of |X| over the grid up to t_n, or None
    """

    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    running_max: Optional[np.ndarray]
    seed: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def step_size(self) -> float:
        return float(self.times[1] - self.times[0])


def transition_operators(model: Model, h: float):
    """(exp_ah, phi_h, b_div) for one step of size h.

    exp_ah and phi_h are the diagonals of e^{hA} and A^{-1}(e^{hA}-I);
    b_div satisfies b_div b_div^T = Q_h / h, so the noise term is
    dW_n @ b_div^T for a Brownian increment dW_n.
    """
    a = model.a_eigenvalues
    exp_ah = np.exp(a * h)
    phi_h = (exp_ah - 1.0) / a
    s = a[:, None] + a[None, :]
    q_h = (model.g_matrix @ model.g_matrix.T) * ((np.exp(s * h) - 1.0) / s)
    b = np.linalg.cholesky(q_h)
    return exp_ah, phi_h, b / math.sqrt(h)


def simulate_paths(model: Model, x0, T: float, steps: int, paths: int,
                   seed: int, augment_max: bool = False) -> PathEnsemble:
    """Simulate ``paths`` trajectories on the uniform grid of ``steps``
    steps over [0, T].

    The result is a pure function of the arguments: chunking across
    workers does not change a single bit (see `rng`).
    """
    d = model.dim
    if steps <= 0 or paths <= 0 or T <= 0:
        raise ValueError("T, steps and paths must be positive")
    n_elements = paths * d * (2 * steps + 1)
    if n_elements > MEMORY_BUDGET_ELEMENTS:
        raise BudgetExceededError(
            "ensemble needs %d float64 elements, budget is %d"
            % (n_elements, MEMORY_BUDGET_ELEMENTS))
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (d,))
    h = T / steps
    exp_ah, phi_h, b_div = transition_operators(model, h)
    sqrt_h = math.sqrt(h)

    times = np.linspace(0.0, T, steps + 1)
    states = np.empty((paths, steps + 1, d))
    increments = np.empty((paths, steps, d))
    zero_drift = model.drift_bound == 0.0

    def worker(lo, hi):
        x = np.tile(x0, (hi - lo, 1))
        states[lo:hi, 0] = x
        for n in range(steps):
            dw = sqrt_h * rng.standard_normals(seed, n, lo, hi, d)
            increments[lo:hi, n] = dw
            if zero_drift:
                x = x * exp_ah + dw @ b_div.T
            else:
                x = x * exp_ah + model.drift_at(x) * phi_h + dw @ b_div.T
            states[lo:hi, n + 1] = x
        return None

    parallel.map_chunks(worker, paths)

    if not np.isfinite(states[:, -1]).all() or not np.isfinite(states).all():
        raise NonFiniteStateError("non-finite state encountered; check the model")

    running_max = None
    if augment_max:
        running_max = np.maximum.accumulate(np.linalg.norm(states, axis=2), axis=1)

    return PathEnsemble(times=times, states=states, increments=increments,
                        running_max=running_max, seed=int(seed))


def replay_states(model: Model, x0, T: float, increments: np.ndarray) -> np.ndarray:
    """Re-apply the transition formula to stored increments.

    Bitwise identical to the states of the ensemble that produced the
    increments; used to audit reproducibility.
    """
    paths, steps, d = increments.shape
    h = T / steps
    exp_ah, phi_h, b_div = transition_operators(model, h)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (d,))
    zero_drift = model.drift_bound == 0.0
    states = np.empty((paths, steps + 1, d))
    x = np.tile(x0, (paths, 1))
    states[:, 0] = x
    for n in range(steps):
        dw = increments[:, n]
        if zero_drift:
            x = x * exp_ah + dw @ b_div.T
        else:
            x = x * exp_ah + model.drift_at(x) * phi_h + dw @ b_div.T
        states[:, n + 1] = x
    return states


DEFAULT_STEP = 0.02


def semigroup_apply(model: Model, phi: Callable[[np.ndarray], np.ndarray],
                    t: float, x, paths: int, seed: int,
                    steps: Optional[int] = None):
    """Monte-Carlo evaluation of E phi(X_t^x); returns (estimate, std_error).

    ``steps`` defaults to a grid of width ~DEFAULT_STEP; pass it
    explicitly to share the grid (and hence the paths, bit for bit) with
    another computation on the same seed.
    """
    if steps is None:
        steps = max(1, int(math.ceil(t / DEFAULT_STEP)))
    ens = simulate_paths(model, x, t, steps, paths, seed)
    values = np.asarray(phi(ens.states[:, -1]), dtype=float)
    est = float(np.mean(values))
    se = float(np.std(values) / math.sqrt(paths))
    return est, se


@dataclass(frozen=True)
class DecayCurve:
    """|P_t[phi](x) - P_t[phi](y)| over a time grid, with the fitted
    log-slope over the points that clear the noise floor."""

    t: np.ndarray
    delta: np.ndarray
    std_error: np.ndarray
    slope: Optional[float]
    all_noise: bool

    def rows(self):
        return [(float(t), float(d), float(s))
                for t, d, s in zip(self.t, self.delta, self.std_error)]


def coupling_decay(model: Model, phi: Callable[[np.ndarray], np.ndarray],
                   x, y, t_grid, paths: int, seed: int,
                   steps_per_unit: int = 50) -> DecayCurve:
    """Decay of the semigroup difference between starting points x and y,
    measured with common random numbers (the two ensembles share every
    increment, so the difference is nearly noise-free).

    The slope of log Delta(t) is fitted over the grid points where Delta
    exceeds 3 standard errors; if no point qualifies the curve is flagged
    ``all_noise`` (reported, not fatal).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if np.array_equal(x, y):
        raise ValueError("starting points must differ")
    t_grid = np.asarray(t_grid, dtype=float)
    T = float(np.max(t_grid))
    steps = max(1, int(math.ceil(T * steps_per_unit)))
    ens_x = simulate_paths(model, x, T, steps, paths, seed)
    ens_y = simulate_paths(model, y, T, steps, paths, seed)
    h = ens_x.step_size

    idx = np.clip(np.rint(t_grid / h).astype(int), 0, steps)
    actual_t = ens_x.times[idx]
    delta = np.empty(idx.size)
    se = np.empty(idx.size)
    for i, n in enumerate(idx):
        diff = (np.asarray(phi(ens_x.states[:, n]), dtype=float)
                - np.asarray(phi(ens_y.states[:, n]), dtype=float))
        delta[i] = abs(float(np.mean(diff)))
        se[i] = float(np.std(diff) / math.sqrt(paths))

    mask = delta > 3.0 * se
    mask &= delta > 0.0
    if np.count_nonzero(mask) >= 2:
        slope = float(np.polyfit(actual_t[mask], np.log(delta[mask]), 1)[0])
        all_noise = False
    else:
        slope = None
        all_noise = True
    return DecayCurve(t=actual_t, delta=delta, std_error=se,
                      slope=slope, all_noise=all_noise)


def ensemble_summary(ensemble: PathEnsemble,
                     phi: Callable[[np.ndarray], np.ndarray]):
    """Per-time rows (t, value, std_error) of the ensemble mean of phi."""
    m = ensemble.n_paths
    rows = []
    for n, t in enumerate(ensemble.times):
        vals = np.asarray(phi(ensemble.states[:, n]), dtype=float)
        rows.append((float(t), float(np.mean(vals)),
                     float(np.std(vals) / math.sqrt(m))))
    return rows
