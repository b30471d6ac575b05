"""Dissipative Ornstein-Uhlenbeck model data and analytic presets.

The forward dynamics are

    dX_t = (A X_t + F(X_t)) dt + G dW_t,      X_0 = x,

with A diagonal in the truncation basis, all eigenvalues strictly
negative (dissipativity constant eta = min_k(-a_k) > 0), G a bounded
invertible matrix and F a bounded Lipschitz perturbation.  A problem
instance adds a driver f(x, z), Lipschitz in z with polynomial growth
in x, and a terminal functional: either g(X_T) or a function of
(X_T, sup_{s<=T} |X_s|).

Presets bundle model + driver + terminal together with closed-form
reference data (long-run slope, bias function, additive limit) obtained
from affine/Gaussian calculations; tests use them as oracles.

All function handles must be pure and vectorised: they receive arrays
whose leading axes are batch axes and whose trailing axis is the state
(or gradient) dimension.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .rng import validation_rng

G_CONDITION_LIMIT = 1e12
_CHECK_SAMPLES = 100
_CHECK_RADIUS = 10.0
# relative slack for sampled inequality checks; they are float identities
_CHECK_SLACK = 1e-9


class ModelError(ValueError):
    pass


class NonDissipativeError(ModelError):
    """Some eigenvalue of A is >= 0."""


class SingularGError(ModelError):
    """G is numerically singular (condition number above the limit)."""


class LipschitzViolationError(ModelError):
    """A sampled bound/Lipschitz check failed for a function handle."""


class UnknownPresetError(KeyError):
    pass


@dataclass(frozen=True)
class Model:
    """Validated forward-dynamics data. Immutable and thread-safe."""

    dim: int
    a_eigenvalues: np.ndarray      # (d,), all < 0
    g_matrix: np.ndarray           # (d, d)
    g_inverse: np.ndarray          # (d, d)
    drift: Callable[[np.ndarray], np.ndarray]
    drift_bound: float
    drift_lipschitz: float
    eta: float

    def drift_at(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.drift(x), dtype=float)


@dataclass(frozen=True)
class ModelSpec:
    """Input to build_model: eigenvalues, noise matrix and a named drift."""

    dim: int
    a_eigenvalues: tuple
    g_matrix: Optional[tuple] = None   # row tuples; None means identity
    drift: str = "zero"
    drift_params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DriverSpec:
    """Driver f(x, z): Lipschitz in z (constant ``lipschitz_z``), with
    |f(x, 0)| <= C (1 + |x|^growth_mu).  ``f`` maps batched (x, z) arrays
    of shape (..., d) to values of shape (...,)."""

    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lipschitz_z: float
    growth_mu: float

    def validate(self, dim: int) -> float:
        """Sampled Lipschitz/growth checks; returns the fitted growth
        constant sup |f(x,0)| / (1+|x|^mu) over the sample."""
        if self.lipschitz_z < 0 or self.growth_mu < 0:
            raise ModelError("lipschitz_z and growth_mu must be nonnegative")
        rng = validation_rng(tag=2)
        x = _ball_sample(rng, _CHECK_SAMPLES, dim)
        z1 = _ball_sample(rng, _CHECK_SAMPLES, dim)
        z2 = _ball_sample(rng, _CHECK_SAMPLES, dim)
        lhs = np.abs(self.f(x, z1) - self.f(x, z2))
        rhs = self.lipschitz_z * np.linalg.norm(z1 - z2, axis=-1)
        if np.any(lhs > rhs + _CHECK_SLACK * (1.0 + rhs)):
            raise LipschitzViolationError(
                "driver is not %.6g-Lipschitz in z on sampled triples" % self.lipschitz_z)
        fx0 = np.abs(self.f(x, np.zeros_like(x)))
        c = float(np.max(fx0 / (1.0 + np.linalg.norm(x, axis=-1) ** self.growth_mu)))
        if not math.isfinite(c):
            raise LipschitzViolationError("driver growth constant is not finite")
        return c


class TerminalKind(enum.Enum):
    STATE = "state"
    RUNNING_MAX = "running_max"


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal functional.  ``kind=STATE``: g acts on X_T, batched shape
    (..., d).  ``kind=RUNNING_MAX``: g acts on the augmented terminal state
    (..., d+1) whose last column is sup_{s<=T} |X_s| over the grid."""

    kind: TerminalKind
    g: Callable[[np.ndarray], np.ndarray]
    growth_mu: float

    def input_dim(self, dim: int) -> int:
        return dim + 1 if self.kind is TerminalKind.RUNNING_MAX else dim

    def validate(self, dim: int) -> float:
        if self.growth_mu < 0:
            raise ModelError("growth_mu must be nonnegative")
        rng = validation_rng(tag=3)
        x = _ball_sample(rng, _CHECK_SAMPLES, self.input_dim(dim))
        if self.kind is TerminalKind.RUNNING_MAX:
            x[..., -1] = np.abs(x[..., -1])  # running max is nonnegative
        gx = np.abs(np.asarray(self.g(x), dtype=float))
        c = float(np.max(gx / (1.0 + np.linalg.norm(x, axis=-1) ** self.growth_mu)))
        if not math.isfinite(c):
            raise LipschitzViolationError("terminal growth constant is not finite")
        return c


def zero_drift(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


def tanh_drift(scale: float) -> Callable[[np.ndarray], np.ndarray]:
    def drift(x):
        return scale * np.tanh(x)
    return drift


def _ball_sample(rng, n, dim):
    """n points from the ball of radius _CHECK_RADIUS in R^dim."""
    x = rng.standard_normal((n, dim))
    r = rng.uniform(0.0, _CHECK_RADIUS, size=n) ** (1.0 / dim)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-300) * r[:, None]


def _make_model(a_eigenvalues, g_matrix, drift, drift_bound, drift_lipschitz) -> Model:
    a = np.asarray(a_eigenvalues, dtype=float).copy()
    a.setflags(write=False)
    if a.ndim != 1 or a.size == 0:
        raise ModelError("a_eigenvalues must be a nonempty vector")
    if np.any(a >= 0.0):
        raise NonDissipativeError("all eigenvalues of A must be strictly negative, got %s" % a)
    dim = a.size
    g = np.asarray(g_matrix, dtype=float).copy()
    if g.shape != (dim, dim):
        raise ModelError("g_matrix must be %d x %d" % (dim, dim))
    cond = np.linalg.cond(g)
    if not np.isfinite(cond) or cond > G_CONDITION_LIMIT:
        raise SingularGError("condition number of G is %.3g (limit %.1g)"
                             % (cond, G_CONDITION_LIMIT))
    g_inv = np.linalg.inv(g)
    if np.max(np.abs(g @ g_inv - np.eye(dim))) > 1e-10:
        raise SingularGError("G * G^-1 deviates from identity beyond 1e-10")
    g.setflags(write=False)
    g_inv.setflags(write=False)

    rng = validation_rng(tag=1)
    x = _ball_sample(rng, _CHECK_SAMPLES, dim)
    y = _ball_sample(rng, _CHECK_SAMPLES, dim)
    fx = np.asarray(drift(x), dtype=float)
    fy = np.asarray(drift(y), dtype=float)
    if fx.shape != x.shape:
        raise ModelError("drift must map (n, d) arrays to (n, d) arrays")
    dnorm = np.linalg.norm(fx - fy, axis=-1)
    bound_rhs = drift_lipschitz * np.linalg.norm(x - y, axis=-1)
    if np.any(dnorm > bound_rhs + _CHECK_SLACK * (1.0 + bound_rhs)):
        raise LipschitzViolationError("sampled drift Lipschitz check failed")
    if np.any(np.linalg.norm(fx, axis=-1) > drift_bound + _CHECK_SLACK * (1.0 + drift_bound)):
        raise LipschitzViolationError("sampled drift bound check failed")

    eta = float(np.min(-a))
    return Model(dim=dim, a_eigenvalues=a, g_matrix=g, g_inverse=g_inv,
                 drift=drift, drift_bound=float(drift_bound),
                 drift_lipschitz=float(drift_lipschitz), eta=eta)


_DRIFT_REGISTRY = {"zero", "tanh"}


def build_model(spec: ModelSpec) -> Model:
    """Validated Model from a declarative spec.

    Deterministic: identical specs yield bit-identical models (the
    sampled checks use fixed-seed generators).
    """
    g = spec.g_matrix if spec.g_matrix is not None else np.eye(spec.dim)
    if spec.drift == "zero":
        drift, bound, lip = zero_drift, 0.0, 0.0
    elif spec.drift == "tanh":
        scale = float(spec.drift_params.get("scale", 1.0))
        drift = tanh_drift(scale)
        bound = abs(scale) * math.sqrt(spec.dim)
        lip = abs(scale)
    else:
        raise ModelError("unknown drift %r; known: %s" % (spec.drift, sorted(_DRIFT_REGISTRY)))
    a = np.asarray(spec.a_eigenvalues, dtype=float)
    if a.size != spec.dim:
        raise ModelError("dim=%d but %d eigenvalues given" % (spec.dim, a.size))
    return _make_model(a, g, drift, bound, lip)


# ---------------------------------------------------------------------
# analytic presets
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class KnownSolution:
    """Closed-form reference data for a preset.

    lambda_    long-run slope of the value in the horizon
    v          bias function, normalised v(0) = 0, batched (..., d) -> (...)
    limit      additive constant L = lim_T [u(T,x) - lambda*T - v(x)]
    decay_rate exponential rate of that convergence (None if the defect
               vanishes identically, making the rate unidentifiable)
    u          closed-form value u(T, x) with x batched as (..., d)
    """

    lambda_: float
    v: Callable[[np.ndarray], np.ndarray]
    limit: float
    decay_rate: Optional[float]
    u: Callable[[float, np.ndarray], np.ndarray]


class PresetBundle(NamedTuple):
    model: Model
    driver: DriverSpec
    terminal: TerminalSpec
    known: Optional[KnownSolution]


def _preset_quadratic() -> PresetBundle:
    # d=1, A=-1, G=1, F=0, f=0, g(x)=x^2.
    # u(T,x) = E[X_T^2] = x^2 e^{-2T} + (1 - e^{-2T})/2, so
    # lambda = 0, v = 0, L = 1/2 (stationary second moment), rate 2.
    model = _make_model([-1.0], [[1.0]], zero_drift, 0.0, 0.0)
    driver = DriverSpec(f=lambda x, z: np.zeros(x.shape[:-1]), lipschitz_z=0.0, growth_mu=0.0)
    terminal = TerminalSpec(kind=TerminalKind.STATE, g=lambda x: x[..., 0] ** 2, growth_mu=2.0)
    known = KnownSolution(
        lambda_=0.0,
        v=lambda x: np.zeros(x.shape[:-1]),
        limit=0.5,
        decay_rate=2.0,
        u=lambda T, x: x[..., 0] ** 2 * np.exp(-2.0 * T) + 0.5 * (1.0 - np.exp(-2.0 * T)),
    )
    return PresetBundle(model, driver, terminal, known)


def _preset_linear_driver(eta: float) -> PresetBundle:
    # d=1, A=-eta, G=1, F=0, f(x,z)=z+x, g(x)=x.  The affine ansatz
    # u = a(T)x + b(T) gives a' = 1 - eta*a, a(0)=1 and b' = a, b(0)=0:
    #   a(T) = 1/eta + (1 - 1/eta) e^{-eta T},
    #   b(T) = T/eta + (1 - 1/eta)(1 - e^{-eta T})/eta,
    # hence lambda = 1/eta, v(x) = x/eta, L = (1 - 1/eta)/eta.
    model = _make_model([-eta], [[1.0]], zero_drift, 0.0, 0.0)
    driver = DriverSpec(f=lambda x, z: z[..., 0] + x[..., 0], lipschitz_z=1.0, growth_mu=1.0)
    terminal = TerminalSpec(kind=TerminalKind.STATE, g=lambda x: x[..., 0], growth_mu=1.0)

    def a_coef(T):
        return 1.0 / eta + (1.0 - 1.0 / eta) * np.exp(-eta * T)

    def b_coef(T):
        return T / eta + (1.0 - 1.0 / eta) * (1.0 - np.exp(-eta * T)) / eta

    limit = (1.0 - 1.0 / eta) / eta
    known = KnownSolution(
        lambda_=1.0 / eta,
        v=lambda x: x[..., 0] / eta,
        limit=limit,
        decay_rate=eta if eta != 1.0 else None,  # eta=1 collapses w_T to 0
        u=lambda T, x: a_coef(T) * x[..., 0] + b_coef(T),
    )
    return PresetBundle(model, driver, terminal, known)


def _preset_zero() -> PresetBundle:
    model = _make_model([-1.0], [[1.0]], zero_drift, 0.0, 0.0)
    driver = DriverSpec(f=lambda x, z: np.zeros(x.shape[:-1]), lipschitz_z=0.0, growth_mu=0.0)
    terminal = TerminalSpec(kind=TerminalKind.STATE, g=lambda x: np.zeros(x.shape[:-1]),
                            growth_mu=0.0)
    known = KnownSolution(
        lambda_=0.0,
        v=lambda x: np.zeros(x.shape[:-1]),
        limit=0.0,
        decay_rate=None,
        u=lambda T, x: np.zeros(x.shape[:-1]),
    )
    return PresetBundle(model, driver, terminal, known)


_PRESETS = {
    "ou1d-quadratic": _preset_quadratic,
    "ou1d-linear-driver": lambda: _preset_linear_driver(2.0),
    "ou1d-linear-driver-eta1": lambda: _preset_linear_driver(1.0),
    "ou1d-zero": _preset_zero,
}


def preset_names() -> list:
    return sorted(_PRESETS)


def preset(name: str) -> PresetBundle:
    """Named analytic test configuration with its known reference data."""
    try:
        factory = _PRESETS[name]
    except KeyError:
        raise UnknownPresetError(
            "unknown preset %r; known presets: %s" % (name, ", ".join(preset_names())))
    bundle = factory()
    bundle.driver.validate(bundle.model.dim)
    bundle.terminal.validate(bundle.model.dim)
    return bundle


def ergodic_relation_residual(model: Model, driver: DriverSpec,
                              v: Callable[[np.ndarray], np.ndarray],
                              lambda_: float, points: np.ndarray,
                              fd_step: float = 1e-4) -> float:
    """Max defect of the stationary relation  L v + f(x, grad v G) = lambda
    over the given points, with L the generator of the forward dynamics.
    Derivatives by central differences; exact for affine v up to roundoff.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = x.shape
    grad = np.empty((n, d))
    hess_diag = np.empty((n, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = fd_step
        vp, vm, v0 = v(x + e), v(x - e), v(x)
        grad[:, k] = (vp - vm) / (2.0 * fd_step)
        hess_diag[:, k] = (vp - 2.0 * v0 + vm) / fd_step ** 2
    # off-diagonal Hessian entries weighted by (G G^T)_{jk}
    gg = model.g_matrix @ model.g_matrix.T
    trace_term = hess_diag @ np.diag(gg)
    for j in range(d):
        for k in range(j + 1, d):
            if gg[j, k] == 0.0:
                continue
            ej = np.zeros(d); ej[j] = fd_step
            ek = np.zeros(d); ek[k] = fd_step
            cross = (v(x + ej + ek) - v(x + ej - ek) - v(x - ej + ek)
                     + v(x - ej - ek)) / (4.0 * fd_step ** 2)
            trace_term = trace_term + 2.0 * gg[j, k] * cross
    drift_term = np.einsum("nd,nd->n", x * model.a_eigenvalues + model.drift_at(x), grad)
    residual = 0.5 * trace_term + drift_term + driver.f(x, grad @ model.g_matrix) - lambda_
    return float(np.max(np.abs(residual)))
