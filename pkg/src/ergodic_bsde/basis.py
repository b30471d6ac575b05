"""Regression bases and the deterministic least-squares fit used by the
backward solvers.

Two families:

* ``PolynomialBasis``: monomials of total degree <= degree, graded
  ordering with the constant first.  Monomials are kept uncentered on
  purpose: every non-constant function vanishes at the origin, which
  lets the ergodic solver pin v(0) = 0 exactly through the constant
  coefficient alone.
* ``PiecewiseLinearBasis``: tensor products of 1d hat functions on a
  box, clamped outside (constant extrapolation).  The hats sum to one,
  so constants are exactly representable.

The fit assembles Gram/cross matrices chunk by chunk in a fixed order
(`parallel.map_chunks`), making coefficients bit-reproducible for any
worker count.  Ill conditioning triggers a documented ridge, never a
silent pseudo-inverse.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import parallel

CONDITION_LIMIT = 1e10
RIDGE_SCALE = 1e-8


class IllConditionedRegressionError(RuntimeError):
    """Normal equations remain ill-conditioned after regularisation."""


def _total_degree_exponents(dim: int, degree: int):
    """Multi-indices with |alpha| <= degree, graded then lexicographic,
    so index 0 is the constant function."""
    out = []
    for total in range(degree + 1):
        for alpha in itertools.product(range(total + 1), repeat=dim):
            if sum(alpha) == total:
                out.append(alpha)
    return np.array(out, dtype=int)


@dataclass(frozen=True)
class PolynomialBasis:
    degree: int
    dim_in: int

    @property
    def n_functions(self) -> int:
        return len(self._exponents())

    def _exponents(self):
        return _total_degree_exponents(self.dim_in, self.degree)

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        exps = self._exponents()
        # powers[k][p] = x[:, k] ** p, computed once per dimension
        powers = [np.vander(x[:, k], self.degree + 1, increasing=True)
                  for k in range(self.dim_in)]
        cols = [np.prod([powers[k][:, alpha[k]] for k in range(self.dim_in)], axis=0)
                for alpha in exps]
        return np.column_stack(cols)

    def constant_coefficients(self, value: float) -> np.ndarray:
        out = np.zeros(self.n_functions)
        out[0] = value
        return out

    def descriptor(self) -> dict:
        return {"kind": "polynomial", "degree": self.degree, "dim_in": self.dim_in}


@dataclass(frozen=True)
class PiecewiseLinearBasis:
    cells_per_dim: int
    domain_box: tuple          # ((lo, hi), ...) per dimension
    dim_in: int

    @property
    def n_functions(self) -> int:
        return (self.cells_per_dim + 1) ** self.dim_in

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        hats = []
        for k in range(self.dim_in):
            lo, hi = self.domain_box[k]
            nodes = np.linspace(lo, hi, self.cells_per_dim + 1)
            width = nodes[1] - nodes[0]
            xk = np.clip(x[:, k], lo, hi)
            hats.append(np.clip(1.0 - np.abs(xk[:, None] - nodes[None, :]) / width,
                                0.0, None))
        design = hats[0]
        for k in range(1, self.dim_in):
            design = (design[:, :, None] * hats[k][:, None, :]).reshape(x.shape[0], -1)
        return design

    def constant_coefficients(self, value: float) -> np.ndarray:
        # hats form a partition of unity, so a flat coefficient vector is
        # the exact representation of a constant
        return np.full(self.n_functions, value)

    def descriptor(self) -> dict:
        return {"kind": "piecewise_linear", "cells_per_dim": self.cells_per_dim,
                "domain_box": [list(b) for b in self.domain_box], "dim_in": self.dim_in}


RegressionBasis = Union[PolynomialBasis, PiecewiseLinearBasis]


def basis_from_descriptor(desc: dict) -> RegressionBasis:
    if desc["kind"] == "polynomial":
        return PolynomialBasis(degree=int(desc["degree"]), dim_in=int(desc["dim_in"]))
    if desc["kind"] == "piecewise_linear":
        box = tuple(tuple(float(v) for v in b) for b in desc["domain_box"])
        return PiecewiseLinearBasis(cells_per_dim=int(desc["cells_per_dim"]),
                                    domain_box=box, dim_in=int(desc["dim_in"]))
    raise ValueError("unknown basis descriptor %r" % (desc,))


@dataclass(frozen=True)
class FitInfo:
    condition_number: float
    ridge_used: bool


def fit_least_squares(design: np.ndarray, targets: np.ndarray,
                      gram: Optional[np.ndarray] = None):
    """Least-squares coefficients of ``targets`` on ``design``.

    targets may be (M,) or (M, k); returns (coeffs, FitInfo) with coeffs
    of shape (B,) or (B, k).  The Gram matrix can be passed in when the
    same design serves several targets.  Assembly runs over fixed path
    chunks summed in index order, so results do not depend on the worker
    count.
    """
    m = design.shape[0]
    tgt = targets if targets.ndim == 2 else targets[:, None]
    if gram is None:
        gram = assemble_gram(design)
    cross_parts = parallel.map_chunks(
        lambda lo, hi: design[lo:hi].T @ tgt[lo:hi], m)
    cross = cross_parts[0]
    for part in cross_parts[1:]:
        cross = cross + part

    eigvals = np.linalg.eigvalsh(gram)
    cond = float(eigvals[-1] / max(eigvals[0], 1e-300))
    ridge_used = False
    g = gram
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        ridge = RIDGE_SCALE * np.trace(gram) / gram.shape[0]
        g = gram + ridge * np.eye(gram.shape[0])
        eigvals = np.linalg.eigvalsh(g)
        cond = float(eigvals[-1] / max(eigvals[0], 1e-300))
        ridge_used = True
        if not np.isfinite(cond) or cond > CONDITION_LIMIT:
            raise IllConditionedRegressionError(
                "condition number %.3g exceeds %.1g even after ridge"
                % (cond, CONDITION_LIMIT))
    coeffs = np.linalg.solve(g, cross)
    if targets.ndim == 1:
        coeffs = coeffs[:, 0]
    return coeffs, FitInfo(condition_number=cond, ridge_used=ridge_used)


def assemble_gram(design: np.ndarray) -> np.ndarray:
    parts = parallel.map_chunks(
        lambda lo, hi: design[lo:hi].T @ design[lo:hi], design.shape[0])
    gram = parts[0]
    for part in parts[1:]:
        gram = gram + part
    return gram
