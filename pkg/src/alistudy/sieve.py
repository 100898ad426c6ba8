"""B-spline sieve basis for the exposure error model Pr(X | X*, Z)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import BSpline

from alistudy.errors import ConfigurationError, DataError


@dataclass
class SieveBasis:
    """Basis evaluation matrix ``B`` (N x n_basis); rows are a partition of unity."""

    B: np.ndarray
    knots: np.ndarray
    order: int
    n_spline: int
    z_cuts: Optional[np.ndarray] = None

    @property
    def n_basis(self) -> int:
        return self.B.shape[1]


def default_basis_dim(n_validated: int) -> int:
    return math.ceil(n_validated ** 0.25) + 3


def _interior_knots(knot_x, n_interior):
    if n_interior <= 0:
        return np.empty(0)
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    q = np.quantile(knot_x, probs)
    q = np.unique(q[(q > 0) & (q < 1)])
    return q


def build_sieve(
    x_star,
    n_basis: int,
    order: int = 4,
    knot_x=None,
    z=None,
    z_strata: int = 1,
) -> SieveBasis:
    """Evaluate a clamped B-spline basis of ``order`` (degree + 1) on [0, 1].

    Interior knots sit at empirical quantiles of ``knot_x`` (the validated
    patients' X*; all of ``x_star`` when omitted). When the requested dimension
    cannot be supported by the distinct values available, it is reduced with a
    warning. With ``z_strata > 1`` the spline basis is crossed with indicators of
    Z-quantile strata so the error model may also depend on Z.
    """
    if n_basis is None or n_basis < 1:
        raise ConfigurationError(f"basis dimension must be >= 1, got {n_basis}")
    if order < 1:
        raise ConfigurationError(f"spline order must be >= 1, got {order}")
    if n_basis < order:
        raise ConfigurationError(f"basis dimension {n_basis} is smaller than spline order {order}")
    x = np.asarray(x_star, dtype=float)
    if np.isnan(x).any() or (x < 0).any() or (x > 1).any():
        raise DataError("sieve covariate X* must be present and lie in [0, 1]")
    kx = x if knot_x is None else np.asarray(knot_x, dtype=float)
    kx = kx[~np.isnan(kx)]
    if kx.size == 0:
        kx = x

    n_distinct = len(np.unique(x))
    requested = n_basis
    if n_basis > n_distinct:
        n_basis = n_distinct
        order = min(order, n_basis)
    interior = _interior_knots(kx, n_basis - order)
    if len(interior) < n_basis - order:
        n_basis = order + len(interior)
    if n_basis != requested:
        warnings.warn(f"sieve dimension reduced from {requested} to {n_basis} (too few distinct X* values)")

    knots = np.r_[np.zeros(order), interior, np.ones(order)]
    B = BSpline.design_matrix(x, knots, order - 1).toarray()

    z_cuts = None
    if z_strata > 1:
        if z is None:
            raise ConfigurationError("z is required for Z-stratified sieves")
        zz = np.asarray(z, dtype=float).reshape(len(x), -1)[:, 0]
        z_cuts = np.unique(np.quantile(zz, np.arange(1, z_strata) / z_strata))
        stratum = np.searchsorted(z_cuts, zz, side="right")
        S = len(z_cuts) + 1
        B = (B[:, None, :] * (stratum[:, None] == np.arange(S))[:, :, None]).reshape(len(x), -1)
        used = B.sum(axis=0) > 0
        B = B[:, used]
    return SieveBasis(B, knots, order, n_basis, z_cuts)
