"""Phase I / Phase II data containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from alistudy.errors import DataError


def age_to_z(age_years):
    """Age covariate on the model scale: 0 at age 18, one unit per 10 years."""
    return (np.asarray(age_years, dtype=float) - 18.0) / 10.0


def z_to_age(z):
    return np.asarray(z, dtype=float) * 10.0 + 18.0


@dataclass
class PhaseOneData:
    """Fully observed variables for all N patients.

    ``x_star`` holds NaN where the error-prone ALI is absent. ``z`` is stored as
    an (N, q) matrix; a 1-d input is promoted to a single column.
    """

    ids: np.ndarray
    y: np.ndarray
    x_star: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.y = np.asarray(self.y)
        self.x_star = np.asarray(self.x_star, dtype=float)
        z = np.asarray(self.z, dtype=float)
        self.z = z.reshape(-1, 1) if z.ndim == 1 else z
        n = len(self.ids)
        if not (len(self.y) == len(self.x_star) == self.z.shape[0] == n):
            raise DataError("ids, y, x_star and z must have the same length")
        if len(np.unique(self.ids)) != n:
            raise DataError("patient ids must be unique")
        if n and not np.isin(self.y, (0, 1)).all():
            raise DataError("outcome Y must be binary 0/1")
        self.y = self.y.astype(int)
        xs = self.x_star[~np.isnan(self.x_star)]
        if xs.size and ((xs < 0) | (xs > 1)).any():
            raise DataError("X* must lie in [0, 1]")
        if not np.isfinite(self.z).all():
            raise DataError("covariate Z must be finite")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def has_x_star(self) -> np.ndarray:
        return ~np.isnan(self.x_star)

    def subset(self, mask) -> "PhaseOneData":
        return PhaseOneData(self.ids[mask], self.y[mask], self.x_star[mask], self.z[mask])

    def design_matrix(self) -> np.ndarray:
        return np.column_stack([np.ones(len(self)), self.x_star, self.z])


@dataclass
class TwoPhaseDataset:
    """Phase I data for everyone plus validated exposure for the V = 1 subset."""

    phase_one: PhaseOneData
    validated: np.ndarray
    x_validated: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.phase_one)
        self.validated = np.asarray(self.validated, dtype=bool)
        if self.x_validated is None:
            self.x_validated = np.full(n, np.nan)
        self.x_validated = np.asarray(self.x_validated, dtype=float)
        if self.validated.shape != (n,) or self.x_validated.shape != (n,):
            raise DataError("validation indicator and X_validated must have one entry per patient")
        has_x = ~np.isnan(self.x_validated)
        if (has_x != self.validated).any():
            bad = self.phase_one.ids[has_x != self.validated]
            raise DataError(f"X_validated must be present exactly for validated patients; offending ids: {list(bad[:10])}")
        xv = self.x_validated[has_x]
        if xv.size and ((xv < 0) | (xv > 1)).any():
            raise DataError("validated ALI must lie in [0, 1]")

    @classmethod
    def from_ids(cls, phase_one: PhaseOneData, x_validated_by_id) -> "TwoPhaseDataset":
        """Build from a mapping of patient id to validated ALI."""
        index = {pid: i for i, pid in enumerate(phase_one.ids.tolist())}
        v = np.zeros(len(phase_one), dtype=bool)
        xv = np.full(len(phase_one), np.nan)
        unknown = [pid for pid in x_validated_by_id if pid not in index]
        if unknown:
            raise DataError(f"validated ids not in phase-one data: {unknown[:10]}")
        for pid, x in x_validated_by_id.items():
            v[index[pid]] = True
            xv[index[pid]] = float(x)
        return cls(phase_one, v, xv)

    @property
    def n_validated(self) -> int:
        return int(self.validated.sum())
