"""Naive logistic regression of Y on (X*, Z) and its residuals."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from alistudy.data import PhaseOneData
from alistudy.errors import DegenerateInputError, NonConvergenceError, SeparationError

Z_975 = 1.959963984540054

MAX_ITER = 100
MAX_HALVINGS = 50
GRAD_TOL = 1e-8
SEPARATION_BOUND = 15.0
ROUNDOFF = 1e-12


@dataclass
class LogitFit:
    beta: np.ndarray
    covariance: np.ndarray
    converged: bool = True
    iterations: int = 0
    log_likelihood: float = float("nan")
    names: tuple = ("intercept", "x", "z")
    loglik_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))


def logistic_loglik(beta, X, y, w=None) -> float:
    eta = X @ beta
    ll = y * log_expit(eta) + (1 - y) * log_expit(-eta)
    return float(ll.sum() if w is None else w @ ll)


def _newton(X, y, w=None, beta0=None, max_iter=MAX_ITER, tol=GRAD_TOL, check_separation=True):
    """Newton-Raphson with step-halving; returns (beta, info, loglik, iters, converged, trace)."""
    p = X.shape[1]
    w = np.ones(len(y)) if w is None else w
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    ll = logistic_loglik(beta, X, y, w)
    trace = [ll]
    for it in range(1, max_iter + 1):
        mu = expit(X @ beta)
        grad = X.T @ (w * (y - mu))
        info = (X * (w * mu * (1 - mu))[:, None]).T @ X
        if np.max(np.abs(grad)) < tol:
            return beta, info, ll, it - 1, True, trace
        step = np.linalg.pinv(info, hermitian=True) @ grad
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + step
            ll_new = logistic_loglik(cand, X, y, w)
            # near the optimum the change is at roundoff level; do not halve on noise
            if ll_new >= ll - ROUNDOFF * (1 + abs(ll)):
                break
            step = step / 2
        else:
            raise NonConvergenceError("step-halving failed to increase the log-likelihood")
        increasing = ll_new > ll
        beta, ll = cand, ll_new
        trace.append(ll)
        if check_separation and increasing and np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise SeparationError(
                f"complete or quasi-complete separation: |beta| = {np.max(np.abs(beta)):.1f} "
                f"exceeds {SEPARATION_BOUND} with the log-likelihood still increasing "
                f"(iteration {it}, loglik {ll:.6g})"
            )
    mu = expit(X @ beta)
    grad = X.T @ (w * (y - mu))
    info = (X * (w * mu * (1 - mu))[:, None]).T @ X
    return beta, info, ll, max_iter, bool(np.max(np.abs(grad)) < tol), trace


def fit_logistic(data: PhaseOneData, names=None) -> LogitFit:
    """Maximum likelihood fit of the naive model logit Pr(Y=1) = b0 + b1 X* + b2' Z.

    Patients with absent X* are dropped with a warning. Covariance is the
    inverse observed information at the optimum.
    """
    keep = data.has_x_star
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} patients with absent X*: {data.ids[~keep].tolist()[:20]}")
    X = data.design_matrix()[keep]
    y = data.y[keep].astype(float)
    if len(y) == 0 or y.min() == y.max():
        raise DegenerateInputError("both outcome classes are required to fit the logistic model")
    beta, info, ll, iters, converged, trace = _newton(X, y)
    if not converged:
        raise NonConvergenceError(f"Newton-Raphson did not converge in {MAX_ITER} iterations")
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        ybar = y.mean()
        raise DegenerateInputError(
            f"design matrix has rank {rank} < {X.shape[1]} (constant or collinear columns); "
            f"only the intercept is identified: logit(mean Y) = {np.log(ybar / (1 - ybar)):.6g}"
        )
    q = X.shape[1] - 2
    names = names or ("intercept", "x") + (("z",) if q == 1 else tuple(f"z{j + 1}" for j in range(q)))
    return LogitFit(beta, np.linalg.inv(info), True, iters, ll, tuple(names), trace)


def odds_ratio_ci(fit: LogitFit, index: int, scale: float = 1.0, level_z: float = Z_975):
    """(OR, lower, upper) for ``scale`` units of coefficient ``index``, Wald interval."""
    if not fit.converged:
        raise NonConvergenceError("odds ratios need a converged fit")
    b = scale * fit.beta[index]
    half = level_z * abs(scale) * fit.se[index]
    return float(np.exp(b)), float(np.exp(b - half)), float(np.exp(b + half))


def predict_proba(beta, x_star, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    z = z.reshape(len(np.atleast_1d(x_star)), -1)
    beta = np.asarray(beta, dtype=float)
    return expit(beta[0] + beta[1] * np.asarray(x_star, dtype=float) + z @ beta[2:])


def compute_residuals(fit: LogitFit, data: PhaseOneData) -> np.ndarray:
    """Response residuals Y - Pr(Y=1 | X*, Z) under the naive fit.

    Returned array is aligned with ``data``; patients with absent X* get NaN
    and are listed in a warning.
    """
    if not fit.converged:
        raise NonConvergenceError("residuals need a converged fit")
    r = data.y - predict_proba(fit.beta, data.x_star, data.z)
    absent = ~data.has_x_star
    if absent.any():
        warnings.warn(f"residuals undefined for patients with absent X*: {data.ids[absent].tolist()}")
    return r
