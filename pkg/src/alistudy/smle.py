"""Sieve maximum likelihood for logistic regression with an error-prone exposure.

The analysis model is logit Pr(Y=1 | X, Z) = b0 + b1 X + b2'Z. The exposure
error mechanism Pr(X = x_k | X*) is left unspecified and approximated by
``sum_j B_j(X*) p_kj`` on a B-spline sieve, where each column of ``p`` is a
probability vector over the support grid. Validated patients contribute

    log Pr(Y | X, Z) + sum_j B_j(X*) log p_{k(X) j}

and unvalidated patients contribute

    log sum_k Pr(Y | x_k, Z) sum_j B_j(X*) p_kj.

The selection probability and the density of (X*, Z) do not involve the
parameters and are left out. Maximization is by EM; the E-step treats X (and
the sieve component j) as missing for unvalidated patients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from alistudy.data import TwoPhaseDataset
from alistudy.errors import ConfigurationError, DataError, IdentifiabilityError, NonConvergenceError
from alistudy.logit import fit_logistic
from alistudy.seeding import make_rng
from alistudy.sieve import SieveBasis, build_sieve, default_basis_dim

DEFAULT_GRID = np.round(np.linspace(0.0, 1.0, 11), 12)
P_FLOOR = 1e-12
SNAP_TOL = 1e-9


@dataclass
class SupportGrid:
    """Ordered support of the validated exposure."""

    points: np.ndarray = field(default_factory=lambda: DEFAULT_GRID.copy())

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or len(pts) == 0:
            raise ConfigurationError("support grid must be a non-empty 1-d array")
        if (np.diff(pts) <= 0).any():
            raise ConfigurationError("support grid points must be strictly increasing")
        if (pts < 0).any() or (pts > 1).any():
            raise ConfigurationError("support grid must lie in [0, 1]")
        self.points = pts

    def __len__(self):
        return len(self.points)

    @classmethod
    def default(cls) -> "SupportGrid":
        return cls()

    def resolve(self, x_validated, extend: str = "union"):
        """Snap validated values to the grid and return ``(grid, index)``.

        Values within ``SNAP_TOL`` of a grid point are snapped to it. Off-grid
        values are added to the grid (``extend="union"``) or rejected
        (``extend="strict"``). With ``extend="observed"`` the returned grid keeps
        only points that some validated patient actually takes.
        """
        xv = np.asarray(x_validated, dtype=float)
        pts = self.points
        idx = np.abs(xv[:, None] - pts[None, :]).argmin(axis=1) if len(xv) else np.empty(0, int)
        on_grid = np.abs(pts[idx] - xv) <= SNAP_TOL if len(xv) else np.empty(0, bool)
        if not on_grid.all():
            if extend == "strict":
                raise DataError(f"validated values off the support grid: {np.unique(xv[~on_grid])[:10]}")
            extra = _dedupe(xv[~on_grid])
            pts = np.sort(np.r_[pts, extra])
        if extend == "observed":
            pts = _dedupe(xv)
        elif extend not in ("union", "strict"):
            raise ConfigurationError(f"unknown grid extension mode {extend!r}")
        grid = SupportGrid(pts)
        idx = np.abs(xv[:, None] - grid.points[None, :]).argmin(axis=1) if len(xv) else np.empty(0, int)
        return grid, idx


def _dedupe(x):
    x = np.sort(np.asarray(x, dtype=float))
    if len(x) == 0:
        return x
    keep = np.r_[True, np.diff(x) > SNAP_TOL]
    return x[keep]


@dataclass
class SmleFit:
    beta: np.ndarray
    p_matrix: np.ndarray
    grid: np.ndarray
    em_iterations: int
    final_loglik: float
    loglik_trace: list
    converged: bool
    se: Optional[np.ndarray] = None
    covariance: Optional[np.ndarray] = None
    se_method: Optional[str] = None
    names: tuple = ("intercept", "x", "z")

    def odds_ratio(self, index: int = 1, scale: float = 0.1, z: float = 1.959963984540054):
        b = scale * self.beta[index]
        if self.se is None:
            return float(np.exp(b)), float("nan"), float("nan")
        half = z * abs(scale) * self.se[index]
        return float(np.exp(b)), float(np.exp(b - half)), float(np.exp(b + half))


class _Problem:
    """Precomputed arrays for one (data, grid, basis) combination."""

    def __init__(self, data: TwoPhaseDataset, grid: SupportGrid, basis: SieveBasis, extend="union"):
        p1 = data.phase_one
        if np.isnan(p1.x_star).any():
            raise DataError("em_fit needs X* for every patient; drop patients with absent X* first")
        if basis.B.shape[0] != len(p1):
            raise DataError("sieve basis rows must align with the dataset")
        v = data.validated
        if not v.any():
            raise IdentifiabilityError("no validated patients: the error model is not identifiable")
        yv = p1.y[v]
        if yv.min() == yv.max():
            warnings.warn("validated patients all share one outcome class")
        self.grid, self.kv = grid.resolve(data.x_validated[v], extend=extend)
        self.x = self.grid.points
        self.K = len(self.x)
        self.s = basis.n_basis
        self.q = p1.z.shape[1]
        self.p = 2 + self.q

        self.yv = yv.astype(float)
        self.Xv = np.column_stack([np.ones(v.sum()), self.x[self.kv], p1.z[v]])
        self.Bv = basis.B[v]
        C = np.zeros((self.K, self.s))
        np.add.at(C, self.kv, self.Bv)
        self.C = C

        u = ~v
        self.m = int(u.sum())
        self.yu = p1.y[u].astype(float)
        self.zu = p1.z[u]
        self.Bu = basis.B[u]
        self.sign = 2 * self.yu - 1  # +1 for Y=1, -1 for Y=0

    # likelihood pieces -------------------------------------------------
    def eta_u(self, beta):
        return beta[0] + beta[1] * self.x[None, :] + (self.zu @ beta[2:])[:, None]

    def val_loglik_beta(self, beta):
        eta = self.Xv @ beta
        return float(np.sum(self.yv * log_expit(eta) + (1 - self.yv) * log_expit(-eta)))

    def val_loglik_p(self, P):
        logP = np.log(np.maximum(P, P_FLOOR))
        return float(np.sum(self.Bv * logP[self.kv]))

    def log_py(self, beta):
        return log_expit(self.sign[:, None] * self.eta_u(beta))

    def e_step(self, beta, P, logPY=None):
        """Return (loglik, R, W, logPY) at (beta, P).

        R[i, k] = Pr(Y_i | x_k, Z_i) / denom_i and W[i, k] = sum_j w_ikj.
        """
        ll = self.val_loglik_beta(beta) + self.val_loglik_p(P)
        if self.m == 0:
            return ll, None, None, None
        if logPY is None:
            logPY = self.log_py(beta)
        PY = np.exp(logPY)
        BP = self.Bu @ np.maximum(P, P_FLOOR).T
        joint = PY * BP
        denom = joint.sum(axis=1)
        ll += float(np.sum(np.log(denom)))
        inv = (1.0 / denom)[:, None]
        return ll, PY * inv, joint * inv, logPY

    def posterior(self, beta, P):
        """Full posterior w_ikj for unvalidated patients (m x K x s)."""
        Pf = np.maximum(P, P_FLOOR)
        PY = np.exp(self.log_py(beta))
        joint = PY[:, :, None] * Pf[None, :, :] * self.Bu[:, None, :]
        return joint / joint.sum(axis=(1, 2), keepdims=True)

    def loglik(self, beta, P) -> float:
        return self.e_step(beta, P)[0]

    # M-steps -----------------------------------------------------------
    def m_step_p(self, P, R):
        num = self.C.copy()
        if R is not None:
            num += np.maximum(P, P_FLOOR) * (R.T @ self.Bu)
        tot = num.sum(axis=0)
        return np.where(tot > 0, num / np.where(tot > 0, tot, 1.0), 1.0 / self.K)

    def _grad_hess(self, beta, W, logPY=None):
        mu = expit(self.Xv @ beta)
        g = self.Xv.T @ (self.yv - mu)
        H = (self.Xv * (mu * (1 - mu))[:, None]).T @ self.Xv
        if W is not None:
            if logPY is None:
                logPY = self.log_py(beta)
            PY = np.exp(logPY)
            # Pr(Y=1 | x_k, Z_i) recovered from Pr(Y_i | x_k, Z_i)
            mu_u = np.where(self.yu[:, None] == 1, PY, 1.0 - PY)
            res = W * (self.yu[:, None] - mu_u)
            h = W * (PY * (1.0 - PY))
            x = self.x
            res_i, h_i = res.sum(axis=1), h.sum(axis=1)
            res_x, h_x, h_xx = res @ x, h @ x, h @ (x * x)
            zu = self.zu
            gu = np.r_[res_i.sum(), res_x.sum(), zu.T @ res_i]
            Hu = np.empty((self.p, self.p))
            Hu[0, 0] = h_i.sum()
            Hu[0, 1] = Hu[1, 0] = h_x.sum()
            Hu[1, 1] = h_xx.sum()
            Hu[0, 2:] = Hu[2:, 0] = zu.T @ h_i
            Hu[1, 2:] = Hu[2:, 1] = zu.T @ h_x
            Hu[2:, 2:] = (zu * h_i[:, None]).T @ zu
            g = g + gu
            H = H + Hu
        return g, H

    def m_step_beta(self, beta, W, logPY=None, max_newton=1, tol=1e-10):
        """Newton steps on the expected complete-data log-likelihood.

        Each accepted step does not decrease Q, which keeps EM monotone.
        Returns the new beta and log Pr(Y | x_k, Z) at it.
        """
        if W is None:
            logPY = None
        elif logPY is None:
            logPY = self.log_py(beta)
        q0 = self.val_loglik_beta(beta) + (float(np.sum(W * logPY)) if W is not None else 0.0)
        for _ in range(max_newton):
            g, H = self._grad_hess(beta, W, logPY)
            if np.max(np.abs(g)) < tol:
                break
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                step = np.linalg.pinv(H) @ g
            for _ in range(51):
                cand = beta + step
                lp = self.log_py(cand) if W is not None else None
                q1 = self.val_loglik_beta(cand) + (float(np.sum(W * lp)) if W is not None else 0.0)
                if q1 >= q0:
                    break
                step = step / 2
            else:
                break
            beta, q0, logPY = cand, q1, lp
        return beta, logPY


    def initial_p(self):
        return (self.C + 1.0) / (self.C.sum(axis=0) + self.K)


def _run_em(prob: _Problem, beta, P, tol, max_iter, fix_beta=False, newton_steps=1, accelerate=False):
    if accelerate and not fix_beta and prob.m > 0:
        return _run_squarem(prob, beta, P, tol, max_iter, newton_steps)
    trace = []
    ll_prev = None
    converged = False
    it = 0
    logPY = None
    for it in range(1, max_iter + 1):
        ll, R, W, logPY = prob.e_step(beta, P, logPY)
        trace.append(ll)
        if ll_prev is not None and abs(ll - ll_prev) < tol:
            converged = True
            break
        ll_prev = ll
        P = prob.m_step_p(P, R)
        if not fix_beta:
            beta, logPY = prob.m_step_beta(beta, W, logPY, max_newton=newton_steps)
    else:
        trace.append(prob.loglik(beta, P))
        converged = abs(trace[-1] - trace[-2]) < tol
    return beta, P, trace, it, converged


def _run_squarem(prob: _Problem, beta, P, tol, max_iter, newton_steps=1):
    """EM with squared extrapolation (SQUAREM, scheme S3).

    Each cycle takes two EM steps from theta0, extrapolates along them, and
    finishes with a stabilizing EM step from the extrapolated point. The
    extrapolated point is only used if its log-likelihood is at least that of
    the first EM step, so the recorded trace stays non-decreasing.
    Convergence is judged on the plain EM step inside each cycle.
    ``it`` counts EM-map evaluations.
    """

    def em_map(b, Pm, logPY=None):
        ll, R, W, logPY = prob.e_step(b, Pm, logPY)
        Pn = prob.m_step_p(Pm, R)
        bn, logPYn = prob.m_step_beta(b, W, logPY, max_newton=newton_steps)
        return ll, bn, Pn, logPYn

    trace = []
    evals = 0
    logPY = None
    converged = False
    while evals < max_iter:
        ll0, b1, P1, lp1 = em_map(beta, P, logPY)
        ll1, b2, P2, lp2 = em_map(b1, P1, lp1)
        evals += 2
        if not trace:
            trace.append(ll0)
        if abs(ll1 - ll0) < tol:
            trace.append(ll1)
            beta, P, logPY = b1, P1, lp1
            converged = True
            break
        r = np.r_[b1 - beta, (P1 - P).ravel()]
        v = np.r_[b2 - b1, (P2 - P1).ravel()] - r
        nv = np.sqrt(v @ v)
        alpha = -np.sqrt(r @ r) / nv if nv > 0 else -1.0
        alpha = min(alpha, -1.0)
        cand = None
        for _ in range(6):
            if alpha >= -1.0:
                break
            Pc = P - 2 * alpha * (P1 - P) + alpha**2 * (P2 - 2 * P1 + P)
            if (Pc >= 0).all():
                bc = beta - 2 * alpha * (b1 - beta) + alpha**2 * (b2 - 2 * b1 + beta)
                cand = (bc, Pc / Pc.sum(axis=0, keepdims=True))
                break
            alpha = (alpha - 1.0) / 2
        ll_c = None
        if cand is not None:
            ll_c, bn, Pn, lpn = em_map(*cand)
            evals += 1
        if ll_c is None or not np.isfinite(ll_c) or ll_c < ll1:
            ll_c, bn, Pn, lpn = em_map(b2, P2, lp2)
            evals += 1
        trace.append(ll1)
        trace.append(ll_c)
        beta, P, logPY = bn, Pn, lpn
    else:
        trace.append(prob.loglik(beta, P))
    return beta, P, trace, evals, converged


def em_fit(
    data: TwoPhaseDataset,
    grid: SupportGrid | None = None,
    basis: SieveBasis | None = None,
    init=None,
    tol: float = 1e-8,
    max_iter: int = 1000,
    extend: str = "union",
    init_p=None,
    accelerate: bool = False,
) -> SmleFit:
    """Fit the sieve MLE by EM.

    ``basis`` defaults to a cubic B-spline of dimension ceil(n^(1/4)) + 3 with
    knots at validated X* quantiles. ``init`` defaults to the naive estimates
    (falling back to zeros when the naive model cannot be fit). Iteration stops
    when an EM step changes the log-likelihood by less than ``tol``;
    ``accelerate`` switches on SQUAREM extrapolation between EM steps.
    """
    grid = grid or SupportGrid.default()
    if basis is None:
        basis = default_basis(data)
    prob = _Problem(data, grid, basis, extend=extend)
    if init is None:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                init = fit_logistic(data.phase_one).beta
        except DataError:
            init = np.zeros(prob.p)
    beta = np.array(init, dtype=float)
    if beta.shape != (prob.p,):
        raise ConfigurationError(f"initial beta must have length {prob.p}")
    P = prob.initial_p() if init_p is None else np.array(init_p, dtype=float)
    beta, P, trace, iters, converged = _run_em(prob, beta, P, tol, max_iter, accelerate=accelerate)
    if not converged:
        warnings.warn(f"EM reached {max_iter} iterations without |delta loglik| < {tol}")
    q = prob.q
    names = ("intercept", "x") + (("z",) if q == 1 else tuple(f"z{j + 1}" for j in range(q)))
    return SmleFit(beta, P, prob.grid.points, iters, trace[-1], trace, converged, names=names)


def default_basis(data: TwoPhaseDataset, order: int = 4, n_basis: int | None = None, z_strata: int = 1) -> SieveBasis:
    n = max(data.n_validated, 1)
    n_basis = n_basis or default_basis_dim(n)
    order = min(order, n_basis)
    xs = data.phase_one.x_star
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_sieve(xs, n_basis, order, knot_x=xs[data.validated], z=data.phase_one.z, z_strata=z_strata)


def profile_loglik(fit: SmleFit, data, grid, basis, beta, tol=1e-10, max_iter=5000, extend="union") -> float:
    """max over p of the log-likelihood with beta held fixed (restricted EM)."""
    prob = _Problem(data, SupportGrid(fit.grid) if grid is None else grid, basis, extend=extend)
    _, P, trace, _, _ = _run_em(prob, np.asarray(beta, float), fit.p_matrix.copy(), tol, max_iter, fix_beta=True)
    return trace[-1]


def profile_se(
    fit: SmleFit,
    data: TwoPhaseDataset,
    grid: SupportGrid | None = None,
    basis: SieveBasis | None = None,
    h_scale: float = 1.0,
    n_boot: int = 200,
    seed: int = 0,
    tol: float = 1e-10,
    extend: str = "union",
) -> SmleFit:
    """Standard errors from the curvature of the profile log-likelihood.

    The step is ``h = h_scale / sqrt(N)``. The nuisance matrix is re-maximized
    by EM with beta fixed at each perturbed point, and the Hessian is taken by
    central second differences. If the resulting information is not positive
    definite, a bootstrap (resampling validated and unvalidated patients
    separately) is used instead. Returns a copy of ``fit`` with ``se`` set.
    """
    if not h_scale or h_scale <= 0:
        raise ConfigurationError("profile step scale must be positive")
    if basis is None:
        basis = default_basis(data)
    grid = SupportGrid(fit.grid) if grid is None else grid
    prob = _Problem(data, grid, basis, extend=extend)
    N = len(data.phase_one)
    h = h_scale / np.sqrt(N)
    b = fit.beta
    p = len(b)
    cache = {}

    def pl(offset):
        key = tuple(np.round(offset, 12))
        if key not in cache:
            _, _, trace, _, _ = _run_em(prob, b + np.asarray(offset) * h, fit.p_matrix.copy(), tol, 5000, fix_beta=True)
            cache[key] = trace[-1]
        return cache[key]

    e = np.eye(p)
    zero = np.zeros(p)
    H = np.empty((p, p))
    for a in range(p):
        H[a, a] = (pl(e[a]) - 2 * pl(zero) + pl(-e[a])) / h**2
        for c in range(a):
            H[a, c] = H[c, a] = (pl(e[a] + e[c]) - pl(e[a] - e[c]) - pl(-e[a] + e[c]) + pl(-e[a] - e[c])) / (4 * h**2)
    info = -H
    out = SmleFit(**{**fit.__dict__})
    eig = np.linalg.eigvalsh(info)
    if np.all(eig > 0):
        cov = np.linalg.inv(info)
        out.covariance, out.se, out.se_method = cov, np.sqrt(np.diag(cov)), "profile"
        return out
    warnings.warn("profile log-likelihood curvature is not negative definite; falling back to bootstrap")
    cov = bootstrap_cov(fit, data, basis, grid, n_boot=n_boot, seed=seed, extend=extend)
    if cov is None or not np.all(np.diag(cov) > 0):
        raise NonConvergenceError("near-flat likelihood: profile curvature and bootstrap both failed")
    out.covariance, out.se, out.se_method = cov, np.sqrt(np.diag(cov)), "bootstrap"
    return out


def bootstrap_cov(fit, data, basis, grid, n_boot=200, seed=0, extend="union"):
    v_idx = np.flatnonzero(data.validated)
    u_idx = np.flatnonzero(~data.validated)
    draws = []
    for b in range(n_boot):
        rng = make_rng(seed, "bootstrap", b)
        idx = np.r_[rng.choice(v_idx, len(v_idx)), rng.choice(u_idx, len(u_idx)) if len(u_idx) else np.empty(0, int)]
        sub = _take(data, idx)
        sub_basis = SieveBasis(basis.B[idx], basis.knots, basis.order, basis.n_spline, basis.z_cuts)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                bf = em_fit(sub, grid, sub_basis, init=fit.beta, extend=extend)
        except DataError:
            continue
        if bf.converged:
            draws.append(bf.beta)
    if len(draws) < 2:
        return None
    return np.cov(np.asarray(draws), rowvar=False)


def _take(data: TwoPhaseDataset, idx) -> TwoPhaseDataset:
    from alistudy.data import PhaseOneData

    p1 = data.phase_one
    ids = np.arange(len(idx))
    sub = PhaseOneData(ids, p1.y[idx], p1.x_star[idx], p1.z[idx])
    return TwoPhaseDataset(sub, data.validated[idx], data.x_validated[idx])


def smle(
    data: TwoPhaseDataset,
    n_basis: int | None = None,
    order: int = 4,
    z_strata: int = 1,
    grid: SupportGrid | None = None,
    se: bool = True,
    extend: str = "union",
    **kwargs,
) -> SmleFit:
    """Convenience wrapper: drop absent-X* patients, build the sieve, fit, and add SEs."""
    keep = data.phase_one.has_x_star
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} patients with absent X* from the SMLE")
        data = TwoPhaseDataset(data.phase_one.subset(keep), data.validated[keep], data.x_validated[keep])
    basis = default_basis(data, order=order, n_basis=n_basis, z_strata=z_strata)
    fit = em_fit(data, grid, basis, extend=extend, **kwargs)
    if se:
        fit = profile_se(fit, data, SupportGrid(fit.grid), basis, extend=extend)
    return fit
