"""Validation sampling designs.

Every design reads only Phase I information (Y, X*, Z and naive-model
residuals), so the validated exposure is missing at random by construction.
Random draws come from a generator seeded by ``(seed, kind, stratum)`` and
candidates are put in patient-id order before drawing, so selections do not
depend on row order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from alistudy.data import PhaseOneData, TwoPhaseDataset
from alistudy.errors import ConfigurationError, DataError, DegenerateInputError, StratumQuotaError
from alistudy.seeding import make_rng

KINDS = ("SRS", "CC", "BCC", "OPT", "ETS", "RS")


@dataclass
class DesignSpec:
    """``kind`` in KINDS, validation budget ``n`` and a seed.

    ``params`` by kind:

    * BCC: ``cut`` (X* cut point; default median X*)
    * ETS: ``score`` ("x_star", default, or "residual")
    * OPT: ``cuts`` (list of X* cut points; default median), ``beta`` (pilot
      coefficients; default a naive fit on the Phase I data) or ``info``
      (per-stratum influence variances keyed by stratum label)
    """

    kind: str
    n: int
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = str(self.kind).upper()
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown design kind {self.kind!r}; expected one of {KINDS}")
        if int(self.n) != self.n or self.n < 0:
            raise ConfigurationError(f"validation budget must be a non-negative integer, got {self.n}")
        self.n = int(self.n)
        if self.kind in ("CC", "ETS", "RS") and self.n % 2:
            raise ConfigurationError(f"{self.kind} needs an even budget, got {self.n}")
        if self.kind == "BCC" and self.n % 4:
            raise ConfigurationError(f"BCC needs a budget divisible by 4, got {self.n}")

    def to_dict(self) -> dict:
        params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}
        return {"kind": self.kind, "n": self.n, "seed": self.seed, "params": params}


@dataclass
class ValidationSelection:
    ids: np.ndarray
    strata: np.ndarray
    counts: dict
    spec: DesignSpec

    def __len__(self):
        return len(self.ids)


def _id_rank(ids) -> np.ndarray:
    order = np.argsort(ids, kind="stable")
    rank = np.empty(len(ids), dtype=int)
    rank[order] = np.arange(len(ids))
    return rank


def _draw(rng, candidates, rank, k):
    """k draws without replacement from ``candidates`` (indices), id order first."""
    cand = candidates[np.argsort(rank[candidates], kind="stable")]
    if k == 0:
        return cand[:0]
    return np.sort(rng.choice(cand, size=k, replace=False))


def _check_quotas(pools: dict, quotas: dict):
    short = {lab: (len(pools.get(lab, ())), q) for lab, q in quotas.items() if len(pools.get(lab, ())) < q}
    if short:
        detail = ", ".join(f"{lab}: has {have}, needs {need}" for lab, (have, need) in sorted(short.items()))
        raise StratumQuotaError(f"strata smaller than their quota: {detail}", deficient=short)


def _bcc_labels(y, x_star, cut):
    hi = x_star > cut
    return np.array([f"Y={yy},X*{'>' if h else '<='}{cut:g}" for yy, h in zip(y, hi)], dtype=object)


def _x_strata(x_star, cuts):
    cuts = np.sort(np.atleast_1d(np.asarray(cuts, dtype=float)))
    return np.searchsorted(cuts, x_star, side="left")


def _opt_labels(y, x_star, cuts):
    return np.array([f"Y={a},XD={b}" for a, b in zip(y, _x_strata(x_star, cuts))], dtype=object)


def select_validation(
    spec: DesignSpec,
    data,
    residuals=None,
    exclude=(),
) -> ValidationSelection:
    """Choose ``spec.n`` patients to validate.

    ``data`` is Phase I data (a ``TwoPhaseDataset`` is accepted but only its
    Phase I part is read). ``residuals`` are required for RS and for ETS on
    residuals. Patients in ``exclude`` (earlier waves) are never selected.
    Equal ranking scores are broken by ascending patient id.
    """
    p1: PhaseOneData = data.phase_one if isinstance(data, TwoPhaseDataset) else data
    ids, y, xs = p1.ids, p1.y, p1.x_star
    rank = _id_rank(ids)
    eligible = ~np.isin(ids, list(exclude)) if len(exclude) else np.ones(len(p1), dtype=bool)
    kind, n = spec.kind, spec.n
    rng_for = lambda label: make_rng(spec.seed, "design", kind, label)  # noqa: E731

    score = None
    src = spec.params.get("score", "x_star")
    if kind == "RS" or (kind == "ETS" and isinstance(src, str) and src == "residual"):
        if residuals is None:
            raise DataError(f"{kind} design needs naive-model residuals")
        score = np.asarray(residuals, dtype=float)
    elif kind == "ETS":
        score = xs if isinstance(src, str) and src == "x_star" else np.asarray(src, dtype=float)
    if score is not None:
        if score.shape != (len(p1),):
            raise DataError("ranking score must have one entry per patient")
        eligible &= ~np.isnan(score)
    if kind in ("BCC", "OPT"):
        eligible &= ~np.isnan(xs)

    pool = np.flatnonzero(eligible)
    if n > len(pool):
        raise StratumQuotaError(f"budget {n} exceeds the {len(pool)} eligible patients", {"all": (len(pool), n)})

    strata = np.full(len(p1), "all", dtype=object)
    if kind == "SRS":
        chosen = _draw(rng_for("all"), pool, rank, n)
    elif kind == "CC":
        strata = np.array([f"Y={v}" for v in y], dtype=object)
        pools = {lab: pool[strata[pool] == lab] for lab in ("Y=0", "Y=1")}
        quotas = {lab: n // 2 for lab in pools}
        _check_quotas(pools, quotas)
        chosen = np.concatenate([_draw(rng_for(lab), pools[lab], rank, quotas[lab]) for lab in sorted(pools)])
    elif kind == "BCC":
        cut = float(spec.params.get("cut", np.nanmedian(xs)))
        strata = _bcc_labels(y, np.nan_to_num(xs, nan=-1.0), cut)
        labels = [f"Y={a},X*{b}{cut:g}" for a in (0, 1) for b in ("<=", ">")]
        pools = {lab: pool[strata[pool] == lab] for lab in labels}
        quotas = {lab: n // 4 for lab in labels}
        _check_quotas(pools, quotas)
        chosen = np.concatenate([_draw(rng_for(lab), pools[lab], rank, quotas[lab]) for lab in labels])
    elif kind == "OPT":
        cuts = spec.params.get("cuts", [float(np.nanmedian(xs))])
        strata = _opt_labels(y, np.nan_to_num(xs, nan=-1.0), cuts)
        labels = sorted(set(strata[pool]))
        pools = {lab: pool[strata[pool] == lab] for lab in labels}
        info = spec.params.get("info")
        if info is None:
            info = stratum_influence_variance(p1, strata, spec.params.get("beta"), pool)
        sizes = np.array([len(pools[lab]) for lab in labels])
        alloc = allocate_optimal(sizes, np.array([float(info.get(lab, 0.0)) for lab in labels]), n)
        quotas = dict(zip(labels, alloc.tolist()))
        chosen = np.concatenate([_draw(rng_for(lab), pools[lab], rank, quotas[lab]) for lab in labels])
    elif kind in ("ETS", "RS"):
        half = n // 2
        s = score[pool]
        r = rank[pool]
        low = pool[np.lexsort((r, s))][:half]
        rest = pool[~np.isin(pool, low)]
        high = rest[np.lexsort((rank[rest], -score[rest]))][:half]
        chosen = np.concatenate([low, high])
        strata = np.full(len(p1), "", dtype=object)
        strata[low] = "low"
        strata[high] = "high"
    chosen = np.asarray(chosen, dtype=int)
    labels_out = strata[chosen]
    counts = {str(k): int(v) for k, v in zip(*np.unique(labels_out.astype(str), return_counts=True))}
    return ValidationSelection(ids[chosen], labels_out, counts, spec)


def stratum_influence_variance(p1: PhaseOneData, strata, beta=None, pool=None) -> dict:
    """Per-stratum variance of the naive-model influence function for the X coefficient.

    ``beta`` are pilot coefficients; by default the naive model is fit to the
    Phase I data.
    """
    from alistudy.logit import fit_logistic

    ok = p1.has_x_star if pool is None else np.isin(np.arange(len(p1)), pool) & p1.has_x_star
    X = p1.design_matrix()[ok]
    y = p1.y[ok]
    if beta is None:
        beta = fit_logistic(p1.subset(ok)).beta
    mu = expit(X @ np.asarray(beta, dtype=float))
    info = (X * (mu * (1 - mu))[:, None]).T @ X / len(y)
    infl = (X * (y - mu)[:, None]) @ np.linalg.inv(info)[:, 1]
    lab = np.asarray(strata)[ok]
    out = {}
    for s in sorted(set(lab)):
        v = infl[lab == s]
        out[s] = float(np.var(v, ddof=1)) if len(v) > 1 else 0.0
    return out


def stratified_variance(alloc, sizes, info) -> float:
    """Approximate variance sum_h N_h^2 info_h / n_h (zero-information strata contribute 0)."""
    alloc = np.asarray(alloc, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    info = np.asarray(info, dtype=float)
    active = info > 0
    if (alloc[active] <= 0).any():
        return float("inf")
    return float(np.sum(sizes[active] ** 2 * info[active] / alloc[active]))


def allocate_optimal(sizes, info, n: int, window: int = 2, max_combos: int = 2_000_000) -> np.ndarray:
    """Integer allocation of ``n`` across strata minimizing ``stratified_variance``.

    Starts from the continuous Neyman allocation (proportional to
    N_h * sqrt(info_h), capped at stratum sizes with the overflow
    redistributed), then searches all integer neighbours within ``window`` of it.
    """
    sizes = np.asarray(sizes, dtype=int)
    info = np.asarray(info, dtype=float)
    if sizes.shape != info.shape:
        raise ConfigurationError("sizes and info must have one entry per stratum")
    if (info < 0).any() or not np.isfinite(info).all():
        raise ConfigurationError("stratum information must be finite and non-negative")
    if n > sizes.sum():
        raise StratumQuotaError(f"budget {n} exceeds total stratum size {sizes.sum()}", {"all": (int(sizes.sum()), n)})
    if not (info > 0).any():
        raise DegenerateInputError("pilot carries no information in any stratum; fall back to a BCC design")

    weight = sizes * np.sqrt(info)
    cont = np.zeros(len(sizes))
    free = weight > 0
    remaining = float(n)
    while True:
        share = np.where(free, weight, 0.0)
        if share.sum() == 0:
            break
        trial = np.where(free, remaining * share / share.sum(), 0.0) + np.where(~free, cont, 0.0)
        over = free & (trial > sizes)
        if not over.any():
            cont = trial
            break
        cont[over] = sizes[over]
        free &= ~over
        remaining = n - cont[~free].sum()
    # budget left over once every informative stratum is full goes to the rest
    leftover = n - cont.sum()
    if leftover > 1e-9:
        room = np.where(info == 0, sizes - cont, 0)
        cont += leftover * room / room.sum()

    active = np.flatnonzero((cont > 0) | (info > 0))
    base = np.floor(cont).astype(int)
    best, best_v = None, float("inf")
    ranges = [range(max(0, base[h] - window), min(sizes[h], base[h] + window + 1) + 1) for h in active]
    n_combos = np.prod([len(r) for r in ranges], dtype=float)
    if n_combos <= max_combos:
        fixed = n - base.sum() + base[active].sum()
        for combo in itertools.product(*ranges):
            if sum(combo) != fixed:
                continue
            alloc = base.copy()
            alloc[active] = combo
            v = stratified_variance(alloc, sizes, info)
            if v < best_v - 1e-12 * max(1.0, abs(best_v)):
                best, best_v = alloc, v
    if best is None:
        best = _greedy_allocation(sizes, info, n)
    return best


def _greedy_allocation(sizes, info, n):
    """Marginal-gain allocation; exact for this separable convex objective."""
    alloc = np.zeros(len(sizes), dtype=int)
    active = info > 0
    alloc[active & (sizes > 0)] = 1
    if alloc.sum() > n:
        need = int(alloc.sum())
        raise StratumQuotaError(
            f"budget {n} is smaller than the {need} informative strata, each of which needs one patient",
            {"budget": (n, need)},
        )
    c = sizes.astype(float) ** 2 * info
    while alloc.sum() < n:
        gain = np.where(active & (alloc < sizes), c / np.maximum(alloc, 1) - c / (alloc + 1), -np.inf)
        if not np.isfinite(gain).any() or gain.max() <= 0:
            room = np.flatnonzero(alloc < sizes)
            alloc[room[0]] += 1
            continue
        alloc[int(np.argmax(gain))] += 1
    return alloc
