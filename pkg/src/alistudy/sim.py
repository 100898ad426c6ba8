"""Synthetic cohorts and replicated design-comparison experiments.

Generating mechanism, per patient:

1. ten true stressors, independent Bernoulli with component prevalences;
2. age uniform on [18, 65], Z = (age - 18) / 10;
3. each component missing from the EHR with its own probability; non-missing
   stressors are flipped according to per-component TPR / FPR, and X* is the
   proportion of observed stressors;
4. validation reveals the true stressor of every non-missing component and,
   independently with the recovery probability, of each missing component;
   the validated ALI is the proportion over the resolved components;
5. Y ~ Bernoulli(expit(b0 + b1 X + b2 Z)) with X the true ALI over all ten
   components (``outcome_exposure="full"``) or the validated ALI
   (``"validated"``).

With full recovery the validated ALI equals the full true ALI. Under the
default ``"full"`` outcome, partial recovery leaves the validated ALI itself
error-prone, which is what makes the corrected estimator biased when recovery
is low.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from alistudy.ali import COMPONENTS
from alistudy.data import PhaseOneData, TwoPhaseDataset
from alistudy.designs import DesignSpec, select_validation
from alistudy.errors import AliStudyError, ConfigurationError, DataError
from alistudy.logit import compute_residuals, fit_logistic
from alistudy.seeding import derive_seed
from alistudy.smle import default_basis, em_fit

REFERENCE_BETA = (-1.383, 0.945, 0.103)

# Fitted by ``calibrate_prevalence`` (scripts/calibrate_prevalence.py) so the
# median error-prone ALI is 1/3 at N = 10000 under the default missingness.
PREVALENCE_DECAY = 0.85
PREVALENCE_SCALE = 0.55  # derived: see scripts/calibrate_prevalence.py

# Per-component missingness: vitals almost always present, metabolic labs
# missing ~21%, two rare inflammation labs missing >95%. Mean number of
# non-missing components is about 6.5.
DEFAULT_MISSINGNESS = (0.01, 0.01, 0.05, 0.21, 0.21, 0.96, 0.45, 0.30, 0.30, 0.97)


def decreasing_prevalence(scale: float = PREVALENCE_SCALE, decay: float = PREVALENCE_DECAY) -> tuple:
    return tuple(float(min(0.95, scale * decay**c)) for c in range(len(COMPONENTS)))


def _vec(value, name) -> np.ndarray:
    try:
        arr = np.broadcast_to(np.asarray(value, dtype=float), (len(COMPONENTS),)).copy()
    except ValueError:
        raise ConfigurationError(f"{name} must be a scalar or one value per component") from None
    if ((arr < 0) | (arr > 1)).any() or np.isnan(arr).any():
        raise ConfigurationError(f"{name} must be probabilities in [0, 1]")
    return arr


@dataclass
class SimConfig:
    N: int = 1000
    n: int = 100
    beta: tuple = REFERENCE_BETA
    age_range: tuple = (18.0, 65.0)
    prevalence: tuple = field(default_factory=decreasing_prevalence)
    missingness: tuple = DEFAULT_MISSINGNESS
    tpr: object = 1.0
    fpr: object = 0.0
    recovery: object = 1.0
    replicates: int = 500
    seed: int = 2024
    n_basis: Optional[int] = None
    spline_order: int = 2
    grid_extend: str = "observed"
    outcome_exposure: str = "full"
    em_tol: float = 1e-8
    em_max_iter: int = 1000
    em_accelerate: bool = True
    model_se: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.N < 1 or self.n < 0 or self.n > self.N:
            raise ConfigurationError(f"need 0 <= n <= N, got n={self.n}, N={self.N}")
        if len(self.beta) != 3:
            raise ConfigurationError("beta must have 3 entries (intercept, ALI, age)")
        self.beta = tuple(float(b) for b in self.beta)
        for name in ("prevalence", "missingness", "tpr", "fpr", "recovery"):
            _vec(getattr(self, name), name)
        if self.outcome_exposure not in ("full", "validated"):
            raise ConfigurationError("outcome_exposure must be 'full' or 'validated'")
        lo, hi = self.age_range
        if not lo < hi:
            raise ConfigurationError("age_range must be increasing")

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class SimPopulation:
    ids: np.ndarray
    z: np.ndarray
    y: np.ndarray
    true_stressors: np.ndarray  # (N, 10) 0/1
    observed_stressors: np.ndarray  # (N, 10) with NaN for missing
    resolved: np.ndarray  # (N, 10) bool: component known after validation
    x_true: np.ndarray
    x_star: np.ndarray
    x_validated: np.ndarray

    def phase_one(self) -> PhaseOneData:
        keep = ~np.isnan(self.x_star)
        return PhaseOneData(self.ids[keep], self.y[keep], self.x_star[keep], self.z[keep])


def generate_population(config: SimConfig, replicate_seed: int) -> SimPopulation:
    rng = np.random.Generator(np.random.PCG64(replicate_seed))
    N, C = config.N, len(COMPONENTS)
    prev = _vec(config.prevalence, "prevalence")
    miss = _vec(config.missingness, "missingness")
    tpr = _vec(config.tpr, "tpr")
    fpr = _vec(config.fpr, "fpr")
    rec = _vec(config.recovery, "recovery")

    true = (rng.random((N, C)) < prev).astype(int)
    lo, hi = config.age_range
    z = (rng.uniform(lo, hi, N) - 18.0) / 10.0
    x_true = true.mean(axis=1)
    missing = rng.random((N, C)) < miss
    u = rng.random((N, C))
    obs_if_present = np.where(true == 1, u < tpr, u < fpr).astype(float)
    observed = np.where(missing, np.nan, obs_if_present)
    n_obs = (~missing).sum(axis=1)
    if (n_obs == 0).all():
        raise DataError("every patient has all ten components missing; X* is absent for the whole cohort")
    with np.errstate(invalid="ignore", divide="ignore"):
        x_star = np.where(n_obs > 0, np.nansum(observed, axis=1) / np.maximum(n_obs, 1), np.nan)

    recovered = missing & (rng.random((N, C)) < rec)
    resolved = ~missing | recovered
    n_res = resolved.sum(axis=1)
    x_val = np.where(n_res > 0, (true * resolved).sum(axis=1) / np.maximum(n_res, 1), np.nan)
    b0, b1, b2 = config.beta
    x_out = x_true if config.outcome_exposure == "full" else np.nan_to_num(x_val)
    y = (rng.random(N) < expit(b0 + b1 * x_out + b2 * z)).astype(int)
    return SimPopulation(np.arange(N), z, y, true, observed, resolved, x_true, x_star, x_val)


def calibrate_prevalence(
    target_median: float = 1 / 3,
    decay: float = PREVALENCE_DECAY,
    N: int = 10000,
    seed: int = 7,
    base: SimConfig | None = None,
) -> float:
    """Scale of ``decreasing_prevalence`` putting the median X* at ``target_median``.

    The median of a proportion with small denominators is a step function of
    the scale, so the midpoint of the bracket giving the target is returned.
    """
    base = base or SimConfig()

    def median_for(scale):
        cfg = base.with_(N=N, n=0, prevalence=decreasing_prevalence(scale, decay))
        return float(np.nanmedian(generate_population(cfg, seed).x_star))

    grid = np.linspace(0.2, 1.0, 161)
    hits = [s for s in grid if abs(median_for(s) - target_median) < 1e-9]
    if not hits:
        raise DataError("no prevalence scale attains the target median")
    return float(round((min(hits) + max(hits)) / 2, 4))


# ---------------------------------------------------------------------------
# replicated experiments


@dataclass
class ReplicateResult:
    replicate: int
    naive_beta1: float
    estimates: dict  # design -> beta1 (NaN on failure)
    model_se: dict
    converged: dict
    iterations: dict


def _one_replicate(args) -> ReplicateResult:
    config, designs, r = args
    rseed = derive_seed(config.seed, "replicate", r)
    pop = generate_population(config, rseed)
    p1 = pop.phase_one()
    keep = ~np.isnan(pop.x_star)
    x_val_all = pop.x_validated[keep]
    est, ses, conv, iters = {}, {}, {}, {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            naive = fit_logistic(p1)
            naive_b1 = float(naive.beta[1])
            resid = compute_residuals(naive, p1)
        except AliStudyError:
            naive_b1, resid = float("nan"), None
        for kind in designs:
            est[kind], ses[kind], conv[kind], iters[kind] = float("nan"), float("nan"), False, 0
            try:
                spec = DesignSpec(kind, config.n, seed=derive_seed(rseed, "design", kind))
                sel = select_validation(spec, p1, residuals=resid)
                v = np.isin(p1.ids, sel.ids)
                data = TwoPhaseDataset(p1, v, np.where(v, x_val_all, np.nan))
                basis = default_basis(data, order=config.spline_order, n_basis=config.n_basis)
                fit = em_fit(
                    data, basis=basis, init=None if resid is None else naive.beta,
                    tol=config.em_tol, max_iter=config.em_max_iter, extend=config.grid_extend,
                    accelerate=config.em_accelerate,
                )
                est[kind], conv[kind], iters[kind] = float(fit.beta[1]), bool(fit.converged), fit.em_iterations
                if config.model_se:
                    from alistudy.smle import profile_se

                    ses[kind] = float(profile_se(fit, data, basis=basis, extend=config.grid_extend).se[1])
            except AliStudyError:
                pass
            except np.linalg.LinAlgError:
                pass
    return ReplicateResult(r, naive_b1, est, ses, conv, iters)


def run_replicates(
    config: SimConfig,
    designs: Sequence[str] = ("SRS", "CC", "BCC", "RS"),
    scenario: str = "default",
    progress=None,
) -> "DesignComparisonTable":
    """Run ``config.replicates`` replicates of every design on shared cohorts.

    Replicate r uses a seed derived from (master seed, r) only, so results do
    not depend on execution order or on ``n_jobs``; aggregation is done in
    replicate order after all results are in.
    """
    if config.replicates < 2:
        raise ConfigurationError("need at least 2 replicates")
    designs = [DesignSpec(k, 0).kind for k in designs]
    jobs = [(config, tuple(designs), r) for r in range(config.replicates)]
    t0 = time.time()
    if config.n_jobs and config.n_jobs > 1:
        with ProcessPoolExecutor(config.n_jobs) as ex:
            results = list(ex.map(_one_replicate, jobs, chunksize=max(1, len(jobs) // (4 * config.n_jobs))))
    else:
        results = []
        for j in jobs:
            results.append(_one_replicate(j))
            if progress:
                progress(len(results), len(jobs))
    results.sort(key=lambda rr: rr.replicate)
    return DesignComparisonTable.from_results(scenario, config, designs, results, time.time() - t0)


@dataclass
class DesignComparisonTable:
    cells: pd.DataFrame
    replicates: dict = field(default_factory=dict)  # scenario -> per-replicate frame

    @classmethod
    def from_results(cls, scenario, config, designs, results, elapsed=float("nan")):
        true_b1 = config.beta[1]
        R = len(results)
        naive = np.array([rr.naive_beta1 for rr in results])
        rows = []
        rep_rows = []
        for kind in designs:
            b = np.array([rr.estimates[kind] for rr in results])
            conv = np.array([rr.converged[kind] for rr in results])
            se = np.array([rr.model_se[kind] for rr in results])
            ok = np.isfinite(b)
            fails = int((~ok | ~conv).sum())
            bb = b[ok]
            emp_se = float(np.std(bb, ddof=1)) if len(bb) > 1 else float("nan")
            rows.append({
                "scenario": scenario,
                "design": kind,
                "replicates": R,
                "true_beta1": true_b1,
                "mean_beta1": float(bb.mean()) if len(bb) else float("nan"),
                "bias": float(bb.mean() - true_b1) if len(bb) else float("nan"),
                "mc_se_bias": emp_se / math.sqrt(len(bb)) if len(bb) > 1 else float("nan"),
                "empirical_se": emp_se,
                "mean_model_se": float(np.nanmean(se)) if np.isfinite(se).any() else float("nan"),
                "failures": fails,
                "flagged": fails > 0.10 * R,
                "naive_bias": float(np.nanmean(naive) - true_b1),
                "naive_mc_se": float(np.nanstd(naive, ddof=1) / math.sqrt(np.isfinite(naive).sum())),
                "elapsed_s": elapsed,
            })
            for rr, val, c in zip(results, b, conv):
                rep_rows.append({"replicate": rr.replicate, "design": kind, "beta1": val, "converged": bool(c),
                                 "naive_beta1": rr.naive_beta1, "iterations": rr.iterations[kind]})
        cells = pd.DataFrame(rows)
        ref = cells.loc[cells.design == "SRS", "empirical_se"]
        ref_var = float(ref.iloc[0]) ** 2 if len(ref) else float("nan")
        cells["relative_efficiency"] = cells["empirical_se"] ** 2 / ref_var
        return cls(cells, {scenario: pd.DataFrame(rep_rows)})

    @classmethod
    def concat(cls, tables: Sequence["DesignComparisonTable"]) -> "DesignComparisonTable":
        reps = {}
        for t in tables:
            reps.update(t.replicates)
        return cls(pd.concat([t.cells for t in tables], ignore_index=True), reps)

    def cell(self, scenario, design) -> pd.Series:
        sel = self.cells[(self.cells.scenario == scenario) & (self.cells.design == design)]
        if sel.empty:
            raise KeyError((scenario, design))
        return sel.iloc[0]

    def long_format(self) -> pd.DataFrame:
        metrics = ["bias", "mc_se_bias", "empirical_se", "mean_model_se", "relative_efficiency", "failures"]
        return self.cells.melt(id_vars=["scenario", "design"], value_vars=metrics, var_name="metric", value_name="value")


def run_scenarios(base: SimConfig, scenarios: dict, designs=("SRS", "CC", "BCC", "RS"), progress=None) -> DesignComparisonTable:
    """Run ``run_replicates`` for each named override set in ``scenarios``."""
    tables = []
    for name, overrides in scenarios.items():
        tables.append(run_replicates(base.with_(**overrides), designs, scenario=name, progress=progress))
    return DesignComparisonTable.concat(tables)


def summarize_designs(table: DesignComparisonTable, rel_tol: float = 1e-12) -> pd.DataFrame:
    """Rank designs by empirical SE within each scenario.

    Designs whose SEs agree within ``rel_tol`` share a rank (and ``tied`` is
    set); ``winner`` lists every design at rank 1.
    """
    if table.cells.empty:
        raise DataError("empty design comparison table")
    out = []
    for scen, grp in table.cells.groupby("scenario", sort=False):
        grp = grp.sort_values(["empirical_se", "design"]).reset_index(drop=True)
        ses = grp["empirical_se"].to_numpy()
        ranks = []
        for i, s in enumerate(ses):
            if i and abs(s - ses[i - 1]) <= rel_tol * max(abs(s), 1e-300):
                ranks.append(ranks[-1])
            else:
                ranks.append(i + 1)
        grp["rank"] = ranks
        grp["tied"] = grp["rank"].map(grp["rank"].value_counts()) > 1
        winners = grp.loc[grp["rank"] == 1, "design"].tolist()
        grp["winner"] = ",".join(winners)
        out.append(grp[["scenario", "design", "rank", "tied", "winner", "empirical_se", "relative_efficiency", "bias"]])
    return pd.concat(out, ignore_index=True)


ACCEPTANCE_SCENARIOS = {
    "low_error_full_recovery": {"tpr": 1.0, "fpr": 0.005, "recovery": 1.0},
    "low_error_high_recovery": {"tpr": 1.0, "fpr": 0.005, "recovery": 0.9},
    "low_error_moderate_recovery": {"tpr": 1.0, "fpr": 0.005, "recovery": 0.5},
}
