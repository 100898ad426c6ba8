import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alistudy.data import PhaseOneData, TwoPhaseDataset
from alistudy.designs import (
    KINDS,
    DesignSpec,
    allocate_optimal,
    select_validation,
    stratified_variance,
)
from alistudy.errors import ConfigurationError, DataError, DegenerateInputError, StratumQuotaError
from alistudy.logit import compute_residuals, fit_logistic


def cohort(N, seed=0, shuffle_ids=True):
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, 10, N) / 9
    z = rng.uniform(0, 4.7, N)
    y = (rng.random(N) < 1 / (1 + np.exp(-(-1.4 + 1.5 * xs + 0.1 * z)))).astype(int)
    ids = rng.permutation(N) + 1000 if shuffle_ids else np.arange(N)
    return PhaseOneData(ids, y, xs, z)


def residuals_for(p1):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return compute_residuals(fit_logistic(p1), p1)


def test_rs_takes_extreme_residuals():
    p1 = cohort(948, seed=1)
    r = residuals_for(p1)
    sel = select_validation(DesignSpec("RS", 48), p1, residuals=r)
    assert len(sel) == 48 and sel.counts == {"high": 24, "low": 24}
    chosen = np.isin(p1.ids, sel.ids)
    assert r[chosen].min() == r.min()
    order = np.argsort(r, kind="stable")
    # every selected low residual is no larger than every unselected one, and likewise for high
    low = set(sel.ids[sel.strata == "low"])
    high = set(sel.ids[sel.strata == "high"])
    low_r = r[np.isin(p1.ids, list(low))]
    high_r = r[np.isin(p1.ids, list(high))]
    rest = r[~chosen]
    assert low_r.max() <= rest.min() and high_r.min() >= rest.max()
    assert len(order) == 948


def test_bcc_one_per_stratum():
    p1 = cohort(200, seed=2)
    sel = select_validation(DesignSpec("BCC", 4, params={"cut": 0.33}), p1)
    assert sel.counts == {"Y=0,X*<=0.33": 1, "Y=0,X*>0.33": 1, "Y=1,X*<=0.33": 1, "Y=1,X*>0.33": 1}
    for pid, lab in zip(sel.ids, sel.strata):
        i = int(np.flatnonzero(p1.ids == pid)[0])
        assert lab == f"Y={p1.y[i]},X*{'<=' if p1.x_star[i] <= 0.33 else '>'}0.33"


def test_srs_exhaustive_budget():
    p1 = cohort(50)
    sel = select_validation(DesignSpec("SRS", 50), p1)
    assert sorted(sel.ids) == sorted(p1.ids)


def test_cc_balanced_arms():
    p1 = cohort(300, seed=4)
    sel = select_validation(DesignSpec("CC", 40, seed=3), p1)
    assert sel.counts == {"Y=0": 20, "Y=1": 20}


def test_deficient_strata_are_listed():
    p1 = PhaseOneData(np.arange(10), [1, 0, 0, 0, 0, 0, 0, 0, 0, 0], np.linspace(0, 1, 10), np.zeros(10))
    with pytest.raises(StratumQuotaError) as exc:
        select_validation(DesignSpec("CC", 4), p1)
    assert exc.value.deficient == {"Y=1": (1, 2)}
    assert "Y=1" in str(exc.value)


def test_rs_requires_residuals():
    with pytest.raises(DataError):
        select_validation(DesignSpec("RS", 4), cohort(30))


def test_budget_divisibility():
    with pytest.raises(ConfigurationError):
        DesignSpec("CC", 5)
    with pytest.raises(ConfigurationError):
        DesignSpec("BCC", 6)
    with pytest.raises(ConfigurationError):
        DesignSpec("XYZ", 4)
    DesignSpec("srs", 5)


def test_exclude_and_determinism():
    p1 = cohort(400, seed=5)
    r = residuals_for(p1)
    first = select_validation(DesignSpec("RS", 48), p1, residuals=r)
    again = select_validation(DesignSpec("RS", 48), p1, residuals=r)
    np.testing.assert_array_equal(first.ids, again.ids)
    second = select_validation(DesignSpec("RS", 48), p1, residuals=r, exclude=first.ids.tolist())
    assert not set(first.ids) & set(second.ids)


def test_selection_ignores_row_order():
    p1 = cohort(300, seed=6)
    perm = np.random.default_rng(0).permutation(300)
    q1 = PhaseOneData(p1.ids[perm], p1.y[perm], p1.x_star[perm], p1.z[perm])
    for kind, n in (("SRS", 30), ("CC", 30), ("BCC", 32), ("OPT", 30), ("ETS", 30)):
        a = select_validation(DesignSpec(kind, n, seed=9), p1)
        b = select_validation(DesignSpec(kind, n, seed=9), q1)
        assert sorted(a.ids) == sorted(b.ids), kind


def test_rs_ties_broken_by_id():
    p1 = PhaseOneData([5, 3, 9, 1], [0, 0, 0, 0], [0.5] * 4, np.zeros(4))
    sel = select_validation(DesignSpec("ETS", 2, params={"score": np.zeros(4)}), p1)
    assert sel.ids[sel.strata == "low"].tolist() == [1]
    assert sel.ids[sel.strata == "high"].tolist() == [3]


def test_allocation_examples():
    np.testing.assert_array_equal(allocate_optimal([100, 100], [1.0, 1.0], 20), [10, 10])
    np.testing.assert_array_equal(allocate_optimal([100, 100, 100], [1.0, 0.0, 1.0], 20), [10, 0, 10])
    with pytest.raises(DegenerateInputError, match="BCC"):
        allocate_optimal([10, 10], [0.0, 0.0], 4)


def test_allocation_matches_brute_force():
    sizes, info, n = np.array([1000] * 4), np.array([4.0, 1.0, 1.0, 1.0]), 35
    best = min(
        (a for a in itertools.product(range(n + 1), repeat=3) if sum(a) <= n),
        key=lambda a: stratified_variance((*a, n - sum(a)), sizes, info),
    )
    expected = np.array([*best, n - sum(best)])
    np.testing.assert_array_equal(expected, [14, 7, 7, 7])
    np.testing.assert_array_equal(allocate_optimal(sizes, info, n), expected)


def test_allocation_respects_stratum_sizes():
    alloc = allocate_optimal([3, 100, 100], [100.0, 1.0, 1.0], 40)
    assert alloc[0] == 3 and alloc.sum() == 40 and (alloc <= [3, 100, 100]).all()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 10), st.floats(0.01, 10)), min_size=1, max_size=4), st.integers(1, 20))
def test_allocation_is_integer_optimal(strata, n):
    sizes = np.array([s for s, _ in strata])
    info = np.array([i for _, i in strata])
    if n > sizes.sum():
        return
    if n < len(sizes):
        # some informative stratum would go unsampled
        with pytest.raises(StratumQuotaError):
            allocate_optimal(sizes, info, n)
        return
    alloc = allocate_optimal(sizes, info, n)
    assert alloc.sum() == n and (alloc >= 0).all() and (alloc <= sizes).all()
    v = stratified_variance(alloc, sizes, info)
    for combo in itertools.product(*[range(s + 1) for s in sizes]):
        if sum(combo) == n:
            assert v <= stratified_variance(combo, sizes, info) * (1 + 1e-9)


def expected_quotas(kind, n, strata_labels):
    if kind == "CC":
        return {lab: n // 2 for lab in ("Y=0", "Y=1")}
    if kind == "BCC":
        return {lab: n // 4 for lab in strata_labels}
    if kind in ("ETS", "RS"):
        return {"low": n // 2, "high": n // 2}
    return None


def test_quota_exactness_and_mar_for_all_designs():
    """1000 random cohorts, every design: exact quotas, and selection unchanged when
    the phase-two values are replaced by sentinels."""
    rng = np.random.default_rng(77)
    checked = {k: 0 for k in KINDS}
    for inst in range(1000):
        N = int(rng.integers(40, 160))
        p1 = cohort(N, seed=inst)
        r = residuals_for(p1)
        prior = rng.choice(N, int(rng.integers(0, 6)), replace=False)
        v = np.zeros(N, bool)
        v[prior] = True
        truth = TwoPhaseDataset(p1, v, np.where(v, rng.integers(0, 11, N) / 10, np.nan))
        poisoned = TwoPhaseDataset(p1, v, np.where(v, 0.999999, np.nan))
        for kind in KINDS:
            step = 4 if kind == "BCC" else 2
            n = int(rng.integers(1, 8)) * step
            spec = DesignSpec(kind, n, seed=inst)
            try:
                a = select_validation(spec, truth, residuals=r, exclude=p1.ids[prior])
            except StratumQuotaError as exc:
                assert exc.deficient
                with pytest.raises(StratumQuotaError):
                    select_validation(spec, poisoned, residuals=r, exclude=p1.ids[prior])
                continue
            b = select_validation(spec, poisoned, residuals=r, exclude=p1.ids[prior])
            np.testing.assert_array_equal(a.ids, b.ids)
            assert len(a) == n and len(set(a.ids)) == n
            assert not set(a.ids) & set(p1.ids[prior])
            assert sum(a.counts.values()) == n
            want = expected_quotas(kind, n, a.counts.keys())
            if want is not None:
                assert a.counts == want
            checked[kind] += 1
    assert all(c > 500 for c in checked.values()), checked


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["cube", "exp", "affine"]))
def test_rank_designs_invariant_to_increasing_transforms(seed, how):
    p1 = cohort(120, seed=seed)
    r = residuals_for(p1)
    f = {"cube": lambda s: s**3, "exp": np.exp, "affine": lambda s: 3 * s + 7}[how]
    a = select_validation(DesignSpec("ETS", 20, params={"score": r}), p1)
    b = select_validation(DesignSpec("ETS", 20, params={"score": f(r)}), p1)
    np.testing.assert_array_equal(a.ids, b.ids)
