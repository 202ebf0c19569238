from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import random_trial
from swmrs.data import TrialDataset
from swmrs.errors import LocoDegenerate
from swmrs.estimands import ALL_KINDS
from swmrs.inference import (
    GLOBAL_CONTRAST, f_sf, global_ics_test, global_test_from_replicates, global_test_statistic,
    jackknife, jackknife_variance, loco_replicates, pairwise_ics_test,
    pairwise_test_from_replicates, summarize, t_quantile, t_sf_two_sided,
)
from swmrs.models import preset


def test_jackknife_variance_hand_value():
    assert jackknife_variance([1.0, 2.0, 3.0]) == pytest.approx(4 / 3)


def identical_clusters(I=6, J=4, n=3):
    base = np.arange(n, dtype=float)
    rows = []
    for c in range(I):
        a = 2 + c % (J - 1)
        for j in range(1, J + 1):
            for k in range(n):
                rows.append((c, j, int(j >= a), base[k] + j))
    c, j, z, y = map(np.array, zip(*rows))
    return TrialDataset.from_arrays(c, j, z, y)


def test_identical_clusters_give_zero_se():
    d = identical_clusters()
    for k in ALL_KINDS:
        assert jackknife(d, k).se == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_jackknife_matches_brute_force(seed):
    d = random_trial(np.random.default_rng(seed), min_size=2, max_size=6, loco_safe=True)
    reps = loco_replicates(d, ["unadj", "mrs:W1"], "rd")
    res = summarize(reps)
    for a, adjusted in enumerate((False, True)):
        _, var = oracles.loco_jackknife(d.cluster, d.period, d.treatment, d.outcome,
                                        d.covariates, adjusted)
        for b in range(4):
            assert res[4 * a + b].se ** 2 == pytest.approx(var[b], rel=1e-10, abs=1e-14)


def test_t_and_f_tails_match_mpmath():
    for df in (2, 5, 29, 299):
        for t in (0.1, 1.0, 2.5, 7.0):
            ref = 2 * mpmath.quad(lambda x: mpmath.gamma((df + 1) / 2) / (
                mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2)) * (1 + x ** 2 / df) ** (-(df + 1) / 2),
                [t, mpmath.inf])
            assert float(t_sf_two_sided(t, df)) == pytest.approx(float(ref), rel=1e-10)
        q = t_quantile(0.975, df)
        assert float(t_sf_two_sided(q, df)) == pytest.approx(0.05, rel=1e-10)
    for d1, d2 in ((3, 29), (3, 9), (1, 100)):
        for f in (0.2, 1.0, 4.0):
            x = d1 * f / (d1 * f + d2)
            ref = 1 - mpmath.betainc(d1 / 2, d2 / 2, 0, x, regularized=True)
            assert float(f_sf(f, d1, d2)) == pytest.approx(float(ref), rel=1e-10)
    assert t_quantile(0.975, 29) == pytest.approx(2.045229642132703, rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000))
def test_jackknife_invariant_to_cluster_relabeling(seed):
    rng = np.random.default_rng(seed)
    d = random_trial(rng, loco_safe=True)
    perm = rng.permutation(d.n_clusters) * 7 + 100
    d2 = TrialDataset.from_arrays(perm[d.cluster], d.period, d.treatment, d.outcome, d.covariates)
    a = summarize(loco_replicates(d, ["unadj"], "rd"))
    b = summarize(loco_replicates(d2, ["unadj"], "rd"))
    for x, y in zip(a, b):
        assert x.se == pytest.approx(y.se, rel=1e-10, abs=1e-14)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000))
def test_sigma_consistent_with_difference_se(seed):
    d = random_trial(np.random.default_rng(seed), loco_safe=True)
    for r in summarize(loco_replicates(d, ["unadj", "mrs:W1"], "rd")):
        a = np.array([1.0, -1.0])
        assert np.linalg.eigvalsh(r.sigma).min() > -1e-12
        assert r.se == pytest.approx(np.sqrt(a @ r.sigma @ a), rel=1e-10, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000), st.floats(-100, 100))
def test_global_statistic_ignores_common_shift(seed, c):
    d = random_trial(np.random.default_rng(seed), J=5, min_size=3, loco_safe=True)
    reps = loco_replicates(d, ["mrs:W1"], "rd")
    base = global_test_from_replicates(reps)
    shifted = replace(reps, full=reps.full.copy(), loco=reps.loco.copy())
    shifted.full[..., 2] += c
    shifted.loco[..., 2] += c
    moved = global_test_from_replicates(shifted)
    assert moved.statistic == pytest.approx(base.statistic, rel=1e-6, abs=1e-9)


def test_constant_cluster_sizes_give_null_pairwise_statistic():
    d = identical_clusters()
    rng = np.random.default_rng(0)
    d = d.with_outcome(d.outcome + rng.normal(size=d.n_rows))
    res = pairwise_ics_test(d, None, "H")
    assert res.statistic == 0.0 and res.p_value == 1.0


def test_global_test_hand_oracle():
    tau = np.array([1.1, 1.0, 1.0, 1.0])
    F, p = global_test_statistic(tau, np.eye(4), 20)
    c = GLOBAL_CONTRAST @ tau
    ref = c @ np.linalg.inv(GLOBAL_CONTRAST @ GLOBAL_CONTRAST.T) @ c / 3
    assert F == pytest.approx(ref, rel=1e-12)
    assert p == pytest.approx(float(f_sf(ref, 3, 20)))
    assert global_test_statistic(np.ones(4), np.eye(4), 20) == (0.0, 1.0)


def test_global_and_pairwise_tests_run():
    d = random_trial(np.random.default_rng(3), I=12, J=4, min_size=2, max_size=30)
    g = global_ics_test(d, preset("W1"))
    assert g.df_num == 3 and g.df_den == 11 and 0 <= g.p_value <= 1
    h = pairwise_ics_test(d, preset("W1"), "V")
    assert h.kind == "V_PAIR" and 0 <= h.p_value <= 1


def single_early_adopter():
    # only cluster 0 adopts at period 2
    adopt = [2, 3, 3, 4, 4, 4]
    rows = []
    rng = np.random.default_rng(1)
    for c, a in enumerate(adopt):
        for j in range(1, 5):
            for _ in range(2 + (c + j) % 3):
                rows.append((c, j, int(j >= a), rng.normal() + j))
    c, j, z, y = map(np.array, zip(*rows))
    return TrialDataset.from_arrays(c, j, z, y)


def test_loco_degenerate_policies():
    d = single_early_adopter()
    with pytest.raises(LocoDegenerate) as e:
        loco_replicates(d, ["unadj"], "rd")
    assert e.value.context["period"] == 2
    reps = loco_replicates(d, ["unadj"], "rd", policy="drop-replicate")
    assert reps.valid.sum() == d.n_clusters - 1 and not reps.valid[0]
    reps = loco_replicates(d, ["unadj", "mrs:W1"], "rd", policy="drop-period")
    assert reps.valid.all() and reps.dropped_periods == {0: [2]}
    assert np.isfinite(reps.loco).all()


def test_threads_do_not_change_results():
    d = random_trial(np.random.default_rng(12), I=10, J=4)
    a = loco_replicates(d, ["mrs:W3"], "rd", threads=1)
    b = loco_replicates(d, ["mrs:W3"], "rd", threads=3)
    np.testing.assert_allclose(a.loco, b.loco, rtol=1e-10)


def test_ratio_scale_interval_is_back_transformed():
    d = random_trial(np.random.default_rng(2), I=10, J=4, binary=True, min_size=15, max_size=25)
    r = jackknife(d, "h-iate", preset("W7"), "or")
    assert r.estimate == pytest.approx(np.exp(r.psi_estimate))
    assert r.ci[0] == pytest.approx(np.exp(r.psi_ci[0]))
    assert r.ci[0] < r.estimate < r.ci[1]
    q = t_quantile(0.975, 9)
    assert r.psi_ci[1] - r.psi_estimate == pytest.approx(q * r.se)
    assert pairwise_test_from_replicates(loco_replicates(d, ["unadj"], "or"), "h").df_den == 9
