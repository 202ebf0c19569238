import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swmrs import simulation
from swmrs.simulation import (
    ScenarioConfig, expected_size, generate, generate_binary, generate_continuous,
    randomize_rollout, run_monte_carlo, theta, true_estimands,
)


def test_rollout_equal_allocation():
    a = randomize_rollout(30, 6, seed=3)
    treated = [(a <= j).sum() for j in range(1, 7)]
    assert treated == [0, 6, 12, 18, 24, 30]
    assert sorted(np.bincount(randomize_rollout(4, 3, 1))[2:]) == [2, 2]
    np.testing.assert_array_equal(randomize_rollout(30, 6, 9), randomize_rollout(30, 6, 9))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(3, 8), st.integers(0, 10**6))
def test_rollout_counts_differ_by_at_most_one(I, J, seed):
    counts = np.bincount(randomize_rollout(I, J, seed), minlength=J + 1)[2:]
    assert counts.sum() == I and counts.max() - counts.min() <= 1


def test_theta_formula_values():
    assert theta("C1", 0, 0, 50, 3, 6, 60) == pytest.approx(2.0)
    assert theta("B1", 0, 0, 20, 2, 4, 27) == pytest.approx(1.0)
    nbar = 57.3
    oracle = 0.5 - 0 - 1.5 + 4 * np.sqrt(60) / (5 * nbar) + 3 * np.log(60) * 60 ** 2 / (2 * 60 ** 2)
    assert expected_size("C2", 3) == 60
    assert theta("C2", 0, 0, 60, 3, 6, nbar) == pytest.approx(oracle, rel=1e-14)


def test_noise_free_outcome_is_baseline_plus_effect(monkeypatch):
    monkeypatch.setattr(simulation, "_variances", lambda binary: (0.0, 0.0, 0.0))
    cfg = ScenarioConfig("C1", n_clusters=6, seed=4)
    d = generate(cfg)
    x1, x2 = d.covariates.T
    th = 1 + np.sin(x1) + np.exp(-x2)
    base = simulation.baseline(False, x1, x2, d.period, 6)
    np.testing.assert_allclose(d.potential_outcomes[:, 0], base, atol=1e-12)
    np.testing.assert_allclose(d.potential_outcomes[:, 1] - d.potential_outcomes[:, 0], th, atol=1e-12)


@pytest.mark.parametrize("scenario", ["C2", "B3", "KC"])
def test_generation_is_deterministic_and_consistent(scenario):
    cfg = ScenarioConfig(scenario, n_clusters=10, seed=11, delta=0.5)
    a, b = generate(cfg, 3), generate(cfg, 3)
    assert a == b
    np.testing.assert_array_equal(a.potential_outcomes, b.potential_outcomes)
    assert not np.array_equal(generate(cfg, 4).outcome[:50], a.outcome[:50])
    picked = a.potential_outcomes[np.arange(a.n_rows), a.treatment]
    np.testing.assert_array_equal(a.outcome, picked)


def test_generator_scenario_checks_and_sizes():
    d = generate_binary(ScenarioConfig("B3", n_clusters=8, seed=1))
    assert set(np.unique(d.outcome)) <= {0.0, 1.0}
    for j in range(1, 5):
        lo, hi = 5 + 5 * j, 45 + 10 * j
        n = d.counts[:, j - 1]
        assert n.min() >= lo and n.max() <= hi
    with pytest.raises(ValueError):
        generate_continuous(ScenarioConfig("B1"))
    with pytest.raises(ValueError):
        generate_binary(ScenarioConfig("C1"))
    with pytest.raises(ValueError):
        ScenarioConfig("Z9")


def test_c1_truth_matches_closed_form():
    t = true_estimands(ScenarioConfig("C1"))
    # E[1 + sin X1 + exp(-X2)] with X1 ~ Bern(0.5), X2 ~ N(0, 0.1)
    closed = 1 + 0.5 * np.sin(1) + np.exp(0.05)
    assert closed == pytest.approx(2.472, abs=5e-4)
    np.testing.assert_allclose(t.values, closed, rtol=1e-2)
    np.testing.assert_allclose(t.values, 2.472, rtol=1e-2)
    assert (t.se >= 0).all()


@pytest.mark.parametrize("scenario", ["C1", "B1"])
def test_non_informative_truths_agree(scenario):
    t = true_estimands(ScenarioConfig(scenario, truth_clusters=20_000))
    spread = t.values.max() - t.values.min()
    assert spread <= 4 * t.se.max() + 1e-9


def test_constant_effect_gives_constant_truth(monkeypatch):
    monkeypatch.setattr(simulation, "theta", lambda *a, **k: np.full(np.shape(a[1]), 1.7))
    t = true_estimands(ScenarioConfig("C2", truth_clusters=10_000))
    np.testing.assert_allclose(t.values, 1.7, atol=1e-12)
    assert t.hcate_cluster_mean == pytest.approx(1.7, abs=1e-12)


def test_truth_requires_large_population():
    with pytest.raises(ValueError):
        true_estimands(ScenarioConfig("C1", truth_clusters=100))


@pytest.mark.xfail(strict=True, reason="published C3 truths not reproducible from the printed DGP; see decisions ledger")
def test_c3_truth_matches_published_values():
    t = true_estimands(ScenarioConfig("C3"))
    np.testing.assert_allclose(t.values, [8.395, 7.857, 8.821, 6.707], rtol=0.02)


@pytest.mark.xfail(strict=True, reason="published B3 truths not reproducible from the printed DGP; see decisions ledger")
def test_b3_truth_matches_published_values():
    t = true_estimands(ScenarioConfig("B3"))
    np.testing.assert_allclose(t.values, [3.195, 2.879, 3.172, 2.524], rtol=0.03)


def test_oracle_method_metrics():
    cfg = ScenarioConfig("C1", n_clusters=6, replicates=3)
    truth = {"h-iate": 2.0, "h-cate": 2.1, "v-iate": 2.2, "v-cate": 2.3}
    tab = run_monte_carlo(cfg, ["oracle"], truth=truth)
    assert (tab.frame.rbias == 0).all() and (tab.frame.cp == 1).all()
    assert (tab.frame.completion == 1).all()


def test_monte_carlo_is_deterministic_and_well_formed():
    cfg = ScenarioConfig("C1", n_clusters=10, replicates=4, seed=5)
    truth = dict.fromkeys(["h-iate", "h-cate", "v-iate", "v-cate"], 2.472)
    a = run_monte_carlo(cfg, ["unadj", "mrs:W1"], truth=truth)
    b = run_monte_carlo(cfg, ["unadj", "mrs:W1"], truth=truth, threads=2)
    assert a.frame.equals(b.frame)
    assert len(a.frame) == 8
    f = a.frame
    assert ((f.cp >= 0) & (f.cp <= 1)).all() and (f.mcsd >= 0).all() and (f.aese >= 0).all()
    est = a.replicates.query("method == 'unadj' and estimand == 'h-iate'").estimate
    assert a.value("unadj", "h-iate", "rbias") == pytest.approx(abs(est.mean() - 2.472) / 2.472 * 100)


def test_failed_replicates_are_counted(monkeypatch):
    from swmrs.errors import RankDeficientDesign
    real = simulation.loco_replicates

    def flaky(data, methods, *a, **k):
        if any(m.name == "mrs:W1" for m in methods) and data.outcome[0] > 0:
            raise RankDeficientDesign(1, 2)
        return real(data, methods, *a, **k)

    monkeypatch.setattr(simulation, "loco_replicates", flaky)
    cfg = ScenarioConfig("C1", n_clusters=10, replicates=4, seed=5)
    tab = run_monte_carlo(cfg, ["unadj", "mrs:W1"], truth=dict.fromkeys(
        ["h-iate", "h-cate", "v-iate", "v-cate"], 2.472))
    assert tab.value("unadj", "h-iate", "completion") == 1.0
    assert tab.value("mrs:W1", "h-iate", "completion") < 1.0
