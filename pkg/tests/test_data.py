import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_trial
from swmrs.data import (
    TrialDataset, cluster_period_summary, derive_layout, load_trial_csv, write_trial_csv,
)
from swmrs.errors import (
    BaselineTreated, FinalPeriodUntreated, InvalidTreatmentValue, MissingColumn,
    MixedTreatmentWithinCell, MonotonicityViolation, NoRolloutPeriod, NonNumericValue,
    TooFewPeriods,
)
from swmrs.simulation import ScenarioConfig, generate, randomize_rollout


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_csv_loads(tmp_path):
    p = write(tmp_path, "cluster,period,treatment,outcome\n1,1,0,1.0\n1,2,1,2.0\n2,1,0,0.5\n2,2,0,1.5\n")
    d = load_trial_csv(p)
    assert d.n_clusters == 2 and d.n_periods == 2
    assert (d.counts == 1).all()
    with pytest.raises(TooFewPeriods):
        derive_layout(d)


def test_monotonicity_violation_found_by_layout(tmp_path):
    rows = ["cluster,period,treatment,outcome"]
    for c, zs in [(1, (0, 1, 1)), (2, (0, 0, 1)), (3, (0, 1, 0))]:
        rows += [f"{c},{j + 1},{z},0.0" for j, z in enumerate(zs)]
    d = load_trial_csv(write(tmp_path, "\n".join(rows) + "\n"))
    with pytest.raises(MonotonicityViolation) as e:
        derive_layout(d)
    assert e.value.context["cluster"] == 3


def test_missing_and_non_numeric_columns(tmp_path):
    with pytest.raises(MissingColumn) as e:
        load_trial_csv(write(tmp_path, "cluster,period,treatment\n1,1,0\n"))
    assert e.value.context["column"] == "outcome"
    with pytest.raises(NonNumericValue) as e:
        load_trial_csv(write(tmp_path, "cluster,period,treatment,outcome\n1,1,0,abc\n"))
    assert e.value.context["row"] == 1 and e.value.context["column"] == "outcome"
    with pytest.raises(InvalidTreatmentValue):
        load_trial_csv(write(tmp_path, "cluster,period,treatment,outcome\n1,1,2,0\n"))


def test_mixed_treatment_within_cell():
    with pytest.raises(MixedTreatmentWithinCell):
        TrialDataset.from_arrays([1, 1], [1, 1], [0, 1], [0.0, 1.0])


def test_schema_remapping_and_covariate_selection(tmp_path):
    p = write(tmp_path, "site,time,arm,y,age,noise\n" +
              "".join(f"{c},{j},{int(j >= c + 1)},{c * j},{c},{j}\n" for c in (1, 2) for j in (1, 2, 3)))
    d = load_trial_csv(p, {"cluster": "site", "period": "time", "treatment": "arm", "outcome": "y"},
                       ["age"])
    assert d.covariate_names == ("age",)
    assert d.n_clusters == 2 and d.n_periods == 3


def test_scenario_c1_round_trip(tmp_path):
    d = generate(ScenarioConfig("C1"), 3)
    assert d.counts.min() >= 20 and d.counts.max() <= 100
    p = tmp_path / "c1.csv"
    write_trial_csv(d, p)
    back = load_trial_csv(p)
    assert back == d


def test_propensity_examples():
    c = np.repeat([1, 2, 3, 4], 3)
    j = np.tile([1, 2, 3], 4)
    adopt = np.repeat([2, 2, 3, 3], 3)
    d = TrialDataset.from_arrays(c, j, (j >= adopt).astype(int), np.zeros(12))
    np.testing.assert_allclose(derive_layout(d).propensity, [0, 0.5, 1])
    d2 = TrialDataset.from_arrays(c, j, (j >= 2).astype(int), np.zeros(12))
    with pytest.raises(NoRolloutPeriod):
        derive_layout(d2)
    adopt = randomize_rollout(30, 6, 1)
    cl = np.repeat(np.arange(30), 6)
    pe = np.tile(np.arange(1, 7), 30)
    d3 = TrialDataset.from_arrays(cl, pe, (pe >= adopt[cl]).astype(int), np.zeros(180))
    np.testing.assert_allclose(derive_layout(d3).propensity, [0, 0.2, 0.4, 0.6, 0.8, 1])


def test_boundary_period_checks():
    c = np.repeat([1, 2], 3)
    j = np.tile([1, 2, 3], 2)
    with pytest.raises(BaselineTreated):
        derive_layout(TrialDataset.from_arrays(c, j, np.ones(6, int), np.zeros(6)))
    z = np.array([0, 1, 1, 0, 0, 0])
    with pytest.raises(FinalPeriodUntreated):
        derive_layout(TrialDataset.from_arrays(c, j, z, np.zeros(6)))


def test_cluster_period_summary_weighted_means():
    d = TrialDataset.from_arrays([1, 1, 2, 2, 2], [1, 1, 1, 1, 1], [0] * 5, [3, 5, 0, 2, 4])
    s = cluster_period_summary(d, np.ones(5))
    assert s.ybar.tolist() == [4.0, 2.0]
    s = cluster_period_summary(d, np.array([1, 1, 1, 1, 2.0]))
    assert s.ybar.tolist()[1] == pytest.approx(2.5)
    d1 = TrialDataset.from_arrays([1, 1, 1], [1, 1, 1], [0] * 3, [1.0, 1.0, 1.0])
    assert cluster_period_summary(d1, np.array([0.2, 3.0, 7.0])).ybar[0] == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_row_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    d = random_trial(rng)
    perm = rng.permutation(d.n_rows)
    labels = np.array(d.cluster_labels)[d.cluster]
    shuffled = TrialDataset.from_arrays(labels[perm], d.period[perm], d.treatment[perm],
                                        d.outcome[perm], d.covariates[perm])
    np.testing.assert_array_equal(shuffled.counts, d.counts)
    np.testing.assert_allclose(np.nan_to_num(shuffled.cell_means()), np.nan_to_num(d.cell_means()))


def test_rollout_allocation():
    a = randomize_rollout(30, 6, 5)
    assert np.bincount(a, minlength=7)[2:].tolist() == [6] * 5
    assert np.bincount(randomize_rollout(4, 3, 0), minlength=4)[2:].tolist() == [2, 2]
    np.testing.assert_array_equal(randomize_rollout(30, 6, 9), randomize_rollout(30, 6, 9))
    counts = np.bincount(randomize_rollout(13, 5, 2), minlength=6)[2:]
    assert counts.tolist() == [4, 3, 3, 3]
