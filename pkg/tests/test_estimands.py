import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_trial, toy_trial
from swmrs.data import TrialDataset
from swmrs.errors import EmptyArmInPeriod, EmptyCell, ScaleDomainError
from swmrs.estimands import (
    ALL_KINDS, ContrastScale, EstimandKind, apply_contrast, resolve_weights, unadjusted_mu,
)


def constant_size_trial(I=4, J=3, n=3):
    c = np.repeat(np.arange(I), J * n)
    j = np.tile(np.repeat(np.arange(1, J + 1), n), I)
    adopt = 2 + np.arange(I) % (J - 1)
    return TrialDataset.from_arrays(c, j, (j >= adopt[c]).astype(int), np.arange(c.size, dtype=float))


def test_constant_sizes_give_constant_cell_weights():
    I, J, n = 4, 3, 3
    d = constant_size_trial(I, J, n)
    expected = {"h-iate": n, "h-cate": 1 / J, "v-iate": 1 / I, "v-cate": 1}
    for k in ALL_KINDS:
        s = resolve_weights(d, k)
        np.testing.assert_allclose(s.cell, expected[k.value])


def test_hcate_and_hiate_hand_values():
    c = np.repeat([1, 2], [6, 12])
    j = np.concatenate([np.repeat([1, 2, 3], 2), np.repeat([1, 2, 3], 4)])
    z = (j >= np.where(c == 1, 2, 3)).astype(int)
    d = TrialDataset.from_arrays(c, j, z, np.zeros(18))
    hc = resolve_weights(d, "h-cate")
    np.testing.assert_allclose(hc.cell, 1 / 3)
    hi = resolve_weights(d, "h-iate")
    np.testing.assert_allclose(hi.cell, [[2, 2, 2], [4, 4, 4]])
    np.testing.assert_allclose(hi.period, [6, 6, 6])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_weight_aggregation_invariants(seed):
    d = random_trial(np.random.default_rng(seed))
    for k in ALL_KINDS:
        s = resolve_weights(d, k)
        np.testing.assert_allclose(d.cell_sums(s.row), s.cell, rtol=1e-12)
        np.testing.assert_allclose(s.cell.sum(axis=0), s.period, rtol=1e-12)
        np.testing.assert_allclose(s.cell.sum(axis=1), s.cluster, rtol=1e-12)
        assert (s.row > 0).all()
    np.testing.assert_allclose(resolve_weights(d, "h-cate").cluster, 1.0)
    np.testing.assert_allclose(resolve_weights(d, "v-iate").period, 1.0)
    np.testing.assert_allclose(resolve_weights(d, "v-cate").period, d.n_clusters)


def test_unadjusted_toy_values():
    d = toy_trial()
    s = resolve_weights(d, "h-iate")
    assert unadjusted_mu(d, s, 1) == pytest.approx(4.0)
    assert unadjusted_mu(d, s, 0) == pytest.approx(1.5)


def test_unadjusted_unequal_sizes():
    # cluster 1: one row with mean 3; cluster 2: three rows with mean 5
    rows = [(1, 2, 1, 3.0), (2, 2, 1, 4.0), (2, 2, 1, 5.0), (2, 2, 1, 6.0),
            (3, 2, 0, 0.5), (3, 2, 0, 1.5), (4, 2, 0, 1.5), (4, 2, 0, 2.5)]
    for c in (1, 2, 3, 4):
        rows.append((c, 1, 0, 0.0))
        rows.append((c, 3, 1, 0.0))
    c, j, z, y = map(np.array, zip(*rows))
    d = TrialDataset.from_arrays(c, j, z, y)
    assert unadjusted_mu(d, resolve_weights(d, "h-iate"), 1) == pytest.approx(4.5)
    assert unadjusted_mu(d, resolve_weights(d, "v-cate"), 1) == pytest.approx(4.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(-50, 50))
def test_constant_outcomes_give_constant_means(seed, value):
    d = random_trial(np.random.default_rng(seed))
    d = d.with_outcome(np.full(d.n_rows, value))
    for k in ALL_KINDS:
        s = resolve_weights(d, k)
        for z in (0, 1):
            assert unadjusted_mu(d, s, z) == pytest.approx(value, abs=1e-10)


def test_contrast_scales():
    assert apply_contrast("rd", 4, 1.5) == pytest.approx(2.5)
    assert apply_contrast("or", 0.5, 0.5) == pytest.approx(1.0)
    assert ContrastScale.parse("or").psi(1.0) == 0.0
    assert apply_contrast("rr", 0.3, 0.1) == pytest.approx(3.0)
    sc = ContrastScale.parse("or")
    assert sc.psi_contrast(0.3, 0.1) == pytest.approx(np.log(0.3 * 0.9 / (0.7 * 0.1)))
    with pytest.raises(ScaleDomainError):
        ContrastScale.parse("or").contrast(1.2, 0.5)
    with pytest.raises(ScaleDomainError):
        ContrastScale.parse("rr").contrast(0.5, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_psi_contrast_matches_log_of_contrast(a, b):
    for k in ("rr", "or"):
        sc = ContrastScale.parse(k)
        assert sc.psi_contrast(a, b) == pytest.approx(np.log(sc.contrast(a, b)), rel=1e-10, abs=1e-12)
        assert sc.psi_inverse(sc.psi(sc.contrast(a, b))) == pytest.approx(sc.contrast(a, b))


def test_parse_kinds():
    assert EstimandKind.parse("HIATE") is EstimandKind.HIATE
    assert EstimandKind.parse("v_cate") is EstimandKind.VCATE
    with pytest.raises(ValueError):
        EstimandKind.parse("x")


def test_vertical_schemes_reject_empty_rollout_cell():
    d = toy_trial()
    keep = ~((d.cluster == 0) & (d.period == 2))
    sub = TrialDataset.from_arrays(d.cluster[keep], d.period[keep], d.treatment[keep],
                                   d.outcome[keep])
    with pytest.raises(EmptyCell):
        resolve_weights(sub, "v-cate")
    resolve_weights(sub, "h-iate")


def test_empty_arm_in_sample_period():
    # cluster 4 is the only control in period 3 and has no rows there
    adopt = {1: 2, 2: 2, 3: 3, 4: 4}
    rows = [(c, j, int(j >= adopt[c]), float(c + j)) for c in adopt for j in (1, 2, 3, 4)
            if not (c == 4 and j == 3)]
    c, j, z, y = map(np.array, zip(*rows))
    d = TrialDataset.from_arrays(c, j, z, y)
    s = resolve_weights(d, "h-iate")
    unadjusted_mu(d, s, 1)
    with pytest.raises(EmptyArmInPeriod) as e:
        unadjusted_mu(d, s, 0)
    assert e.value.context["period"] == 3
