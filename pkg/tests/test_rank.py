import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kronadapt.errors import ArgumentError, DegenerateSpectrumError
from kronadapt.rank import (RankPolicy, elbow_rank, energy_curve, energy_rank, gaps,
                            manual_decision, select_rank)


# -- worked examples (integer outputs reproduced exactly) -------------------

@pytest.mark.parametrize("spectrum,tau,want", [
    ([2, 1, 1], 0.5, 1),
    ([1, 0, 0], 0.9, 1),
    ([1, 1, 1, 1], 0.95, 4),
])
def test_energy_rank_examples(spectrum, tau, want):
    assert energy_rank(spectrum, tau) == want


@pytest.mark.parametrize("spectrum,want", [
    ([10, 9, 1, 0.9], 2),
    ([5, 5, 5], 1),
    ([3, 1], 1),
    ([7], 1),
])
def test_elbow_rank_examples(spectrum, want):
    assert elbow_rank(spectrum) == want


def test_select_rank_example_both_criteria():
    d = select_rank([10, 9, 1, 0.9], RankPolicy(tau=0.95))
    assert (d.r_energy, d.r_elbow, d.r_final, d.clamped) == (2, 2, 2, False)
    assert d.energy_curve[1] == pytest.approx(181 / 182.81, rel=1e-15)
    np.testing.assert_allclose(d.gaps, [1, 8, 0.1], rtol=1e-14)


def test_select_rank_example_rmax():
    d = select_rank([1, 1, 1, 1], RankPolicy(tau=0.95, r_max=2))
    assert (d.r_energy, d.r_elbow, d.r_final, d.clamped) == (4, 1, 1, False)


def test_select_rank_all_zero():
    d = select_rank([0, 0, 0], RankPolicy(r_min=2))
    assert d.r_final == 2 and d.clamped
    with pytest.raises(DegenerateSpectrumError):
        energy_rank([0, 0, 0], 0.9)


def test_clamping_sets_flag():
    d = select_rank([10, 9, 1, 0.9], RankPolicy(r_min=3))
    assert d.r_final == 3 and d.clamped
    d = select_rank([4, 3, 2, 1, 0.5], RankPolicy(tau=0.99, r_max=1))
    assert d.r_final == 1


def test_energy_threshold_hit_exactly():
    # E(1) = 0.5 exactly; rounding in the cumulative sum must not push it past tau.
    assert energy_rank([1, 1], 0.5) == 1


def test_log_gaps_variant():
    assert elbow_rank([100, 10, 5, 4]) == 1
    assert elbow_rank([100, 50, 5, 4], log=True) == 2
    np.testing.assert_allclose(gaps([4, 2, 1], log=True), np.log([2, 2]))


def test_manual_decision():
    d = manual_decision([3, 2, 1], 2)
    assert d.mode == "manual" and d.r_final == 2 and not d.clamped
    with pytest.raises(ArgumentError):
        manual_decision([3, 2, 1], 4)


@pytest.mark.parametrize("bad", [[], [1, 2], [1, -1], [1, np.nan]])
def test_invalid_spectrum(bad):
    with pytest.raises(ArgumentError):
        select_rank(bad)


@pytest.mark.parametrize("kw", [dict(tau=0), dict(tau=1), dict(r_min=0), dict(r_min=3, r_max=2)])
def test_invalid_policy(kw):
    with pytest.raises(ArgumentError):
        RankPolicy(**kw)


def test_rmin_beyond_spectrum():
    with pytest.raises(ArgumentError):
        select_rank([2, 1], RankPolicy(r_min=3))


def test_energy_curve_shape():
    E = energy_curve([3, 2, 1])
    assert np.all(np.diff(E) >= 0) and E[-1] == 1.0


# -- properties --------------------------------------------------------------

spectra = st.lists(st.floats(0.0, 1e3, allow_nan=False), min_size=1, max_size=40).map(
    lambda xs: sorted(xs, reverse=True)).filter(lambda xs: xs[0] > 1e-6)


@settings(max_examples=300, deadline=None)
@given(spectra, st.floats(0.01, 0.99))
def test_r_final_in_bounds(s, tau):
    d = select_rank(s, RankPolicy(tau=tau))
    assert 1 <= d.r_final <= len(s)
    assert d.r_final == min(d.r_energy, d.r_elbow)
    assert np.all(np.diff(d.energy_curve) >= 0) and d.energy_curve[-1] == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(spectra, st.floats(0.01, 0.99))
def test_deterministic(s, tau):
    a, b = select_rank(s, RankPolicy(tau=tau)), select_rank(list(s), RankPolicy(tau=tau))
    assert (a.r_energy, a.r_elbow, a.r_final, a.clamped) == (b.r_energy, b.r_elbow, b.r_final,
                                                             b.clamped)
    assert np.array_equal(a.energy_curve, b.energy_curve) and np.array_equal(a.gaps, b.gaps)
