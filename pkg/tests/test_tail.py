import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from shot.errors import ParameterError, UndefinedEstimateError
from shot.model import MixParams
from shot.study import grid_design
from shot.tail import (bin_pairs, chi_curve, chi_R, chi_u_empirical, chi_X, chi_X_matrix,
                       chibar_u_empirical, hot_chi, hot_chibar, t_sf, write_curve_csv)

rows = st.lists(st.floats(0, 1), min_size=3, max_size=3).filter(lambda v: sum(v) > 0.05)


@pytest.mark.parametrize("df", [0.3, 1.0, 2.5, 6.0, 51.0])
def test_t_sf_matches_reference(df):
    x = np.array([-np.inf, -30, -2.5, 0, 0.1, 1.7, 40, np.inf])
    np.testing.assert_allclose(t_sf(x, df), stats.t.sf(x, df), rtol=1e-12, atol=1e-300)


def test_chi_u_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(10 ** 4)
    assert chi_u_empirical(x, x, 0.9).value == 1.0
    assert chi_u_empirical(x, -x, 0.9).value == 0.0
    u1, u2 = rng.random((2, 10 ** 6))
    est = chi_u_empirical(u1, u2, 0.9)
    assert abs(est.value - 0.1) < 3 * est.standard_error


def test_chi_u_errors_and_ties():
    with pytest.raises(ParameterError):
        chi_u_empirical(np.arange(5.0), np.arange(5.0), 0.9)
    with pytest.raises(ParameterError):
        chi_u_empirical(np.arange(10.0), np.arange(11.0), 0.5)
    # all values tied: midranks put everything at the same level, nothing exceeds
    with pytest.raises(UndefinedEstimateError):
        chi_u_empirical(np.zeros(100), np.zeros(100), 0.9)


def test_chibar_examples():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(10 ** 4)
    assert chibar_u_empirical(x, x, 0.95).value == pytest.approx(1.0)
    u1, u2 = rng.random((2, 10 ** 6))
    est = chibar_u_empirical(u1, u2, 0.95)
    assert abs(est.value) < 3 * est.standard_error + 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-0.9, 0.9))
def test_chibar_in_range(seed, rho):
    g = np.random.default_rng(seed)
    z = g.standard_normal((2, 2000))
    x2 = rho * z[0] + np.sqrt(1 - rho ** 2) * z[1]
    try:
        v = chibar_u_empirical(z[0], x2, 0.9).value
    except UndefinedEstimateError:
        return
    assert -1 <= v <= 1


def test_hot_chi_examples():
    assert hot_chi(3.0, 1.0) == pytest.approx(1.0)
    # 2 F_T(sqrt(2); 2) with F_T(x; 2) = (1 - x / sqrt(2 + x^2)) / 2
    assert hot_chi(1.0, 0.0) == pytest.approx(1 - 1 / np.sqrt(2), rel=1e-12)
    assert hot_chi(1.0, 0.0) == pytest.approx(2 * stats.t.sf(np.sqrt(2), 2), rel=1e-12)
    assert hot_chi(3.0, -1.0) == 0.0
    assert hot_chi(1e6, 0.5) < 1e-10


def test_hot_chibar_examples():
    assert hot_chibar(2.0, 1.0) == pytest.approx(1.0)
    assert hot_chibar(2.0, 0.0) == pytest.approx(np.sqrt(2) - 1, rel=1e-12)
    assert hot_chibar(1e-12, -0.5) == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(ParameterError):
        hot_chibar(0.0, 0.5)


def test_chi_R_examples():
    assert chi_R(None, [0.3, 0.7, 0.0], [0.5, 0.2, 0.3]) == pytest.approx(0.5)
    assert chi_R(None, [0.3, 0.7, 0.0], [0.3, 0.7, 0.0]) == pytest.approx(1.0)
    assert chi_R(None, [0.0, 1.0, 0.0], [0.5, 0.0, 0.5]) == 0.0


def test_chi_X_reduces_to_hot():
    for gamma in (0.5, 2.0, 10.0):
        for rho in (-0.5, 0.0, 0.4, 0.9, 1.0):
            assert chi_X(None, rho, gamma, [1.0], [1.0]) == pytest.approx(hot_chi(gamma, rho),
                                                                         abs=1e-12)


def test_chi_X_diagonal_and_disjoint():
    b = [0.2, 0.5, 0.3, 0.0]
    assert chi_X(None, 1.0, 2.5, b, b) == pytest.approx(1.0, abs=1e-14)
    assert chi_X(None, 0.3, 2.5, [0.0, 1.0], [1.0, 0.0]) == 0.0
    with pytest.raises(ParameterError):
        chi_X(None, -1.0, 2.5, b, b)


@settings(max_examples=60, deadline=None)
@given(rows, rows, st.floats(-0.95, 0.99), st.floats(0.2, 20))
def test_chi_X_symmetry_and_support(r1, r2, rho, gamma):
    b1 = np.array(r1) / sum(r1)
    b2 = np.array(r2) / sum(r2)
    v = chi_X(None, rho, gamma, b1, b2)
    assert v == chi_X(None, rho, gamma, b2, b1)
    assert chi_R(None, b1, b2) == chi_R(None, b2, b1)
    assert 0 <= v <= 1 + 1e-12
    if chi_R(None, b1, b2) == 0:
        assert v == 0


@settings(max_examples=40, deadline=None)
@given(rows, st.floats(-0.9, 0.99))
def test_chi_X_nonincreasing_in_gamma_equal_rows(r, rho):
    b = np.array(r) / sum(r)
    vals = [chi_X(None, rho, g, b, b) for g in np.linspace(0.2, 30, 40)]
    assert np.all(np.diff(vals) <= 1e-12)


def test_chi_X_not_monotone_for_unequal_rows():
    # gamma also enters through B^(1/gamma): a verified counterexample (simulation
    # gives 0.25, 0.28 and 0.22-0.26 at gamma = 0.2, 1, 3)
    b1, b2 = np.array([0, 0, 1.0]), np.array([0, 2 / 3, 1 / 3])
    vals = [chi_X(None, 0.75, g, b1, b2) for g in (0.2, 1.0, 3.0)]
    assert vals[1] > vals[0] and vals[1] > vals[2]


def test_chi_X_matrix_agrees_with_scalar():
    d = grid_design(nx=5, ny=5, K=9)
    b = d.basis(d.phi_at(0.3))
    corr = d.operator(1.0, 0.9).site_correlation()
    m = chi_X_matrix(b, corr, 2.5)
    iu = np.triu_indices(b.N, k=1)
    scal = [chi_X(b, corr[i, j], 2.5, i, j) for i, j in zip(*iu)]
    np.testing.assert_allclose(m, scal, rtol=1e-13, atol=1e-15)


def test_chi_curve_far_bins_zero_and_full_support():
    d = grid_design(nx=8, ny=8, K=25)
    op = d.operator(0.15 * d.delta, 0.9)
    near = chi_curve(d.basis(d.phi_at(0.0) * 1.05), op, MixParams(0, 2.5), bin_width=0.5)
    assert near[-1]["chi_mean"] == 0.0 and near[-1]["chi_q975"] == 0.0
    assert near[0]["chi_mean"] > 0
    wide = chi_curve(d.basis(d.phi_max * 1.05), op, MixParams(0, 2.5), bin_width=0.5)
    assert all(r["chi_q025"] > 0 for r in wide)
    with pytest.raises(ParameterError):
        chi_curve(d.basis(d.phi_at(0.5)), op, MixParams(1.0, 2.5), bin_width=0.5)


def test_bin_pairs_and_csv(tmp_path):
    sites = np.array([[0, 0], [1, 0], [3, 0]], dtype=float)
    # pair distances 1, 3, 2 in pdist order; the farthest pair sits on a bin edge
    out = bin_pairs(sites, np.array([0.5, 0.1, 0.2]), bin_width=1.5)
    assert [r["n_pairs"] for r in out] == [1, 1, 1]
    assert [r["chi_mean"] for r in out] == [0.5, 0.2, 0.1]
    capped = bin_pairs(sites, np.array([0.5, 0.1, 0.2]), bin_width=1.5, max_distance=2.5)
    assert sum(r["n_pairs"] for r in capped) == 2
    write_curve_csv(out, tmp_path / "c.csv")
    text = (tmp_path / "c.csv").read_text().splitlines()
    assert text[0] == "distance_bin_center,chi_mean,chi_q025,chi_q975,n_pairs"
    assert len(text) == 4


def test_chi_curve_with_simulation():
    d = grid_design(nx=4, ny=4, K=4)
    b = d.basis(d.phi_at(0.5))
    op = d.operator(1.0, 0.9)
    sim = np.random.default_rng(2).standard_normal((b.N, 2000))
    out = chi_curve(b, op, MixParams(0, 2.5), bin_width=1.0, simulated=sim, u=0.9)
    assert all("sim_chi_mean" in r for r in out)
