import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import cdist

from shot.basis import (BasisSystem, KnotSet, basis_system, candidate_knots, default_phi_grid,
                        maxmin_order, phi_bounds, wendland2)
from shot.errors import CoverageError, EmptyCandidateError, ParameterError, SizeError
from shot.mesh import build_rect_mesh

points = st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=2, max_size=25,
                  unique=True)


def test_wendland_values():
    assert wendland2(0.0, 2.0) == 3.0
    assert wendland2(2.0, 2.0) == 0.0
    assert wendland2(5.0, 2.0) == 0.0
    assert wendland2(1.0, 2.0) == pytest.approx(0.32421875, abs=1e-15)


def test_wendland_errors():
    with pytest.raises(ParameterError):
        wendland2(-0.1, 1.0)
    with pytest.raises(ParameterError):
        wendland2(0.1, 0.0)


def test_wendland_decreasing_on_support():
    d = np.linspace(0, 1, 101)
    w = wendland2(d, 1.0)
    assert np.all(np.diff(w) <= 0)


def test_candidate_knots_full_and_zero_radius():
    mesh = build_rect_mesh((0, 0, 1, 1), 0.25)
    nodes = mesh.vertices
    np.testing.assert_array_equal(candidate_knots(nodes, nodes[[3, 7]], c=1.0), nodes)
    sub, idx = candidate_knots(nodes, nodes[[7, 3]], c=1e-12, return_index=True)
    np.testing.assert_array_equal(idx, [3, 7])


def test_candidate_knots_default_is_local_subset():
    mesh = build_rect_mesh((0, 0, 4, 4), 0.2, extension=2.0)
    sites = np.array([[1.0, 1.0], [3.0, 3.0], [1.0, 3.0]])
    cand = candidate_knots(mesh.vertices, sites, c=0.05)
    assert 0 < len(cand) < mesh.n_vertices
    assert cdist(cand, sites).min(axis=1).max() <= 0.05 * cdist(sites, mesh.vertices).max()


def test_candidate_knots_errors():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(EmptyCandidateError):
        candidate_knots(nodes, [[0.5, 0.5]], c=1e-6)
    with pytest.raises(ParameterError):
        candidate_knots(nodes, [[0.5, 0.5]], c=0.0)


def test_maxmin_square_with_center():
    # every corner is at the same minimum distance (to the center) once the center
    # is chosen, so ties decide; listed so the opposite corner has the lower index
    cand = [[0, 0], [1, 1], [1, 0], [0, 1], [0.5, 0.5]]
    ks = maxmin_order(cand, 3)
    np.testing.assert_array_equal(ks.indices, [4, 0, 1])
    np.testing.assert_array_equal(ks.knots, [[0.5, 0.5], [0, 0], [1, 1]])
    assert maxmin_order(cand, 1).indices.tolist() == [4]


def test_maxmin_size_error():
    with pytest.raises(SizeError):
        maxmin_order([[0, 0], [1, 1]], 3)
    with pytest.raises(SizeError):
        maxmin_order([[0, 0], [1, 1]], 0)


@settings(max_examples=40, deadline=None)
@given(points, st.data())
def test_maxmin_prefix_and_permutation(pts, data):
    pts = np.array(pts)
    K = data.draw(st.integers(1, len(pts)))
    Kp = data.draw(st.integers(1, K))
    full = maxmin_order(pts, K)
    np.testing.assert_array_equal(maxmin_order(pts, Kp).indices, full.indices[:Kp])
    every = maxmin_order(pts, len(pts))
    assert sorted(every.indices.tolist()) == list(range(len(pts)))


def test_phi_bounds_examples():
    sites = np.array([[0, 0], [3, 4], [1, 0]])
    lo, hi = phi_bounds(sites, KnotSet(sites[:1]))
    assert lo == hi == pytest.approx(5.0)
    lo, _ = phi_bounds(sites, KnotSet(sites))
    assert lo == 0.0


def test_default_phi_grid():
    np.testing.assert_allclose(default_phi_grid(1.0, 5.0), [2.0, 3.0, 4.0])


def test_basis_single_knot_is_ones():
    sites = np.random.default_rng(0).uniform(0, 1, (10, 2))
    b = basis_system(sites, KnotSet(np.array([[0.5, 0.5]])), 2.0)
    np.testing.assert_array_equal(b.B, np.ones((10, 1)))


def test_basis_equidistant_pair():
    b = basis_system([[0.5, 0.0]], KnotSet(np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])), 1.0)
    np.testing.assert_allclose(b.B[0], [0.5, 0.5, 0.0])


def test_basis_exact_support_boundary_is_zero():
    b = basis_system([[0.0, 0.0]], KnotSet(np.array([[0.0, 0.0], [1.0, 0.0]])), 1.0)
    assert b.B[0, 1] == 0.0 and b.raw[0, 1] == 0.0


def test_basis_coverage_error_names_site():
    sites = np.array([[0.0, 0.0], [0.1, 0.0], [3.0, 0.0]])
    knots = KnotSet(np.array([[0.0, 0.0]]))
    with pytest.raises(CoverageError) as e:
        basis_system(sites, knots, 1.0)
    assert e.value.index == 2
    lo, _ = phi_bounds(sites, knots)
    with pytest.raises(CoverageError):
        basis_system(sites, knots, lo)


@settings(max_examples=40, deadline=None)
@given(points, st.integers(1, 5), st.floats(0.1, 15))
def test_coverage_consistency_and_rescaling(pts, K, phi):
    pts = np.array(pts)
    K = min(K, len(pts))
    knots = maxmin_order(pts, K)
    sites = pts[::-1] + 0.01
    lo, _ = phi_bounds(sites, knots)
    if phi > lo:
        b = basis_system(sites, knots, phi)
        np.testing.assert_allclose(b.B.sum(axis=1), 1.0, atol=1e-12)
        again = b.B / b.B.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(again, b.B, atol=1e-15)
        wider = basis_system(sites, knots, phi * 1.5)
        assert np.all((wider.B > 0).sum(axis=1) >= (b.B > 0).sum(axis=1))
    else:
        with pytest.raises(CoverageError):
            basis_system(sites, knots, phi)


def test_weights_power_keeps_zeros():
    b = basis_system([[0.5, 0.0]], KnotSet(np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])), 1.0)
    np.testing.assert_allclose(b.weights(2.0)[0], [np.sqrt(0.5), np.sqrt(0.5), 0.0])


def test_knot_and_basis_csv(tmp_path):
    ks = maxmin_order(np.random.default_rng(1).uniform(0, 1, (12, 2)), 5, c=0.05)
    ks.to_csv(tmp_path / "knots.csv")
    back = KnotSet.from_csv(tmp_path / "knots.csv", c=0.05)
    np.testing.assert_array_equal(back.knots, ks.knots)
    b = basis_system(ks.knots, back, 0.9)
    b.to_csv(tmp_path / "basis.csv")
    data = np.loadtxt(tmp_path / "basis.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 1:], b.B)
    assert isinstance(b, BasisSystem) and b.K == 5 and b.N == 5
