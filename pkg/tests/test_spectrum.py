import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

import oracles
from shrinkeig import geometry as geo
from shrinkeig.spectrum import (LAMBDA1_LOWER_BOUND, EigensolverError, first_eigenpair,
                                mean_zero_project, rayleigh_quotient, solve_constrained,
                                spectrum_k, truncation_study)
from shrinkeig.weighted_forms import assemble_surface_forms


def _check_result(res, ops, tol=1e-8):
    assert np.all(np.diff(res.eigenvalues) >= 0)
    assert res.residuals.max() <= tol
    assert res.mean_violation.max() <= 1e-10 * np.abs(ops.m).sum()
    assert res.norm_violation.max() <= 1e-10
    for i, lam in enumerate(res.eigenvalues):
        assert abs(rayleigh_quotient(ops, res.vector(i)) - lam) <= 1e-10


# -- circle against the circulant oracle -------------------------------------------

@pytest.mark.parametrize("N", sorted(oracles.POLYGON_LAMBDA))
def test_circle_matches_polygon_oracle(N):
    ops = assemble_surface_forms(geo.make_sphere(1, segments=N))
    res = spectrum_k(ops, 4)
    lam1, lam2 = oracles.POLYGON_LAMBDA[N]
    assert_allclose(res.eigenvalues, [lam1, lam1, lam2, lam2], rtol=1e-9)
    assert res.clusters() == [(pytest.approx(lam1), 2), (pytest.approx(lam2), 2)]
    _check_result(res, ops)


def test_circle_continuum_values(circle512):
    _, ops = circle512
    res = spectrum_k(ops, 4)
    assert abs(res.first - 0.5) <= 5e-4
    assert_allclose(res.eigenvalues, oracles.CIRCLE_SPECTRUM, atol=5e-3)


def test_unconstrained_bottom_is_constant(circle64):
    _, ops = circle64
    res = spectrum_k(ops, 2, constrained=False)
    assert abs(res.eigenvalues[0]) <= 1e-12
    v = res.vector(0)
    assert_allclose(v, v.mean(), rtol=1e-10)
    assert_allclose(res.multipliers, 0.0)


def test_refinement_error_shrinks_fourfold():
    lams = [first_eigenpair(assemble_surface_forms(geo.make_sphere(1, segments=N))).first
            for N in (64, 128, 256, 512)]
    diffs = np.abs(np.diff(lams))
    assert_allclose(diffs[:-1] / diffs[1:], 4.0, rtol=0.02)
    assert np.all(np.diff(lams) < 0)


# -- solver paths ------------------------------------------------------------------

@pytest.mark.parametrize("method", ["dense", "lobpcg", "shift-invert"])
def test_methods_agree_on_sphere(method):
    mesh = geo.make_sphere(2, 3)
    ops = assemble_surface_forms(mesh)
    ref = spectrum_k(ops, 4, method="dense")
    res = spectrum_k(ops, 4, method=method)
    assert res.method == method
    assert_allclose(res.eigenvalues, ref.eigenvalues, rtol=1e-9)
    _check_result(res, ops)


def test_auto_uses_iterative_above_dense_limit():
    ops = assemble_surface_forms(geo.make_sphere(2, 4))
    res = spectrum_k(ops, 4)
    assert res.method in ("lobpcg", "shift-invert")
    assert res.clusters(1e-6)[0][1] == 3
    assert abs(res.first - 0.5) <= 5e-3
    _check_result(res, ops)


def test_multiplier_vanishes_for_exact_mean():
    # with m = M 1 and K 1 = 0 the eigenvector is M-orthogonal to constants already
    ops = assemble_surface_forms(geo.make_sphere(2, 2))
    res = spectrum_k(ops, 3)
    assert np.abs(res.multipliers).max() <= 1e-8


@pytest.mark.parametrize("k", [0, 10 ** 6])
def test_k_validated(circle64, k):
    _, ops = circle64
    with pytest.raises(ValueError, match="k must satisfy"):
        spectrum_k(ops, k)


def test_unknown_method(circle64):
    _, ops = circle64
    with pytest.raises(ValueError, match="unknown method"):
        spectrum_k(ops, 1, method="qr")


def test_unreachable_tolerance_raises(circle64):
    _, ops = circle64
    with pytest.raises(EigensolverError, match="residual"):
        solve_constrained(ops.K, ops.M, ops.m, 2, tol=1e-30, method="dense")


# -- Hermite and cylinder ------------------------------------------------------------

def test_segment_hermite_spectrum():
    ops = assemble_surface_forms(geo.make_plane(1, 8.0, 5))
    res = spectrum_k(ops, 3)
    assert_allclose(res.eigenvalues, oracles.HERMITE_SPECTRUM, atol=1e-2)
    # the first eigenfunction is the coordinate x
    x = geo.make_plane(1, 8.0, 5).vertices[:, 0]
    c = np.corrcoef(res.vector(0), x)[0, 1]
    assert abs(c) > 0.999


def test_cylinder_first_eigenvalue():
    ops = assemble_surface_forms(geo.make_cylinder(refine=2))
    assert abs(first_eigenpair(ops).first - 0.5) <= 1e-2


# -- invariance properties -------------------------------------------------------------

@settings(max_examples=10, deadline=None)
@given(angles=st.tuples(st.floats(0, 2 * math.pi), st.floats(0, math.pi), st.floats(0, 2 * math.pi)))
def test_lambda1_rotation_invariant(sphere_r2, angles):
    mesh, ops = sphere_r2
    Q = Rotation.from_euler("zyx", angles).as_matrix()
    rot = assemble_surface_forms(mesh.transformed(Q))
    assert abs(first_eigenpair(rot).first - first_eigenpair(ops).first) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(f=arrays(np.float64, 64, elements=st.floats(-10, 10)), c=st.floats(-100, 100))
def test_constant_shift_leaves_projected_quotient(circle64, f, c):
    _, ops = circle64
    p = mean_zero_project(ops, f)
    if np.linalg.norm(p) < 1e-6:
        return
    q = mean_zero_project(ops, f + c)
    assert_allclose(rayleigh_quotient(ops, q), rayleigh_quotient(ops, p), rtol=1e-8)


@settings(max_examples=40, deadline=None)
@given(f=arrays(np.float64, 64, elements=st.floats(-10, 10)))
def test_mean_zero_project_idempotent(circle64, f):
    _, ops = circle64
    p = mean_zero_project(ops, f)
    assert abs(ops.m @ p) <= 1e-12 * (1 + np.abs(f).max())
    assert_allclose(mean_zero_project(ops, p), p, atol=1e-12 * (1 + np.abs(f).max()))


@settings(max_examples=30, deadline=None)
@given(f=arrays(np.float64, 64, elements=st.floats(-10, 10)))
def test_projected_quotient_bounded_below(circle64, f):
    _, ops = circle64
    p = mean_zero_project(ops, f)
    if np.linalg.norm(p) < 1e-6:
        return
    assert rayleigh_quotient(ops, p) >= first_eigenpair(ops).first * (1 - 1e-12)


def test_mean_zero_project_cases(circle64):
    _, ops = circle64
    assert_allclose(mean_zero_project(ops, np.full(ops.size, 3.0)), 0.0, atol=1e-14)
    f = first_eigenpair(ops).vector(0)
    assert_allclose(mean_zero_project(ops, f), f, atol=1e-14)


def test_rayleigh_quotient_cases(circle64):
    mesh, ops = circle64
    assert rayleigh_quotient(ops, np.ones(ops.size)) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError, match="zero vector"):
        rayleigh_quotient(ops, np.zeros(ops.size))
    cos = mesh.vertices[:, 0]
    assert rayleigh_quotient(ops, cos) == pytest.approx(oracles.POLYGON_LAMBDA[64][0], rel=1e-10)


# -- truncation study -----------------------------------------------------------------

@pytest.fixture(scope="module")
def cylinder_minimizer():
    mesh = geo.make_cylinder(refine=2)
    ops = assemble_surface_forms(mesh)
    return mesh, ops, first_eigenpair(ops).vector(0)


def test_truncation_quotients(cylinder_minimizer):
    mesh, ops, g = cylinder_minimizer
    rows = truncation_study(mesh, ops, g, [2, 4, 6, 8])
    assert all(r.quotient >= LAMBDA1_LOWER_BOUND for r in rows)
    q = [r.quotient for r in rows]
    assert np.all(np.diff(q) <= 0)
    assert abs(q[-1] - rayleigh_quotient(ops, g)) <= 1e-6


def test_truncation_beyond_mesh_is_exact(cylinder_minimizer):
    mesh, ops, g = cylinder_minimizer
    row, = truncation_study(mesh, ops, g, [mesh.truncation_radius + 1])
    assert row.quotient == pytest.approx(rayleigh_quotient(ops, g), rel=1e-14)
    assert abs(row.mean_shift) <= 1e-12


def test_truncation_mean_shift_vanishes():
    mesh = geo.make_plane(1, 8.0, 4)
    ops = assemble_surface_forms(mesh)
    x = mesh.vertices[:, 0]
    g = mean_zero_project(ops, x ** 2)      # even, so a_j does not vanish by symmetry
    rows = truncation_study(mesh, ops, g, [1, 2, 3, 5, 9])
    shifts = np.abs([r.mean_shift for r in rows])
    assert shifts[0] > 1e-2
    assert shifts[-1] <= 1e-12


def test_truncation_requires_ascending(cylinder_minimizer):
    mesh, ops, g = cylinder_minimizer
    with pytest.raises(ValueError, match="ascending"):
        truncation_study(mesh, ops, g, [4, 2])
