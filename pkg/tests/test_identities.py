import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose

from shrinkeig import geometry as geo
from shrinkeig import identities as ids
from shrinkeig.coupled import CoupledSolution, mu_of_alpha
from shrinkeig.spectrum import first_eigenpair
from shrinkeig.weighted_forms import assemble_surface_forms


# -- constants -----------------------------------------------------------------------

@pytest.mark.parametrize("d, C, radius", [(1, 32.0, math.sqrt(8)), (2, 32.0, 4.0), (3, 48.0, 6.0)])
def test_lemma_constants(d, C, radius):
    assert ids.lemma_constant(d) == C
    assert ids.lemma_radius(d) == pytest.approx(radius)
    assert ids.lemma_radius(d) >= math.sqrt(8 * d)


@settings(max_examples=100, deadline=None)
@given(d=st.integers(1, 4), s=st.floats(1.0, 1e4))
def test_split_inequality_behind_constant(d, s):
    r2 = 8 * d * s                      # |x|^2 >= 8d
    assert r2 / 4 - d >= r2 / 8 * (1 - 1e-12)


# -- reports --------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(res=st.floats(0, 10), tol=st.floats(1e-12, 10))
def test_report_pass_iff_within_tolerance(res, tol):
    rep = ids.VerificationReport.from_residual("x", "", res, tol)
    assert rep.passed == (res <= tol)


@pytest.mark.parametrize("margin, passed, fragile", [(0.5, True, False), (5e-10, True, True),
                                                     (-1e-3, False, True)])
def test_margin_report(margin, passed, fragile):
    rep = ids.VerificationReport.from_margin("m", "", margin, 1e-10)
    assert rep.passed is passed
    assert rep.fragile is fragile
    assert rep.margin == margin
    assert rep.residual == max(0.0, -margin)


def test_decay_report_needs_three_levels():
    two = ids._decay_report("d", "", [(0.2, 1.0), (0.1, 0.25)], 1.0)
    assert not two.passed
    three = ids._decay_report("d", "", [(0.4, 4.0), (0.2, 1.0), (0.1, 0.25)], 1.0)
    assert three.passed
    assert three.measured["decay_ratios"] == [4.0, 4.0]
    slow = ids._decay_report("d", "", [(0.4, 4.0), (0.2, 3.0), (0.1, 1.0)], 10.0)
    assert not slow.passed


def test_report_json_round_trip():
    reps = [ids.VerificationReport.from_residual("b", "in", np.float64(1e-3), 1e-2,
                                                 measured={"k": np.int64(3), "v": np.array([1.0])}),
            ids.VerificationReport.from_margin("a", "in", 0.25)]
    doc = json.loads(ids.reports_to_json(reps))
    assert [d["name"] for d in doc] == ["a", "b"]
    assert doc[1]["measured"] == {"k": 3, "v": [1.0]}
    table = ids.summary_table(reps)
    assert table.count("PASS") == 2


# -- interior Bochner identity ------------------------------------------------------------

@pytest.mark.parametrize("family", ["1d", "radial", "const"])
@pytest.mark.parametrize("dim", [2, 3])
def test_interior_bochner(family, dim):
    rep = ids.check_interior_bochner(family, dim=dim)
    assert rep.passed
    assert rep.residual <= 1e-5


def test_interior_bochner_1d_tight():
    rep = ids.check_interior_bochner("1d", dim=2)
    assert rep.residual <= 1e-6


def test_interior_bochner_const_both_sides_zero():
    rep = ids.check_interior_bochner("const", dim=2)
    assert rep.measured["max_rhs"] == 0.0
    assert rep.residual == 0.0


def test_interior_bochner_detects_non_harmonic():
    # u = x_1^2 / 2 is not drift-harmonic: the identity must fail
    fam = ids.DriftHarmonicFamily(
        "quadratic", 2,
        grad=lambda x: np.stack([x[:, 0], 0 * x[:, 1]], axis=1),
        hess=lambda x: np.broadcast_to(np.diag([1.0, 0.0]), (len(x), 2, 2)).copy())
    rep = ids.check_interior_bochner(fam, points=ids.default_sample_points("1d"))
    assert not rep.passed


def test_interior_bochner_rejects_singularity():
    with pytest.raises(ValueError, match="singularity"):
        ids.check_interior_bochner("radial", points=np.zeros((1, 2)))


def test_interior_bochner_checks_columns():
    with pytest.raises(ValueError, match="columns"):
        ids.check_interior_bochner("1d", points=np.zeros((2, 3)), dim=2)


# -- Hessian recovery ------------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(coef=arrays(np.float64, 6, elements=st.floats(-3, 3)))
def test_recover_hessian_exact_for_quadratics(coef):
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, (400, 2))
    a, b, c, d, e, f = coef
    u = a + b * X[:, 0] + c * X[:, 1] + d * X[:, 0] ** 2 + e * X[:, 0] * X[:, 1] + f * X[:, 1] ** 2
    H = ids.recover_hessian(X[:5], X, u, neighbors=30)
    assert_allclose(H, np.broadcast_to([[2 * d, e], [e, 2 * f]], H.shape), atol=1e-8)


def test_recover_hessian_too_few_samples():
    with pytest.raises(ValueError, match="too few"):
        ids.recover_hessian(np.zeros((1, 3)), np.zeros((5, 3)), np.zeros(5))


def test_weighted_drift_laplacian_on_eigenvector(circle64):
    _, ops = circle64
    res = first_eigenpair(ops)
    assert_allclose(ids.weighted_drift_laplacian(ops, res.vector(0)), res.first * res.vector(0),
                    atol=1e-9)


# -- boundary Hessian --------------------------------------------------------------------

def test_boundary_hessian_constant(small_coupled):
    surface, ambient, _ = small_coupled
    rep = ids.check_boundary_hessian(surface, ambient, np.ones(surface.n_vertices))
    assert rep.measured["reference_norm"] <= 1e-10
    assert rep.residual <= 1e-8


@pytest.mark.parametrize("region", ["omega", "omega_tilde"])
def test_boundary_hessian_decay(region):
    rep = ids.boundary_hessian_study((64, 128, 256), region=region)
    assert len(rep.trace) == 3
    assert min(rep.decay_ratios()) >= ids.MIN_DECAY
    assert rep.passed


@pytest.mark.slow
def test_sphere_boundary_hessian_decay():
    rep = ids.sphere_boundary_hessian_study()
    assert min(rep.decay_ratios()) >= ids.MIN_DECAY
    assert rep.passed


# -- divergence lemmas -----------------------------------------------------------------

def test_surface_lemma_constant_on_circle(circle512):
    mesh, ops = circle512
    rep = ids.check_divergence_lemma_surface(mesh, np.ones(mesh.n_vertices))
    # |x|^2 = 2: int rho (1 - 1/2) = half the weighted length
    assert_allclose(rep.measured["A"], 0.5 * ops.total_weight, rtol=1e-4)
    assert rep.measured["B"] == pytest.approx(0.0, abs=1e-14)
    assert rep.passed and rep.margin > 0


@pytest.mark.parametrize("make", [lambda: geo.make_plane(2, 8.0, 2), lambda: geo.make_plane(1, 8.0, 4),
                                  lambda: geo.make_sphere(2, 2)])
@pytest.mark.parametrize("j", [None, 1.0, 3.0])
def test_surface_lemma_constant_field(make, j):
    mesh = make()
    rep = ids.check_divergence_lemma_surface(mesh, np.ones(mesh.n_vertices), j)
    assert rep.passed
    assert rep.margin > 0


@pytest.mark.parametrize("j", [None, 2.0, 4.0])
def test_surface_lemma_cylinder_eigenvector(j):
    mesh = geo.make_cylinder(refine=1)
    f = first_eigenpair(assemble_surface_forms(mesh)).vector(0)
    rep = ids.check_divergence_lemma_surface(mesh, f, j)
    assert rep.passed and rep.margin > 0
    assert rep.measured["constant"] == 32.0


@settings(max_examples=10, deadline=None)
@given(f=arrays(np.float64, 64, elements=st.floats(-5, 5)))
def test_surface_lemma_random_fields(circle64, f):
    mesh, _ = circle64
    if np.abs(f).max() < 1e-3:
        return
    rep = ids.check_divergence_lemma_surface(mesh, f)
    assert rep.margin > 0


@pytest.fixture(scope="module")
def disc_ambient():
    return geo.build_ambient_mesh(geo.make_sphere(1, segments=64), 6.0)


@pytest.mark.parametrize("field", ["one", "bump", "r2"])
@pytest.mark.parametrize("j", [None, 2.0])
def test_ambient_lemma(disc_ambient, field, j):
    r2 = np.sum(disc_ambient.vertices ** 2, axis=1)
    w = {"one": np.ones_like(r2),
         "bump": np.where(r2 < 1, np.exp(-1 / np.maximum(1 - r2, 1e-300)), 0.0),
         "r2": r2}[field]
    rep = ids.check_divergence_lemma_ambient(disc_ambient, w, j, label=field)
    assert rep.passed and rep.margin > 0
    assert rep.measured["constant"] == ids.lemma_constant(2)


# -- key identity ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def circle128_minimizer():
    surface, ambient, system = ids.circle_in_disc(128)
    return system, mu_of_alpha(system)


def test_key_identity_terms_signs(circle128_minimizer):
    system, sol = circle128_minimizer
    t = ids.key_identity_terms(system, sol)
    assert t["hessian_term"] > 0 and t["flux_term"] > 0
    assert t["lhs"] > 0
    assert t["surface_cutoff_term"] == 0.0 and t["ambient_cutoff_term"] == 0.0
    rep = ids.check_key_identity(system, sol)
    assert rep.measured["sign_consistent"]
    assert rep.residual < 0.25


def test_key_identity_cutoff_terms_active(circle128_minimizer):
    system, sol = circle128_minimizer
    t = ids.key_identity_terms(system, sol, j=1.2)
    assert t["ambient_cutoff_term"] != 0.0
    assert t["transport_term"] != 0.0
    assert abs(t["lhs"] - t["rhs"]) / abs(t["lhs"]) < 0.3


def test_key_identity_rejects_constant(circle128_minimizer):
    system, sol = circle128_minimizer
    n = system.surface.n_vertices
    const = CoupledSolution(sol.mu, np.ones(n), system.extend(np.ones(n)), sol.alpha, sol.eig)
    with pytest.raises(ValueError, match="constant"):
        ids.check_key_identity(system, const)


def test_key_identity_decay_short():
    rep = ids.key_identity_study((64, 128, 256), tolerance=0.1)
    assert min(rep.decay_ratios()) >= ids.MIN_DECAY
    assert rep.passed


# -- divergence of x^tan -------------------------------------------------------------------

@pytest.mark.parametrize("make", [lambda: geo.make_plane(2, 8.0, 2), lambda: geo.make_plane(1, 8.0, 3),
                                  lambda: geo.make_cylinder(refine=1), lambda: geo.make_sphere(1, 3)])
def test_div_xtan_exact_cases(make):
    err, rel = ids.div_xtan_discrepancy(make())
    assert err <= 1e-10


def test_div_xtan_sphere_decays():
    rep = ids.div_xtan_study("sphere", (1, 2, 3))
    assert rep.passed
    assert min(rep.decay_ratios()) >= ids.MIN_DECAY


def test_div_xtan_single_mesh_tolerance_scales_with_h():
    mesh = geo.make_sphere(2, 3)
    rep = ids.check_div_xtan(mesh)
    assert rep.tolerance == pytest.approx(0.5 * mesh.max_edge_length)
    assert rep.passed


# -- determinism -----------------------------------------------------------------------

def test_reports_repeatable(small_coupled):
    surface, ambient, _ = small_coupled
    f = surface.vertices[:, 0]
    a = ids.reports_to_json([ids.check_boundary_hessian(surface, ambient, f)])
    b = ids.reports_to_json([ids.check_boundary_hessian(surface, ambient, f)])
    assert a == b
