import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_max, random_instance
from relaxctl.errors import DomainError
from relaxctl.hamiltonian import (
    HContext,
    SimplexQuadratic,
    batch_maximize,
    batch_values,
    h_function,
    h_quadratic,
    h_strict,
    hamiltonian_H,
    hamiltonian_values,
    maximize_h,
    maximize_quadratic,
)
from relaxctl.measures import DiscreteMeasure


def two_atom_context():
    return HContext.build(x=1.0, mu=[0.5, 0.5], p=0.0, q=0.0, P=1.0, upsilon=0.0, phi=0.0,
                          chi=0.0, psi=[-1.0, 1.0], h=0.0)


def random_context(rng, G=4, d=2):
    return HContext.build(x=rng.normal(), mu=rng.dirichlet(np.ones(G)), p=rng.normal(),
                          q=rng.normal(size=d), P=rng.uniform(0, 2), upsilon=rng.normal(size=G),
                          phi=rng.normal(size=G), chi=rng.normal(size=(G, d)),
                          psi=rng.normal(size=(G, d)), h=rng.normal(size=G))


def test_zero_adjoints_give_zero_hamiltonian():
    ctx = HContext.build(x=2.0, mu=[1.0, 0.0], p=0.0, q=0.0, P=0.0, upsilon=[1.0, 2.0],
                         phi=[0.3, 0.1], chi=[0.2, 0.4], psi=[0.5, 0.1], h=0.0)
    assert np.all(hamiltonian_values(ctx) == 0.0)


def test_hamiltonian_of_pure_drift():
    a = np.array([-1.0, 0.5, 2.0])
    ctx = HContext.build(x=3.0, mu=[1, 0, 0], p=1.0, q=0.0, P=0.0, upsilon=a, phi=0.0, chi=0.0,
                         psi=0.0, h=0.0)
    assert np.array_equal(hamiltonian_values(ctx), -a)


def test_hamiltonian_is_affine_in_the_measure():
    ctx = random_context(np.random.default_rng(0))
    nu = np.array([0.5, 0.0, 0.5, 0.0])
    assert hamiltonian_H(ctx, nu) == pytest.approx(0.5 * (hamiltonian_H(ctx, 0) + hamiltonian_H(ctx, 2)))


def test_dirac_restriction_matches_strict_form():
    rng = np.random.default_rng(1)
    for _ in range(20):
        ctx = random_context(rng)
        L = hamiltonian_values(ctx, ctx.q - ctx.P * (ctx.mu @ (ctx.chi + ctx.psi * ctx.x)))
        for i in range(ctx.count):
            z = ctx.chi[i] + ctx.psi[i] * ctx.x
            strict = L[i] - 0.5 * ctx.P * z @ z
            for mode in ("squared", "integrated"):
                assert abs(h_strict(ctx, i, mode) - strict) <= 1e-12 * max(1.0, abs(strict))


def test_zero_curvature_is_affine():
    ctx = random_context(np.random.default_rng(2))
    flat = HContext.build(**{**ctx.__dict__, "P": 0.0})
    nu = np.array([0.1, 0.2, 0.3, 0.4])
    assert h_function(flat, nu) == pytest.approx(hamiltonian_H(flat, nu))


def test_two_atom_instance():
    ctx = two_atom_context()
    rep = maximize_h(ctx)
    assert np.allclose(rep.nu.weights, [0.5, 0.5], atol=1e-9)
    assert abs(rep.value) <= 1e-12
    assert rep.vertex_value == -0.5
    assert abs(rep.gap_to_vertex - 0.5) <= 1e-9
    assert h_strict(ctx, 0) == -0.5 and h_strict(ctx, 1) == -0.5


def test_integrated_mode_is_affine_and_differs_from_squared():
    ctx = two_atom_context()
    assert h_function(ctx, [0.5, 0.5], "integrated") == -0.5
    assert h_function(ctx, [0.5, 0.5], "squared") == 0.0
    with pytest.raises(DomainError):
        h_function(ctx, [0.5, 0.5], "other")


def test_linear_objective_picks_lowest_index_on_ties():
    quad = SimplexQuadratic(np.array([1.0, 3.0, 3.0, -2.0]), np.zeros((4, 4)))
    rep = maximize_quadratic(quad)
    assert rep.nu.is_dirac and rep.nu.atom == 1 and rep.branch == "vertex"


def test_convex_objective_is_maximised_at_a_vertex():
    # -1/2 w^T A w with A negative definite is convex
    quad = SimplexQuadratic(np.array([0.0, 0.1, 0.0]), -np.eye(3))
    rep = maximize_quadratic(quad)
    assert rep.nu.is_dirac and rep.value == pytest.approx(0.6)


def test_random_instances_against_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(10):
        L, z, P = random_instance(rng)
        rep = maximize_quadratic(SimplexQuadratic(L, P * z @ z.T))
        brute = brute_force_max(L, z, P)
        assert abs(rep.value - brute) <= 1e-4
        assert rep.value == pytest.approx(SimplexQuadratic(L, P * z @ z.T).value(rep.nu.weights))


def test_wide_instances_never_fall_below_the_lattice():
    # with steep curvature the lattice itself is coarse, but it stays a lower bound
    rng = np.random.default_rng(8)
    for _ in range(10):
        L, z, P = random_instance(rng, z_scale=3.0, P_range=(0.1, 3.0))
        rep = maximize_quadratic(SimplexQuadratic(L, P * z @ z.T))
        assert rep.value >= brute_force_max(L, z, P) - 1e-12
        assert rep.dual_gap <= 1e-10


def test_batch_maximize_matches_scalar_solver():
    rng = np.random.default_rng(3)
    S, G = 50, 5
    L = rng.normal(size=(S, G))
    z = rng.normal(size=(S, G, 1))
    P = rng.uniform(0.1, 2.0, size=S)
    vals, W = batch_maximize(L, z, P)
    assert np.allclose(batch_values(L, z, P, W), vals, atol=1e-12)
    for s in range(S):
        rep = maximize_quadratic(SimplexQuadratic(L[s], P[s] * z[s] @ z[s].T))
        assert vals[s] == pytest.approx(rep.value, abs=1e-9)


def test_non_finite_coefficients_are_rejected():
    with pytest.raises(DomainError):
        maximize_quadratic(SimplexQuadratic(np.array([np.nan, 1.0]), np.zeros((2, 2))))


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=2, max_value=6), st.integers(min_value=1, max_value=3),
       st.integers(min_value=0, max_value=2**31 - 1))
def test_maximiser_dominates_vertices_and_reference(G, d, seed):
    rng = np.random.default_rng(seed)
    ctx = random_context(rng, G, d)
    for mode in ("squared", "integrated"):
        rep = maximize_h(ctx, mode)
        quad = h_quadratic(ctx, mode)
        assert np.all(rep.nu.weights >= 0) and abs(rep.nu.weights.sum() - 1) < 1e-12
        assert rep.value >= quad.vertex_values().max() - 1e-12
        if ctx.P >= 0:
            assert rep.value >= h_function(ctx, ctx.mu, mode) - 1e-9
        for _ in range(5):
            nu = DiscreteMeasure(rng.dirichlet(np.ones(G)))
            assert rep.value >= h_function(ctx, nu, mode) - 1e-9
