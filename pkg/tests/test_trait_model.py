"""
Trait model tests: grid, kernels, Hamiltonians, resources and structural checks.
"""
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

sys.path.insert(0, str(Path(__file__).parent.parent))

from Evolution.errors import InvalidInputError, KernelRangeError, StructureWarning
from Evolution.trait_model import (
    ConstantResource, DiscreteMeasure, GaussianResource, GrowthFunction, LogDensityState,
    MutationKernel, ResourceModel, ResourceVector, TabulatedResource, TraitGrid,
    check_envelope, discrete_lipschitz, discrete_semiconvexity, growth_rate, hamiltonian_H,
    hamiltonian_H_eps, hamiltonian_H_eps_field, hamiltonian_H_prime, log_mass,
    resource_response, resource_response_from_state, validate_structure,
)


kernel_tables = st.tuples(
    st.floats(0.2, 2.0),
    st.lists(st.floats(0.05, 3.0), min_size=5, max_size=21),
)


def _random_kernel(table) -> MutationKernel:
    rho, values = table
    z = np.linspace(-rho, rho, len(values))
    return MutationKernel.from_table(z, np.array(values), resolution=129)


# ============================================================================
# GRID
# ============================================================================

def test_grid_spacing_and_refinement(grid):
    assert grid.dx == pytest.approx(0.05)
    assert grid.nodes[200] == pytest.approx(0.0, abs=1e-12)
    fine = grid.refined()
    assert fine.n == 2 * grid.n - 1
    np.testing.assert_allclose(fine.nodes[::2], grid.nodes, atol=1e-12)


@pytest.mark.parametrize("x_min,x_max,n", [(0.0, 0.0, 10), (1.0, -1.0, 10), (0.0, 1.0, 2)])
def test_grid_rejects_bad_input(x_min, x_max, n):
    with pytest.raises(InvalidInputError):
        TraitGrid(x_min, x_max, n)


def test_grid_integrates_gaussian(grid):
    value = grid.integrate(np.exp(-grid.nodes ** 2))
    assert value == pytest.approx(np.sqrt(np.pi), rel=1e-10)


# ============================================================================
# KERNEL / HAMILTONIAN
# ============================================================================

@pytest.mark.parametrize("factory", [MutationKernel.cos2, MutationKernel.smooth_bump])
def test_kernel_normalised_and_symmetric(factory):
    K = factory(1.5, 257)
    assert K.mass == pytest.approx(1.0, abs=1e-12)
    assert abs(K.first_moment) < 1e-14
    assert K.density[0] == 0.0 and K.density[-1] == 0.0
    np.testing.assert_allclose(K.density, K.density[::-1], atol=0.0)
    assert np.all(K.density >= 0)


def test_kernel_table_is_symmetrised():
    K = MutationKernel.from_table([-1.0, -0.5, 0.0, 0.5, 1.0], [0.0, 2.0, 1.0, 0.0, 0.0])
    np.testing.assert_allclose(K.density, K.density[::-1])
    assert K.mass == pytest.approx(1.0)


def test_kernel_resolution_floor():
    with pytest.raises(InvalidInputError):
        MutationKernel.cos2(1.0, 32)


def test_kernel_rejects_negative_profile():
    with pytest.raises(InvalidInputError):
        MutationKernel.from_table([-1.0, 0.0, 1.0], [0.0, -1.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(table=kernel_tables, a=st.floats(-5.0, 5.0), b=st.floats(-5.0, 5.0))
def test_hamiltonian_nonnegative_and_convex(table, a, b):
    K = _random_kernel(table)
    ha, hb = hamiltonian_H(K, a), hamiltonian_H(K, b)
    hm = hamiltonian_H(K, 0.5 * (a + b))
    assert ha >= -1e-12 and hb >= -1e-12
    assert hm <= 0.5 * (ha + hb) + 1e-10 * (1.0 + max(ha, hb))


@settings(max_examples=50, deadline=None)
@given(table=kernel_tables, p=st.floats(-4.0, 4.0))
def test_hamiltonian_even_and_zero_at_origin(table, p):
    K = _random_kernel(table)
    assert hamiltonian_H(K, 0.0) == 0.0
    assert hamiltonian_H(K, p) == pytest.approx(hamiltonian_H(K, -p), rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("p", [-3.0, -0.7, 0.3, 1.0, 2.5])
def test_hamiltonian_matches_quadrature(kernel, p):
    def integrand(z):
        return np.cos(0.5 * np.pi * z) ** 2 * np.expm1(p * z)

    expected, _ = quad(integrand, -1.0, 1.0, epsabs=1e-13, epsrel=1e-12)
    assert hamiltonian_H(kernel, p) == pytest.approx(expected, rel=1e-6, abs=1e-10)


def test_hamiltonian_vectorised(kernel):
    p = np.linspace(-2, 2, 9)
    values = hamiltonian_H(kernel, p)
    assert values.shape == p.shape
    np.testing.assert_allclose(values, [hamiltonian_H(kernel, q) for q in p])


@pytest.mark.parametrize("p", [-2.0, 0.0, 0.5, 3.0])
def test_hamiltonian_derivative_matches_difference(kernel, p):
    h = 1e-5
    difference = (hamiltonian_H(kernel, p + h) - hamiltonian_H(kernel, p - h)) / (2 * h)
    assert hamiltonian_H_prime(kernel, p) == pytest.approx(difference, rel=1e-6, abs=1e-9)


def test_hamiltonian_guard(kernel):
    with pytest.raises(KernelRangeError) as info:
        hamiltonian_H(kernel, 600.0)
    assert info.value.max_argument == pytest.approx(600.0)
    assert isinstance(info.value, OverflowError)


def test_off_kernel_has_zero_hamiltonian():
    K = MutationKernel.off(1.0)
    assert K.is_off
    assert hamiltonian_H(K, 3.0) == 0.0


# ============================================================================
# H_eps
# ============================================================================

@pytest.mark.parametrize("p", [-1.5, 0.4, 2.0])
def test_h_eps_is_exact_for_linear_phi(grid, kernel, p):
    # linear interpolation and end-cell extrapolation are exact on linear phi
    state = LogDensityState(grid, p * grid.nodes, eps=0.1)
    field = hamiltonian_H_eps_field(state, kernel)
    np.testing.assert_allclose(field, hamiltonian_H(kernel, p), rtol=1e-9, atol=1e-12)


def test_h_eps_tends_to_h_of_slope(kernel):
    g = TraitGrid(-3.0, 3.0, 6001)
    phi = -0.5 * g.nodes ** 2
    j = g.node_index(1.0)
    errors = []
    for eps in (0.1, 0.05, 0.025):
        value = hamiltonian_H_eps(LogDensityState(g, phi, eps), kernel, j)
        errors.append(abs(value - hamiltonian_H(kernel, -1.0)))
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 5e-3


def test_h_eps_single_node_matches_field(grid, kernel):
    state = LogDensityState(grid, 1.0 - np.sqrt(1.0 + grid.nodes ** 2), eps=0.05)
    field = hamiltonian_H_eps_field(state, kernel)
    for j in (0, 57, 200, 400):
        assert hamiltonian_H_eps(state, kernel, j) == pytest.approx(field[j], rel=1e-13, abs=1e-15)
    with pytest.raises(InvalidInputError):
        hamiltonian_H_eps(state, kernel, 401)


def test_h_eps_guard_trips(grid, kernel):
    state = LogDensityState(grid, 1.0 - np.sqrt(1.0 + grid.nodes ** 2), eps=0.05)
    with pytest.raises(KernelRangeError):
        hamiltonian_H_eps_field(state, kernel, guard=0.5)


def test_h_eps_needs_positive_eps(grid, kernel):
    with pytest.raises(InvalidInputError):
        hamiltonian_H_eps_field(LogDensityState(grid, np.zeros(grid.n), eps=0.0), kernel)


# ============================================================================
# RESOURCES
# ============================================================================

def test_gaussian_derivatives_match_differences():
    eta = GaussianResource(2.0, 0.5, 1.3)
    x = np.linspace(-3, 3, 13)
    h = 1e-5
    np.testing.assert_allclose(eta.derivative(x, 1), (eta(x + h) - eta(x - h)) / (2 * h), atol=1e-8)
    np.testing.assert_allclose(eta.derivative(x, 2),
                               (eta.derivative(x + h) - eta.derivative(x - h)) / (2 * h), atol=1e-7)


def test_tabulated_resource_is_held_outside_table():
    x = np.linspace(-2, 2, 21)
    eta = TabulatedResource(x, 1.0 + np.exp(-x ** 2))
    assert eta(5.0) == pytest.approx(eta(2.0))
    assert eta.derivative(np.array([5.0]))[0] == 0.0
    np.testing.assert_allclose(eta(x), 1.0 + np.exp(-x ** 2), atol=1e-12)


def test_growth_function_from_dict_round_trip():
    for data in ({"family": "gaussian", "amplitude": 2.0, "center": 1.0, "width": 0.5},
                 {"family": "constant", "amplitude": 1.5}):
        assert GrowthFunction.from_dict(data).to_dict() == data
    with pytest.raises(InvalidInputError):
        GrowthFunction.from_dict({"family": "cubic", "amplitude": 1.0})


def test_growth_rate_scalar_and_vector(single_model):
    assert growth_rate([0.5], single_model, 0.0) == pytest.approx(0.0)
    g = growth_rate(ResourceVector([1.0]), single_model, np.array([0.0, 10.0]))
    np.testing.assert_allclose(g, [1.0, -1.0], atol=1e-12)
    with pytest.raises(InvalidInputError):
        growth_rate([0.5, 0.5], single_model, 0.0)


def test_resource_response_of_empty_population(grid, two_model):
    I = resource_response(np.zeros(grid.n), two_model, grid)
    np.testing.assert_array_equal(I.values, [1.0, 1.0])
    with pytest.raises(InvalidInputError):
        resource_response(-np.ones(grid.n), two_model, grid)


@settings(max_examples=50, deadline=None)
@given(u=st.lists(st.floats(0.0, 10.0), min_size=7, max_size=7),
       extra=st.lists(st.floats(0.0, 10.0), min_size=7, max_size=7))
def test_more_population_means_fewer_resources(u, extra):
    g = TraitGrid(-3.0, 3.0, 7)
    model = ResourceModel((GaussianResource(2.0, -1.0, 1.0), GaussianResource(2.0, 1.0, 1.0)))
    low = resource_response(np.array(u), model, g)
    high = resource_response(np.array(u) + np.array(extra), model, g)
    assert np.all(high.values <= low.values + 1e-15)


def test_log_space_response_matches_direct(grid, two_model):
    eps = 0.2
    state = LogDensityState(grid, -0.5 * (grid.nodes - 0.3) ** 2, eps)
    direct = resource_response(np.exp(state.phi / eps), two_model, grid)
    np.testing.assert_allclose(resource_response_from_state(state, two_model).values, direct.values, rtol=1e-12)


def test_log_mass_of_gaussian():
    g = TraitGrid(-5.0, 5.0, 2001)
    eps = 0.1
    state = LogDensityState(g, -g.nodes ** 2, eps)
    assert np.exp(log_mass(state)) == pytest.approx(np.sqrt(np.pi * eps), rel=1e-8)


def test_log_mass_survives_huge_exponents(grid):
    # exp(phi/eps) overflows, the log-space value does not
    state = LogDensityState(grid, np.full(grid.n, 10.0), eps=1e-3)
    assert log_mass(state) == pytest.approx(1e4 + np.log(grid.length), rel=1e-12)


def test_discrete_regularity_measures(grid):
    phi = -0.5 * grid.nodes ** 2
    assert discrete_lipschitz(phi, grid.dx) == pytest.approx(10.0 - 0.5 * grid.dx)
    assert discrete_semiconvexity(phi, grid.dx) == pytest.approx(-1.0)


# ============================================================================
# MEASURES / STATE
# ============================================================================

def test_measure_validation():
    with pytest.raises(InvalidInputError):
        DiscreteMeasure([0.0, 1.0], [1.0, -0.1])
    with pytest.raises(InvalidInputError):
        DiscreteMeasure([1.0, 0.0], [1.0, 1.0])
    mu = DiscreteMeasure([0.0, 1.0, 2.0], [0.5, 1e-14, 0.25])
    assert mu.pruned().n_atoms == 2
    assert mu.total_mass == pytest.approx(0.75)
    assert DiscreteMeasure.empty().is_empty()


def test_state_phi_is_read_only(grid):
    state = LogDensityState(grid, np.zeros(grid.n), eps=0.1)
    with pytest.raises(ValueError):
        state.phi[0] = 1.0
    with pytest.raises(InvalidInputError):
        LogDensityState(grid, np.full(grid.n, np.nan), eps=0.1)


# ============================================================================
# STRUCTURAL CHECKS
# ============================================================================

def test_valid_model_passes_without_warnings(grid, single_model):
    with warnings.catch_warnings():
        warnings.simplefilter("error", StructureWarning)
        report = validate_structure(single_model, grid, samples=32, rng=np.random.default_rng(0))
    assert report.passed and report.roots_ok and report.invertibility_ok


def test_constant_resource_fails_envelope(grid):
    model = ResourceModel((ConstantResource(2.0),))
    assert not check_envelope(model, grid).envelope_ok
    with pytest.warns(StructureWarning):
        report = validate_structure(model, grid, samples=8, rng=np.random.default_rng(0))
    assert not report.passed


def test_duplicate_resources_warn_rank_deficiency(grid):
    eta = GaussianResource(2.0, 0.0, 1.0)
    model = ResourceModel((eta, eta))
    with pytest.warns(StructureWarning, match="rank deficient"):
        report = validate_structure(model, grid, samples=16, rng=np.random.default_rng(1))
    assert report.rank_deficient_samples == 16
    assert not report.invertibility_ok


def test_log_mass_of_a_kinked_profile():
    g = TraitGrid(-10.0, 10.0, 200001)
    eps = 0.1
    state = LogDensityState(g, -np.abs(g.nodes), eps)
    assert log_mass(state) == pytest.approx(np.log(2 * eps * (1 - np.exp(-10.0 / eps))), abs=1e-6)
    # doubling phi and eps together leaves exp(phi/eps) alone
    doubled = LogDensityState(g, 2 * state.phi, 2 * eps)
    assert log_mass(doubled) == pytest.approx(log_mass(state), abs=1e-12)


def test_h_eps_matches_quadrature_of_the_exact_profile():
    eps, x = 0.05, 0.5
    g = TraitGrid(-2.0, 2.0, 80001)
    profile = lambda y: -np.sqrt(1.0 + y ** 2)
    state = LogDensityState(g, profile(g.nodes), eps)
    value = hamiltonian_H_eps(state, MutationKernel.cos2(1.0, 257), g.node_index(x))
    expected, _ = quad(lambda z: np.cos(0.5 * np.pi * z) ** 2
                       * np.expm1((profile(x + eps * z) - profile(x)) / eps), -1.0, 1.0, epsabs=1e-13)
    assert value == pytest.approx(expected, abs=5e-8)
