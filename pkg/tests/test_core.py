import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from geoflow.core import (
    DomainGrid, InputError, PathMeasure, TransportPlan, action_of_measure, concatenate,
    constant_flow, density_of, endpoint_plan, incompressibility_residual, path_action,
    plan_of_map, restrict, speed_profile, torus_distance,
)
from geoflow.solver import GeodesicProblem, solve_exact


def translation_flow(n=4, K=2, shift=None, d=1):
    """Every label moves rigidly by ``shift`` cells, one cell per step."""
    g = DomainGrid(d, n, K)
    shift = K if shift is None else shift
    cells = np.arange(g.num_cells)
    nodes = np.stack([(cells + (shift * k) // K) % n for k in range(K + 1)], axis=1)
    return PathMeasure(g, cells, nodes, np.full(n, 1.0 / n))


@st.composite
def path_measures(draw, d=1, n=4, K=3):
    """Random label-uniform measures: one to three weighted paths per label."""
    g = DomainGrid(d, n, K)
    labels, nodes, weights = [], [], []
    for a in range(g.num_cells):
        k = draw(st.integers(1, 3))
        raw = np.array(draw(st.lists(st.floats(0.1, 1.0), min_size=k, max_size=k)))
        for w in raw / raw.sum():
            labels.append(a)
            nodes.append(draw(st.lists(st.integers(0, g.num_cells - 1), min_size=K + 1,
                                       max_size=K + 1)))
            weights.append(w / g.num_cells)
    weights = np.array(weights)
    weights[-1] = 1.0 - weights[:-1].sum()
    return PathMeasure(g, labels, nodes, weights, strict=False)


# distances -------------------------------------------------------------------


def test_distance_identity_and_wraparound():
    g = DomainGrid(1, 4, 1)
    assert torus_distance(g, 0, 0) == 0.0
    assert torus_distance(g, 0, 3) == 0.25


def test_distance_diagonal_reaches_half_sqrt_d():
    g = DomainGrid(2, 2, 1)
    x, y = g.index(np.array([0, 0])), g.index(np.array([1, 1]))
    assert torus_distance(g, x, y) == pytest.approx(math.sqrt(2) / 2, abs=1e-15)
    assert torus_distance(g, x, y) <= math.sqrt(g.d) / 2 + 1e-15


def test_distance_rejects_bad_cell():
    with pytest.raises(InputError):
        torus_distance(DomainGrid(1, 4, 1), 0, 4)


@pytest.mark.parametrize("d,n,geometry", [(1, 5, "torus"), (2, 3, "torus"), (2, 3, "cube")])
def test_squared_distance_table_matches_loops(d, n, geometry):
    g = DomainGrid(d, n, 1, geometry)
    ref = np.array([[oracles.sq_dist(d, n, geometry, x, y) for y in range(g.num_cells)]
                    for x in range(g.num_cells)])
    np.testing.assert_allclose(g.sq_dist, ref, atol=1e-15)


def test_half_turn_tie_goes_positive():
    g = DomainGrid(1, 4, 1)
    assert g.step_cells[0, 2, 0] == 2
    assert g.step_cells[2, 0, 0] == 2


def test_grid_validation():
    for bad in ((3, 4, 1), (1, 1, 1), (1, 4, 0)):
        with pytest.raises(InputError):
            DomainGrid(*bad)
    with pytest.raises(InputError):
        DomainGrid(1, 4, 1, "sphere")


# actions ---------------------------------------------------------------------


def test_constant_path_has_zero_action():
    assert path_action(DomainGrid(1, 4, 2), [1, 1, 1]) == 0.0


def test_half_turn_path_action():
    assert path_action(DomainGrid(1, 4, 2), [0, 1, 2]) == pytest.approx(0.125, abs=1e-15)


def test_random_path_action_matches_resummation():
    rng = np.random.default_rng(3)
    g = DomainGrid(1, 4, 3)
    for _ in range(20):
        nodes = rng.integers(0, 4, size=4)
        ref = oracles.path_kinetic(1, 4, 3, "torus", tuple(nodes))
        assert path_action(g, nodes) == pytest.approx(ref, abs=1e-14)


@given(path_measures())
@settings(max_examples=25, deadline=None)
def test_path_action_time_reversal(eta):
    for row in eta.nodes:
        assert path_action(eta.grid, row) == pytest.approx(path_action(eta.grid, row[::-1]),
                                                           abs=1e-14)


def test_action_quadratic_in_speed():
    g = DomainGrid(1, 8, 2)
    slow = path_action(g, [0, 1, 2])
    fast = path_action(g, [0, 2, 4])
    assert fast == pytest.approx(4 * slow, rel=1e-14)


def test_measure_actions():
    g = DomainGrid(1, 4, 2)
    still = constant_flow(TransportPlan.identity(g))
    assert action_of_measure(still) == 0.0
    move = translation_flow()
    assert action_of_measure(move) == pytest.approx(0.125, abs=1e-15)
    mix = PathMeasure(g, np.concatenate([still.labels, move.labels]),
                      np.vstack([still.nodes, move.nodes]),
                      np.concatenate([still.weights, move.weights]) / 2)
    assert action_of_measure(mix) == pytest.approx(0.0625, abs=1e-15)


# densities -------------------------------------------------------------------


def test_incompressible_flow_has_unit_density():
    eta = translation_flow()
    np.testing.assert_array_equal(density_of(eta).values, 1.0)
    assert incompressibility_residual(eta) == 0.0


def test_single_stationary_path_density():
    g = DomainGrid(1, 4, 2)
    eta = PathMeasure(g, [1], [[2, 2, 2]], [1.0], strict=False)
    rho = density_of(eta).values
    np.testing.assert_array_equal(rho[:, 2], 4.0)
    assert rho.sum() == 12.0
    assert incompressibility_residual(eta) == 3.0


@given(path_measures())
@settings(max_examples=30, deadline=None)
def test_density_matches_histogram(eta):
    g = eta.grid
    hist = np.zeros((g.K + 1, g.num_cells))
    for nodes, w in zip(eta.nodes.tolist(), eta.weights.tolist()):
        for k, x in enumerate(nodes):
            hist[k][x] += w
    np.testing.assert_allclose(density_of(eta).values, hist * g.num_cells, atol=1e-12)
    np.testing.assert_allclose(density_of(eta).values.sum(axis=1) * g.cell_mass, 1.0,
                               atol=1e-12)
    assert incompressibility_residual(eta) == pytest.approx(
        np.abs(hist * g.num_cells - 1).max(), abs=1e-12)


@given(path_measures(), st.data())
@settings(max_examples=30, deadline=None)
def test_density_commutes_with_restriction(eta, data):
    K = eta.grid.K
    s = data.draw(st.integers(0, K - 1))
    t = data.draw(st.integers(s + 1, K))
    np.testing.assert_allclose(density_of(restrict(eta, s, t)).values,
                               density_of(eta).values[s: t + 1], atol=1e-14)


# plans -----------------------------------------------------------------------


def test_endpoint_plan_of_translation():
    g = DomainGrid(1, 4, 1)
    eta = translation_flow(K=1, shift=1)
    plan = endpoint_plan(eta, 0, 1)
    np.testing.assert_allclose(plan.matrix, plan_of_map(g, (np.arange(4) + 1) % 4).matrix)


def test_endpoint_plan_rejects_empty_interval():
    with pytest.raises(InputError):
        endpoint_plan(translation_flow(), 0, 0)


@given(path_measures(), st.data())
@settings(max_examples=30, deadline=None)
def test_endpoint_plan_matches_pair_counting(eta, data):
    K = eta.grid.K
    s = data.draw(st.integers(0, K - 1))
    t = data.draw(st.integers(s + 1, K))
    ref = {}
    for nodes, w in zip(eta.nodes.tolist(), eta.weights.tolist()):
        ref[nodes[s], nodes[t]] = ref.get((nodes[s], nodes[t]), 0.0) + w
    m = endpoint_plan(eta, s, t).matrix
    for (x, y), w in ref.items():
        assert m[x, y] == pytest.approx(w, abs=1e-15)
    assert m.sum() == pytest.approx(1.0, abs=1e-12)


def test_per_label_endpoint_plans_are_probabilities():
    eta = translation_flow(n=4, K=2)
    out = endpoint_plan(eta, 0, 2, per_label=True)
    np.testing.assert_allclose(out.sum(axis=(1, 2)), 1.0)


def test_plan_of_map_examples():
    g = DomainGrid(1, 4, 1)
    np.testing.assert_array_equal(plan_of_map(g, np.arange(4)).matrix, np.eye(4) / 4)
    np.testing.assert_array_equal(plan_of_map(g, [1, 2, 3, 0]).matrix,
                                  np.roll(np.eye(4), 1, axis=1) / 4)
    with pytest.raises(InputError):
        plan_of_map(g, [0, 0, 1, 2])


def test_plan_of_random_permutation_cell_by_cell():
    g = DomainGrid(2, 3, 1)
    perm = np.random.default_rng(1).permutation(9)
    m = plan_of_map(g, perm).matrix
    for x in range(9):
        for y in range(9):
            assert m[x, y] == (1 / 9 if perm[x] == y else 0.0)


def test_plan_validation_reports_row():
    g = DomainGrid(1, 4, 1)
    m = np.eye(4) / 4
    m[1, 1] = 0.125
    with pytest.raises(InputError) as err:
        TransportPlan(g, m)
    assert err.value.index == 1


def test_measure_validation():
    g = DomainGrid(1, 4, 1)
    with pytest.raises(InputError):
        PathMeasure(g, [0], [[0, 0]], [0.5], strict=False)
    with pytest.raises(InputError):
        PathMeasure(g, [0, 1], [[0, 0], [1, 1]], [1.5, -0.5], strict=False)
    with pytest.raises(InputError):
        PathMeasure(g, [0, 1, 2, 3], [[0, 0]] * 4, [0.4, 0.1, 0.25, 0.25])
    with pytest.raises(InputError):
        PathMeasure(g, [0], [[0, 0, 0]], [1.0], strict=False)


# restriction and gluing ------------------------------------------------------


def test_restriction_of_translation():
    eta = translation_flow(n=4, K=2)
    half = restrict(eta, 0, 1)
    assert half.grid.K == 1
    assert action_of_measure(half) == pytest.approx(action_of_measure(eta) / 4, abs=1e-15)


def test_concatenation_of_two_quarter_turns():
    q = translation_flow(n=4, K=1, shift=1)
    glued = concatenate(q, q.__class__(q.grid, q.labels, (q.nodes + 1) % 4, q.weights), l=0.5)
    full = translation_flow(n=4, K=2)
    np.testing.assert_array_equal(glued.merged().nodes, full.merged().nodes)
    np.testing.assert_allclose(glued.merged().weights, full.merged().weights)


def test_concatenation_rejects_mismatch():
    q = translation_flow(n=4, K=1, shift=1)
    with pytest.raises(InputError):
        concatenate(q, q)


@given(path_measures(K=2), st.data())
@settings(max_examples=20, deadline=None)
def test_glued_step_energies_add(eta, data):
    # a second flow starting where each label of the first one ends
    g = eta.grid
    end = eta.nodes[:, -1]
    tail = []
    for x in end:
        steps = data.draw(st.lists(st.integers(0, g.num_cells - 1), min_size=1, max_size=1))
        tail.append([x, steps[0]])
    second = PathMeasure(g.with_steps(1), eta.labels, tail, eta.weights, strict=False)
    glued = concatenate(eta, second)
    lhs = action_of_measure(glued) / glued.grid.K
    rhs = action_of_measure(eta) / g.K + action_of_measure(second) / 1
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_optimal_flow_has_constant_speed():
    g = DomainGrid(1, 8, 4)
    prob = GeodesicProblem(g, TransportPlan.identity(g), plan_of_map(g, (np.arange(8) + 4) % 8))
    prof = speed_profile(solve_exact(prob).flow)
    assert np.ptp(prof) <= 1e-6 * prof.max()
