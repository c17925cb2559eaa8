import math

import numpy as np
import pytest

import oracles
from geoflow.cli import reflection_problem
from geoflow.core import (
    DomainGrid, InfeasibleError, PathMeasure, SolverError, TransportPlan, action_of_measure,
    endpoint_plan, plan_of_map, restrict, speed_profile,
)
from geoflow.solver import (
    GeodesicProblem, PressureField, count_paths, dual_gap, enumerate_paths, solve,
    solve_entropic, solve_exact,
)

# Reflection x -> -x on T^1 with a two-cell cap.  Values computed once with the
# brute-force path LP in tests/oracles.py (GLPK over every enumerated path).
REFLECTION_VALUES = {(4, 2): 0.125, (8, 2): 0.09375, (8, 4): 0.11458333333333334}


def plans(g, rng):
    return (TransportPlan(g, oracles.random_bistochastic(rng, g.num_cells)),
            TransportPlan(g, oracles.random_bistochastic(rng, g.num_cells)))


# path enumeration ------------------------------------------------------------


def test_count_paths_examples():
    assert count_paths(DomainGrid(1, 2, 1), 1) == 4
    assert count_paths(DomainGrid(1, 2, 2), 1) == len(oracles.all_paths(1, 2, 2, "torus", 1))
    assert count_paths(DomainGrid(1, 2, 2), 1) == 8
    assert count_paths(DomainGrid(2, 3, 3), 0) == 9


@pytest.mark.parametrize("d,n,K,cap,geometry", [(1, 5, 3, 1, "torus"), (2, 3, 2, 1, "cube"),
                                                (1, 4, 2, 2, "cube")])
def test_enumeration_matches_brute_force(d, n, K, cap, geometry):
    paths = enumerate_paths(DomainGrid(d, n, K, geometry), cap)
    ref = oracles.all_paths(d, n, K, geometry, cap)
    assert [tuple(p) for p in paths.tolist()] == sorted(ref)


def test_enumeration_budget():
    with pytest.raises(SolverError):
        enumerate_paths(DomainGrid(2, 8, 6), 2, budget=1000)


# exact backend -----------------------------------------------------------------


def test_identity_endpoints_give_still_flow():
    g = DomainGrid(1, 4, 2)
    sol = solve_exact(GeodesicProblem(g, TransportPlan.identity(g), TransportPlan.identity(g)))
    assert sol.value == 0.0
    assert np.all(sol.flow.nodes == sol.flow.nodes[:, :1])


@pytest.mark.parametrize("n,K", sorted(REFLECTION_VALUES))
def test_reflection_values(n, K):
    sol = solve_exact(reflection_problem(n, K))
    assert sol.value == pytest.approx(REFLECTION_VALUES[(n, K)], abs=1e-9)


def test_reflection_matches_live_oracle():
    prob = reflection_problem(4, 2)
    sol = solve_exact(prob)
    ref = oracles.brute_geodesic_value(1, 4, 2, "torus", prob.eta.matrix, prob.gamma.matrix, 2)
    assert sol.value == pytest.approx(ref, abs=1e-9)
    assert action_of_measure(sol.flow) == pytest.approx(sol.value, abs=1e-10)
    assert sol.flow.is_incompressible(1e-9)


def test_solution_invariants_on_random_plans():
    rng = np.random.default_rng(11)
    g = DomainGrid(1, 6, 3)
    for _ in range(5):
        eta, gamma = plans(g, rng)
        sol = solve_exact(GeodesicProblem(g, eta, gamma))
        diag = sol.diagnostics
        assert abs(diag["gap"]) <= 1e-8
        assert diag["min_reduced_cost"] >= -1e-8
        assert diag["max_slackness"] <= 1e-8
        assert diag["marginal_error"] <= 1e-9
        assert np.abs(sol.pressure.values.sum(axis=1)).max() <= 1e-10
        assert action_of_measure(sol.flow) == pytest.approx(sol.value, abs=1e-9)
        np.testing.assert_allclose(endpoint_plan(sol.flow, 0, g.K).matrix.sum(axis=0), 1 / 6)
        start = np.zeros((6, 6))
        np.add.at(start, (sol.flow.labels, sol.flow.nodes[:, 0]), sol.flow.weights)
        np.testing.assert_allclose(start, eta.matrix, atol=1e-9)


def test_constant_speed_when_displacement_divides_evenly():
    g = DomainGrid(1, 8, 2)
    prob = GeodesicProblem(g, TransportPlan.identity(g), plan_of_map(g, (np.arange(8) + 2) % 8))
    prof = speed_profile(solve_exact(prob).flow)
    assert np.ptp(prof) <= 1e-6 * prof.max()


def test_restriction_stays_optimal():
    rng = np.random.default_rng(4)
    g = DomainGrid(1, 6, 4)
    eta, gamma = plans(g, rng)
    sol = solve_exact(GeodesicProblem(g, eta, gamma))
    for s, t in ((0, 2), (1, 3), (2, 4), (1, 4)):
        piece = restrict(sol.flow, s, t)
        gs = piece.grid
        lab = np.zeros((2, 6, 6))
        for j, node in enumerate((0, t - s)):
            np.add.at(lab[j], (piece.labels, piece.nodes[:, node]), piece.weights)
        sub = solve_exact(GeodesicProblem(gs, TransportPlan(gs, lab[0]),
                                          TransportPlan(gs, lab[1])))
        assert sub.value == pytest.approx(action_of_measure(piece), abs=1e-8)


def test_symmetry_and_triangle_inequality():
    rng = np.random.default_rng(5)
    g = DomainGrid(1, 6, 2)
    for _ in range(4):
        a, b = plans(g, rng)
        c = TransportPlan(g, oracles.random_bistochastic(rng, 6))
        ab = solve_exact(GeodesicProblem(g, a, b)).value
        ba = solve_exact(GeodesicProblem(g, b, a)).value
        assert ab == pytest.approx(ba, abs=1e-9)
        ac = solve_exact(GeodesicProblem(g, a, c)).value
        cb = solve_exact(GeodesicProblem(g, c, b)).value
        # distance = sqrt(2 * action)
        assert math.sqrt(2 * ab) <= math.sqrt(2 * ac) + math.sqrt(2 * cb) + 1e-8


def test_right_invariance():
    rng = np.random.default_rng(6)
    g = DomainGrid(1, 6, 2)
    eta, gamma = plans(g, rng)
    perm = rng.permutation(6)
    v1 = solve_exact(GeodesicProblem(g, eta, gamma)).value
    v2 = solve_exact(GeodesicProblem(g, eta.relabel(perm), gamma.relabel(perm))).value
    assert v1 == pytest.approx(v2, abs=1e-12)


def test_infeasible_cap():
    g = DomainGrid(1, 4, 2)
    prob = GeodesicProblem(g, TransportPlan.identity(g), plan_of_map(g, (np.arange(4) + 2) % 4),
                           cap=0)
    with pytest.raises(InfeasibleError):
        solve(prob)
    with pytest.raises(InfeasibleError):
        solve(GeodesicProblem(g, prob.eta, prob.gamma, backend="entropic", cap=0))


def test_central_selection_keeps_value():
    for n, K in ((4, 2), (8, 4)):
        v = solve_exact(reflection_problem(n, K)).value
        c = solve_exact(reflection_problem(n, K, selection="central"))
        assert c.value == pytest.approx(v, abs=1e-9)
        assert c.flow.is_incompressible(1e-9)


# entropic backend --------------------------------------------------------------


def test_entropic_translation_within_two_percent():
    g = DomainGrid(1, 4, 2)
    prob = GeodesicProblem(g, TransportPlan.identity(g), plan_of_map(g, (np.arange(4) + 2) % 4),
                           backend="entropic", epsilon=1e-3, cap=1)
    sol = solve_entropic(prob)
    assert sol.value == pytest.approx(0.125, rel=0.02)
    assert sol.diagnostics["marginal_error"] <= prob.tol


def test_entropic_identity_is_free():
    g = DomainGrid(1, 4, 2)
    for eps in (1e-1, 1e-3):
        sol = solve(GeodesicProblem(g, TransportPlan.identity(g), TransportPlan.identity(g),
                                    backend="entropic", epsilon=eps))
        assert sol.value == 0.0


def test_entropic_reflection_values_approach_lp():
    lp = solve_exact(reflection_problem(4, 2)).value
    gaps = [abs(solve_entropic(reflection_problem(4, 2, "entropic", eps, 1e-13)).value - lp)
            for eps in (1e-1, 1e-2, 1e-3)]
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_entropic_nonconvergence_is_reported():
    prob = reflection_problem(8, 4, "entropic", 1e-3, 1e-14)
    prob = GeodesicProblem(prob.grid, prob.eta, prob.gamma, backend="entropic", epsilon=1e-3,
                           tol=1e-14, max_iter=3)
    with pytest.raises(SolverError, match="marginal error"):
        solve_entropic(prob)


# dual least action -------------------------------------------------------------


def test_dual_gap_at_optimum_and_for_competitors():
    rng = np.random.default_rng(9)
    g = DomainGrid(1, 4, 2)
    eta, gamma = plans(g, rng)
    sol = solve_exact(GeodesicProblem(g, eta, gamma, cap=1))
    star = sol.flow
    assert dual_gap(star, sol.pressure, star) == pytest.approx(0.0, abs=1e-12)
    # move one path through a different middle cell, same label and endpoints
    for i in range(star.num_paths):
        for mid in range(4):
            nodes = star.nodes.copy()
            nodes[i, 1] = mid
            nu = PathMeasure(g, star.labels, nodes, star.weights)
            assert dual_gap(star, sol.pressure, nu) >= -1e-9
    other = solve_exact(GeodesicProblem(g, eta, gamma, cap=1, selection="central")).flow
    assert dual_gap(star, sol.pressure, other) >= -1e-9


def test_pressure_field_validation():
    g = DomainGrid(1, 4, 3)
    with pytest.raises(ValueError):
        PressureField(g, np.ones((2, 4)))
    p = PressureField.from_raw(g, np.arange(8.0))
    assert np.abs(p.values.sum(axis=1)).max() <= 1e-12
    assert p.full().shape == (4, 4)
