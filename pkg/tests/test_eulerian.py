import numpy as np
import pytest
from hypothesis import given, settings

from geoflow.cli import reflection_problem
from geoflow.core import DomainGrid, InputError, PathMeasure, action_of_measure
from geoflow.eulerian import (
    EulerianFlow, StepEdges, continuity_residual, edge_action, eulerian_action,
    from_path_measure, incompressibility_defect, pressure_from_eulerian, step_spread,
    to_path_measure,
)
from geoflow.solver import solve_exact
from test_core import path_measures, translation_flow


def test_translation_is_deterministic():
    ef = from_path_measure(translation_flow())
    assert step_spread(ef) == 0
    assert eulerian_action(ef) == pytest.approx(0.125, abs=1e-15)
    assert edge_action(ef) == pytest.approx(0.125, abs=1e-15)
    assert incompressibility_defect(ef) == 0.0
    p, res = pressure_from_eulerian(ef)
    assert np.abs(p.values).max() <= 1e-12
    assert res <= 1e-12


def test_opposite_steps_cancel_in_the_average():
    g = DomainGrid(1, 4, 1)
    eta = PathMeasure(g, [0, 0], [[0, 1], [0, 3]], [0.5, 0.5], strict=False)
    ef = from_path_measure(eta)
    np.testing.assert_allclose(ef.velocity(0)[0, 0], 0.0, atol=1e-15)
    assert eulerian_action(ef) == 0.0
    assert edge_action(ef) == pytest.approx(action_of_measure(eta), abs=1e-15)
    assert edge_action(ef) > 0
    assert step_spread(ef) == 1


def test_static_flow_has_no_action():
    g = DomainGrid(2, 3, 2)
    cells = np.arange(9)
    eta = PathMeasure(g, cells, np.stack([cells] * 3, axis=1), np.full(9, 1 / 9))
    ef = from_path_measure(eta)
    assert eulerian_action(ef) == 0.0 and edge_action(ef) == 0.0


@given(path_measures())
@settings(max_examples=30, deadline=None)
def test_continuity_holds_on_random_flows(eta):
    ef = from_path_measure(eta)
    assert continuity_residual(ef) <= 1e-14
    g = eta.grid
    hist = np.zeros((g.K + 1, g.num_cells, g.num_cells))
    lm = eta.label_masses()
    for a, nodes, w in zip(eta.labels.tolist(), eta.nodes.tolist(), eta.weights.tolist()):
        for k, x in enumerate(nodes):
            hist[k, a, x] += w / lm[a]
    np.testing.assert_allclose(ef.density, hist, atol=1e-14)
    assert eulerian_action(ef) <= edge_action(ef) + 1e-14
    assert edge_action(ef) == pytest.approx(action_of_measure(eta), abs=1e-13)


@given(path_measures())
@settings(max_examples=30, deadline=None)
def test_round_trip_preserves_edge_action(eta):
    ef = from_path_measure(eta)
    back = from_path_measure(to_path_measure(ef))
    assert edge_action(back) == pytest.approx(edge_action(ef), abs=1e-13)
    for k in range(eta.grid.K):
        np.testing.assert_allclose(back.dense_step(k), ef.dense_step(k), atol=1e-14)


def test_deterministic_edges_give_single_paths():
    eta = translation_flow(n=6, K=3, shift=3)
    back = to_path_measure(from_path_measure(eta))
    assert back.num_paths == 6
    np.testing.assert_array_equal(back.merged().nodes, eta.merged().nodes)


def test_uniform_mixing_edges():
    g = DomainGrid(1, 2, 1)
    edges = (StepEdges([0, 0, 1, 1], [0, 0, 1, 1], [0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5]),)
    eta = to_path_measure(EulerianFlow(g, edges))
    assert eta.num_paths == 4
    for a in (0, 1):
        np.testing.assert_allclose(eta.weights[eta.labels == a], [0.25, 0.25])


def test_broken_continuity_is_rejected():
    g = DomainGrid(1, 2, 2)
    edges = (StepEdges([0, 1], [0, 1], [0, 1], [1.0, 1.0]),
             StepEdges([0, 1], [1, 0], [1, 0], [1.0, 1.0]))
    ef = EulerianFlow(g, edges)
    assert continuity_residual(ef) > 0
    with pytest.raises(InputError):
        to_path_measure(ef)
    with pytest.raises(InputError):
        EulerianFlow(g, edges[:1])


def test_equality_case_steps_match_average_velocity():
    # tight Jensen inequality: every support step equals the cell-averaged velocity
    eta = translation_flow(n=8, K=4, shift=4)
    g = eta.grid
    ef = from_path_measure(eta)
    assert eulerian_action(ef) == edge_action(ef)
    for k, e in enumerate(ef.edges):
        np.testing.assert_allclose(g.displacement[e.src, e.dst] / g.dt,
                                   ef.velocity(k)[e.label, e.src], atol=1e-14)


def test_equivalence_at_the_optimum():
    for n, K in ((4, 2), (6, 3)):
        sol = solve_exact(reflection_problem(n, K))
        ef = from_path_measure(sol.flow)
        assert edge_action(from_path_measure(to_path_measure(ef))) == \
            pytest.approx(sol.value, abs=1e-7)
        assert eulerian_action(ef) <= sol.value + 1e-12


def test_eulerian_pressure_tracks_lp_pressure():
    prob = reflection_problem(8, 8, selection="central")
    sol = solve_exact(prob)
    p, _ = pressure_from_eulerian(from_path_measure(sol.flow))
    for k in range(prob.grid.K - 1):
        assert np.corrcoef(p.values[k], sol.pressure.values[k])[0, 1] >= 0.95
