"""Machine-checkable optimality certificates for discrete generalized flows.

A flow is certified against a potential q when

* every support path minimizes the q-Lagrangian between its own positions
  on every node subinterval, and
* for every label and interval, the joint law of the positions at the
  two ends is an optimal coupling for the connection cost.

When both hold the flow is optimal and q is its pressure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    InfeasibleError,
    InputError,
    TransportPlan,
    action_of_measure,
    incompressibility_residual,
)
from .costs import all_interval_costs, dp_cost, ot_value
from .solver import DEFAULT_CAP, full_field

DEFAULT_TOL = 1e-7


@dataclass(frozen=True)
class ConditionReport:
    gap: float
    verdict: bool
    tol: float
    worst: tuple = ()
    interval_gaps: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CertificateReport:
    first_gap: float
    second_gap: float
    verdict: bool
    tol: float
    identity_residual: float
    worst_path: int = -1
    interval_gaps: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "tol": self.tol,
            "first_condition_gap": self.first_gap,
            "second_condition_gap": self.second_gap,
            "identity_residual": self.identity_residual,
            "worst_path": self.worst_path,
            "interval_gaps": [{"s": s, "t": t, "gap": g}
                              for (s, t), g in sorted(self.interval_gaps.items())],
        }


def _lagrangian_increments(eta, qf):
    g = eta.grid
    nodes = eta.nodes
    kin = g.sq_dist[nodes[:, :-1], nodes[:, 1:]] / (2.0 * g.dt)
    run = qf[np.arange(1, g.K + 1)[None, :], nodes[:, 1:]] * g.dt
    return np.concatenate([np.zeros((nodes.shape[0], 1)), np.cumsum(kin - run, axis=1)], axis=1)


def check_first_condition(eta, q, tol=DEFAULT_TOL, cap=DEFAULT_CAP, costs=None):
    """Worst Lagrangian excess of a support path over any node subinterval."""
    g = eta.grid
    qf = full_field(g, q)
    if costs is None:
        costs = all_interval_costs(g, qf, cap)
    live = np.flatnonzero(eta.weights > 0)
    nodes = eta.nodes[live]
    cum = _lagrangian_increments(eta, qf)[live]
    worst, where = -math.inf, ()
    for (s, t), C in costs.items():
        gaps = cum[:, t] - cum[:, s] - C[nodes[:, s], nodes[:, t]]
        j = int(np.argmax(gaps))
        if gaps[j] > worst:
            worst, where = float(gaps[j]), (int(live[j]), s, t)
    return ConditionReport(worst, bool(worst <= tol), tol, where)


def default_intervals(K):
    pairs = [(s, t) for s in range(K) for t in range(s + 2, K + 1)]
    return pairs or [(0, K)]


def parse_intervals(spec, K, seed=0):
    """'all', 'sample:m' or an explicit list of node pairs."""
    if spec is None or spec == "all":
        return default_intervals(K)
    if isinstance(spec, str) and spec.startswith("sample:"):
        m = int(spec.split(":", 1)[1])
        pairs = default_intervals(K)
        if m >= len(pairs):
            return pairs
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(pairs), size=m, replace=False))
        return [pairs[i] for i in pick]
    if isinstance(spec, str):
        raise InputError(f"unknown interval policy {spec!r}")
    out = []
    for s, t in spec:
        if not (0 <= s < t <= K):
            raise InputError(f"bad interval ({s}, {t})")
        out.append((int(s), int(t)))
    return out


def _label_plans(eta, s, t):
    N = eta.grid.num_cells
    plans = np.zeros((N, N, N))
    np.add.at(plans, (eta.labels, eta.nodes[:, s], eta.nodes[:, t]), eta.weights)
    return plans


def check_second_condition(eta, q, intervals=None, tol=DEFAULT_TOL, cap=DEFAULT_CAP,
                           costs=None):
    """Worst transport excess of a label's endpoint coupling on the intervals."""
    g = eta.grid
    qf = full_field(g, q)
    pairs = parse_intervals(intervals, g.K)
    worst, where = -math.inf, ()
    per_interval = {}
    for s, t in pairs:
        C = costs[(s, t)] if costs is not None else dp_cost(g, qf, s, t, cap).dense()
        plans = _label_plans(eta, s, t)
        masses = plans.sum(axis=(1, 2))
        top = -math.inf
        for a in np.flatnonzero(masses > 0):
            lam = plans[a] / masses[a]
            mu1, mu2 = lam.sum(axis=1), lam.sum(axis=0)
            if np.count_nonzero(mu1) == 1 or np.count_nonzero(mu2) == 1:
                gap = 0.0
            else:
                support = lam > 0
                if not np.all(np.isfinite(C[support])):
                    gap = math.inf
                else:
                    cost = float(np.sum(lam[support] * C[support]))
                    try:
                        gap = cost - ot_value(C, mu1, mu2).value
                    except InfeasibleError:
                        gap = math.inf
            top = max(top, gap)
            if gap > worst:
                worst, where = gap, (int(a), s, t)
        per_interval[(s, t)] = float(top)
    return ConditionReport(float(worst), bool(worst <= tol), tol, where, per_interval)


def psi_functional(grid, q, eta_plan, gamma_plan, cap=DEFAULT_CAP):
    """Label-averaged transport value for the full-interval cost plus the integral of q.

    Returns +inf when some label cannot be coupled by admissible paths.
    """
    qf = full_field(grid, q)
    C = dp_cost(grid, qf, 0, grid.K, cap)
    eta_l = eta_plan.per_label()
    gam_l = gamma_plan.per_label()
    masses = np.asarray(eta_plan.matrix).sum(axis=1)
    total = 0.0
    for a in np.flatnonzero(masses > 0):
        try:
            total += masses[a] * ot_value(C, eta_l[a], gam_l[a]).value
        except InfeasibleError:
            return math.inf
    return total + float(qf[1:-1].sum() * grid.dt * grid.cell_mass)


def _endpoint_label_plans(eta, which):
    g = eta.grid
    N = g.num_cells
    m = np.zeros((N, N))
    np.add.at(m, (eta.labels, eta.nodes[:, which]), eta.weights)
    return m


def certify(eta, q, tol=DEFAULT_TOL, intervals=None, cap=DEFAULT_CAP, incompressible_tol=1e-8,
            eta_plan=None, gamma_plan=None):
    """Run both conditions and the action identity.

    ``identity_residual`` is A(eta) minus the dual functional at q; it
    vanishes for a certified flow and equals the action excess over the
    optimum when q is an optimal pressure.
    """
    g = eta.grid
    res = incompressibility_residual(eta)
    if res > incompressible_tol:
        raise InputError(f"flow is not incompressible (residual {res:.3e})")
    start = _endpoint_label_plans(eta, 0)
    end = _endpoint_label_plans(eta, -1)
    for name, given, own in (("initial", eta_plan, start), ("final", gamma_plan, end)):
        if given is not None:
            diff = np.abs(np.asarray(given.matrix) - own)
            if diff.max() > incompressible_tol:
                a = int(np.unravel_index(int(np.argmax(diff)), diff.shape)[0])
                raise InputError(f"{name} plan of the flow differs at label {a}", index=a)
    qf = full_field(g, q)
    costs = all_interval_costs(g, qf, cap)
    first = check_first_condition(eta, qf, tol, cap, costs)
    second = check_second_condition(eta, qf, intervals, tol, cap, costs)
    psi = psi_functional(g, qf, TransportPlan(g, start, check=False),
                         TransportPlan(g, end, check=False), cap)
    residual = action_of_measure(eta) - psi
    verdict = first.gap <= tol and second.gap <= tol
    worst_path = first.worst[0] if first.worst else -1
    return CertificateReport(first.gap, second.gap, bool(verdict), tol, float(residual),
                             worst_path, second.interval_gaps)
