"""Optimal generalized flows between two plans, with the dual pressure.

The exact backend solves the linear program in per-label edge-flow form:
one variable per (step, label, admissible move).  It has the same optimal
value and the same incompressibility multipliers as the program over
enumerated label-anchored paths, since per-label edge flows decompose into
paths with identical cost and marginals.  Among all optimal multipliers the
pressure of least Euclidean norm is returned, which makes it unique.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp
import scipy.sparse as sp

from .core import (
    MASS_TOL,
    DomainGrid,
    InfeasibleError,
    InputError,
    PathMeasure,
    SolverError,
    TransportPlan,
    action_of_measure,
    constant_flow,
    density_of,
    peel_paths,
)

DEFAULT_CAP = 2
DEFAULT_PATH_BUDGET = 10 ** 7


@dataclass(frozen=True, eq=False)
class PressureField:
    """Pressure on the interior time nodes k = 1..K-1, mean-zero per slice."""

    grid: DomainGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(self.grid.K - 1, self.grid.num_cells)
        if not np.all(np.isfinite(v)):
            raise InputError("pressure must be finite")
        if v.size and np.max(np.abs(v.mean(axis=1))) > 1e-10:
            raise InputError("pressure slices must have zero mean")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_raw(cls, grid, values):
        v = np.array(values, dtype=float).reshape(grid.K - 1, grid.num_cells)
        if v.size:
            v = v - v.mean(axis=1, keepdims=True)
        return cls(grid, v)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((grid.K - 1, grid.num_cells)))

    def full(self):
        """Values on all K+1 nodes, with zero rows on the two endpoints."""
        out = np.zeros((self.grid.K + 1, self.grid.num_cells))
        out[1:-1] = self.values
        return out


def full_field(grid, q):
    """Accept a PressureField, an interior (K-1, N) array or a full (K+1, N) array."""
    if isinstance(q, PressureField):
        return q.full()
    q = np.asarray(q, dtype=float)
    N = grid.num_cells
    if q.shape == (grid.K + 1, N):
        out = q.copy()
        out[0] = 0.0
        out[-1] = 0.0
        return out
    if q.size == (grid.K - 1) * N:
        out = np.zeros((grid.K + 1, N))
        out[1:-1] = q.reshape(grid.K - 1, N)
        return out
    raise InputError(f"field has shape {q.shape}, expected ({grid.K - 1}, {N})")


def pairing(grid, q, rho):
    """Space-time pairing sum_k dt * mean_x q(k,x) f(k,x) over interior nodes."""
    qf = full_field(grid, q)
    return float(np.sum(qf[1:-1] * np.asarray(rho)[1:-1]) * grid.dt * grid.cell_mass)


@dataclass(frozen=True, eq=False)
class GeodesicProblem:
    grid: DomainGrid
    eta: TransportPlan
    gamma: TransportPlan
    backend: str = "exact"
    epsilon: float = 1e-2
    tol: float = 1e-9
    max_iter: int = 200000
    cap: int = DEFAULT_CAP
    selection: str = "vertex"

    def __post_init__(self):
        if self.eta.grid != self.grid or self.gamma.grid != self.grid:
            raise InputError("plans live on a different grid")
        self.eta.validate()
        self.gamma.validate()
        if self.backend not in ("exact", "entropic"):
            raise InputError(f"unknown backend {self.backend!r}")
        if self.backend == "entropic" and not self.epsilon > 0:
            raise InputError("entropic backend needs epsilon > 0")
        if self.cap < 0:
            raise InputError("velocity cap must be nonnegative")
        if self.selection not in ("vertex", "central"):
            raise InputError(f"unknown optimum selection {self.selection!r}")


@dataclass(frozen=True, eq=False)
class GeodesicSolution:
    flow: PathMeasure
    value: float
    pressure: PressureField
    diagnostics: dict = field(default_factory=dict)


def count_paths(grid, cap):
    adj = grid.adjacency(cap).astype(object)
    counts = np.ones(grid.num_cells, dtype=object)
    for _ in range(grid.K):
        counts = adj.dot(counts)
    return int(sum(counts))


def enumerate_paths(grid, cap=DEFAULT_CAP, budget=DEFAULT_PATH_BUDGET):
    """All node sequences with steps inside the cap, in lexicographic order."""
    total = count_paths(grid, cap)
    if total > budget:
        raise SolverError(f"{total} paths exceed the budget of {budget}; "
                          "use the entropic backend or a smaller grid")
    succ = grid.successors(cap)
    paths = np.arange(grid.num_cells, dtype=np.int64)[:, None]
    for _ in range(grid.K):
        nxt = succ[paths[:, -1]]
        rep = np.repeat(paths, nxt.shape[1], axis=0)
        col = nxt.reshape(-1)
        keep = col >= 0
        paths = np.column_stack([rep[keep], col[keep]])
    return paths


def _usable_nodes(grid, cap, eta, gamma):
    """Per-label boolean masks (K+1, L, N) of nodes on some admissible route."""
    adj = grid.adjacency(cap).astype(float)
    K, N = grid.K, grid.num_cells
    fwd = np.zeros((K + 1, N, N), dtype=bool)
    bwd = np.zeros((K + 1, N, N), dtype=bool)
    fwd[0] = eta > 0
    bwd[K] = gamma > 0
    for k in range(K):
        fwd[k + 1] = (fwd[k].astype(float) @ adj) > 0
        bwd[K - 1 - k] = (bwd[K - k].astype(float) @ adj.T) > 0
    return fwd & bwd


class _EdgeLP:
    """Equality-form LP over per-label edge flows."""

    def __init__(self, grid, eta, gamma, cap):
        self.grid = grid
        K, N = grid.K, grid.num_cells
        usable = _usable_nodes(grid, cap, eta, gamma)
        if np.any((eta > 0) & ~usable[0]) or np.any((gamma > 0) & ~usable[K]):
            raise InfeasibleError("some endpoint mass cannot be connected within the cap")
        adj = grid.adjacency(cap)
        cols = []
        for k in range(K):
            a, x, y = np.nonzero(usable[k][:, :, None] & usable[k + 1][:, None, :] & adj[None])
            cols.append(np.column_stack([np.full(a.size, k), a, x, y]))
        var = np.concatenate(cols)
        self.var = var
        self.cost = grid.sq_dist[var[:, 2], var[:, 3]] / (2.0 * grid.dt)

        rows, entries, rhs, kinds = [], [], [], []
        row_of = {}

        def row(key, b):
            if key not in row_of:
                row_of[key] = len(rhs)
                rhs.append(b)
                kinds.append(key)
            return row_of[key]

        mass = grid.cell_mass
        for j, (k, a, x, y) in enumerate(var):
            if k == 0:
                rows.append(row(("start", a, x), eta[a, x]))
                entries.append((j, 1.0))
            else:
                rows.append(row(("inc", k, x), mass))
                entries.append((j, 1.0))
                rows.append(row(("cont", k, a, x), 0.0))
                entries.append((j, -1.0))
            if k == K - 1:
                rows.append(row(("end", a, y), gamma[a, y]))
                entries.append((j, 1.0))
            else:
                rows.append(row(("cont", k + 1, a, y), 0.0))
                entries.append((j, 1.0))
        col_idx = np.array([e[0] for e in entries])
        vals = np.array([e[1] for e in entries])
        self.A = sp.csr_matrix((vals, (np.array(rows), col_idx)),
                               shape=(len(rhs), var.shape[0]))
        self.b = np.array(rhs, dtype=float)
        self.kinds = kinds
        self.inc_rows = np.array([i for i, key in enumerate(kinds) if key[0] == "inc"],
                                 dtype=np.int64)
        self.inc_keys = [(kinds[i][1], kinds[i][2]) for i in self.inc_rows]

    def solve(self):
        res = linprog(self.cost, A_eq=self.A, b_eq=self.b, bounds=(0, None), method="highs",
                      options={"primal_feasibility_tolerance": 1e-10,
                               "dual_feasibility_tolerance": 1e-10})
        if res.status == 2:
            raise InfeasibleError("no incompressible flow connects the two plans")
        if res.status != 0:
            raise SolverError(f"LP backend failed: {res.message}")
        x = np.where(res.x > 1e-14, res.x, 0.0)
        return x, np.asarray(res.eqlin.marginals)

    def pressure_of(self, y):
        g = self.grid
        p = np.zeros((g.K - 1, g.num_cells))
        for r, (k, x) in zip(self.inc_rows, self.inc_keys):
            p[k - 1, x] = y[r] / g.dt
        return p

    def min_norm_duals(self, x, y0):
        """Least-norm incompressibility multipliers on the optimal dual face."""
        support = x > 0
        y = _face_qp(self, support)
        if y is None:
            return y0
        y = _polish(self, support, y)
        return y

    def reduced_costs(self, y):
        return self.cost - self.A.T @ y

    def central_flow(self, x, y):
        """Least-squares point of the optimal face (spreads mass over tied routes)."""
        import cvxpy as cp

        tight = np.flatnonzero((self.reduced_costs(y) <= 1e-9) | (x > 0))
        A = self.A[:, tight]
        xv = cp.Variable(tight.size)
        prob = cp.Problem(cp.Minimize(cp.sum_squares(xv)), [A @ xv == self.b, xv >= 0])
        try:
            _quiet_solve(prob)
        except Exception:
            return x
        if xv.value is None:
            return x
        z = np.asarray(xv.value)
        # polish: minimum-norm solution of the equalities on the detected support
        support = z > 1e-9 * max(1.0, z.max())
        from scipy.linalg import lstsq

        As = A[:, support].toarray()
        zs = lstsq(As, self.b)[0]
        if zs.min() < 0 or np.max(np.abs(As @ zs - self.b)) > 1e-12:
            zs = np.maximum(z[support], 0.0)
        out = np.zeros_like(x)
        out[tight[support]] = zs
        return out


def _quiet_solve(prob):
    # tight tolerances often end as "inaccurate"; callers polish and verify the result
    import cvxpy as cp

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12,
                   tol_feas=1e-12, max_iter=500)


def _face_qp(lp, support):
    import cvxpy as cp

    m = lp.A.shape[0]
    yv = cp.Variable(m)
    red = lp.cost - lp.A.T @ yv
    cons = []
    if np.any(~support):
        cons.append(red[np.flatnonzero(~support)] >= 0)
    if np.any(support):
        cons.append(red[np.flatnonzero(support)] == 0)
    objective = cp.Minimize(cp.sum_squares(yv[lp.inc_rows])) if lp.inc_rows.size else \
        cp.Minimize(0)
    prob = cp.Problem(objective, cons)
    try:
        _quiet_solve(prob)
    except Exception:
        return None
    if yv.value is None:
        return None
    return np.asarray(yv.value)


def _polish(lp, support, y):
    """Re-solve the least-norm problem with the detected active set as equalities."""
    from scipy.linalg import lstsq, null_space

    red = lp.reduced_costs(y)
    active = support | (red <= 1e-7)
    E = lp.A[:, active].T.toarray()
    f = lp.cost[active]
    y0 = lstsq(E, f)[0]
    Z = null_space(E)
    sel = lp.inc_rows
    if Z.shape[1] and sel.size:
        w = lstsq(Z[sel], -y0[sel])[0]
        cand = y0 + Z @ w
    else:
        cand = y0
    red_c = lp.reduced_costs(cand)
    if np.max(np.abs(E @ cand - f)) > 1e-10 or red_c.min() < -1e-10:
        return y
    return cand


def _trivial(problem):
    return np.array_equal(problem.eta.matrix, problem.gamma.matrix)


def _trivial_solution(problem, backend):
    g = problem.grid
    return GeodesicSolution(constant_flow(problem.eta), 0.0, PressureField.zeros(g),
                            {"backend": backend, "iterations": 0, "gap": 0.0,
                             "dual_value": 0.0, "marginal_error": 0.0, "degenerate": True})


def solve_exact(problem):
    g = problem.grid
    if _trivial(problem):
        return _trivial_solution(problem, "exact")
    eta, gamma = problem.eta.matrix, problem.gamma.matrix
    lp = _EdgeLP(g, eta, gamma, problem.cap)
    x, y_raw = lp.solve()
    y = lp.min_norm_duals(x, y_raw)
    if problem.selection == "central":
        x = lp.central_flow(x, y)
    value = float(lp.cost @ x)
    dual_value = float(lp.b @ y)
    var = lp.var
    live = x > 0
    flow = peel_paths(g, var[live, 0], var[live, 1], var[live, 2], var[live, 3], x[live],
                      label_mass=eta.sum(axis=1))
    pressure = PressureField.from_raw(g, lp.pressure_of(y))
    red = lp.reduced_costs(y)
    diag = {
        "backend": "exact",
        "iterations": 1,
        "gap": value - dual_value,
        "dual_value": dual_value,
        "marginal_error": float(np.max(np.abs(lp.A @ x - lp.b))),
        "min_reduced_cost": float(red.min()),
        "max_slackness": float(np.max(np.abs(red[live]))) if live.any() else 0.0,
        "degenerate": False,
    }
    return GeodesicSolution(flow, value, pressure, diag)


class _Entropic:
    """Log-domain scaling iterations on the per-label layered graph."""

    def __init__(self, grid, eta, gamma, cap):
        self.grid = grid
        N = grid.num_cells
        adj = grid.adjacency(cap)
        self.cost = np.where(adj, grid.sq_dist / (2.0 * grid.dt), np.inf)
        with np.errstate(divide="ignore"):
            self.log_eta = np.log(eta)
            self.log_gamma = np.log(gamma)
        self.eta, self.gamma = eta, gamma
        self.target = np.log(grid.cell_mass)
        # potentials in absolute units: start (L,N), interior (K-1,N), end (L,N)
        self.alpha = np.zeros((N, N))
        self.pi = np.zeros((grid.K - 1, N))
        self.beta = np.zeros((N, N))

    def _node_logs(self, eps):
        K = self.grid.K
        u = [None] * (K + 1)
        u[0] = np.where(self.eta > 0, self.alpha / eps, -np.inf)
        for k in range(1, K):
            u[k] = np.broadcast_to(self.pi[k - 1] / eps, self.alpha.shape)
        u[K] = np.where(self.gamma > 0, self.beta / eps, -np.inf)
        return u

    @staticmethod
    def _step(f, logG):
        # f: (L, N) over source nodes -> (L, N) over targets
        return logsumexp(f[:, :, None] + logG[None, :, :], axis=1)

    def _backward(self, u, logG):
        K = self.grid.K
        B = [None] * (K + 1)
        B[K] = np.zeros_like(u[K])
        for k in range(K - 1, -1, -1):
            B[k] = self._step(u[k + 1] + B[k + 1], logG.T)
        return B

    def sweep(self, eps):
        g = self.grid
        K = g.K
        logG = -self.cost / eps
        u = self._node_logs(eps)
        B = self._backward(u, logG)
        with np.errstate(invalid="ignore"):
            self.alpha = np.where(self.eta > 0, eps * (self.log_eta - B[0]), 0.0)
        u[0] = np.where(self.eta > 0, self.alpha / eps, -np.inf)
        F = u[0]
        for k in range(1, K):
            F = self._step(F, logG)
            marg = logsumexp(F + B[k], axis=0)
            if not np.all(np.isfinite(marg)):
                raise InfeasibleError("some cell cannot be reached at an interior time")
            self.pi[k - 1] = eps * (self.target - marg)
            F = F + self.pi[k - 1][None, :] / eps
        F = self._step(F, logG)
        with np.errstate(invalid="ignore"):
            self.beta = np.where(self.gamma > 0, eps * (self.log_gamma - F), 0.0)

    def marginals(self, eps):
        """Forward/backward log messages and the residual of every constraint."""
        K = self.grid.K
        logG = -self.cost / eps
        u = self._node_logs(eps)
        B = self._backward(u, logG)
        F = [None] * (K + 1)
        F[0] = u[0]
        for k in range(1, K + 1):
            F[k] = u[k] + self._step(F[k - 1], logG)
        err = np.max(np.abs(np.exp(F[0] + B[0]) - self.eta))
        err = max(err, np.max(np.abs(np.exp(F[K] + B[K]) - self.gamma)))
        for k in range(1, K):
            err = max(err, np.max(np.abs(np.exp(logsumexp(F[k] + B[k], axis=0))
                                         - self.grid.cell_mass)))
        return F, B, u, logG, float(err)

    def edge_masses(self, eps):
        F, B, u, logG, _ = self.marginals(eps)
        K = self.grid.K
        out = []
        for k in range(K):
            lm = F[k][:, :, None] + logG[None] + (u[k + 1] + B[k + 1])[:, None, :]
            out.append(np.exp(lm))
        return out


def solve_entropic(problem, schedule_factor=4.0):
    g = problem.grid
    if _trivial(problem):
        return _trivial_solution(problem, "entropic")
    eta, gamma = problem.eta.matrix, problem.gamma.matrix
    usable = _usable_nodes(g, problem.cap, eta, gamma)
    if np.any((eta > 0) & ~usable[0]) or np.any((gamma > 0) & ~usable[g.K]):
        raise InfeasibleError("some endpoint mass cannot be connected within the cap")
    solver = _Entropic(g, eta, gamma, problem.cap)
    eps_target = float(problem.epsilon)
    scales = [eps_target]
    while scales[-1] * schedule_factor < 1.0:
        scales.append(scales[-1] * schedule_factor)
    scales = scales[::-1]
    iterations = 0
    err = np.inf
    for eps in scales:
        final = eps == eps_target
        stop = problem.tol if final else max(problem.tol, 1e-6)
        while iterations < problem.max_iter:
            solver.sweep(eps)
            iterations += 1
            if iterations % 10 == 0 or final:
                err = solver.marginals(eps)[-1]
                if err <= stop:
                    break
    if err > problem.tol:
        raise SolverError(f"entropic iterations did not converge: marginal error {err:.3e} "
                          f"after {iterations} sweeps")
    masses = solver.edge_masses(eps_target)
    steps, labels, srcs, dsts, vals = [], [], [], [], []
    value = 0.0
    for k, m in enumerate(masses):
        value += float(np.sum(np.where(m > 0, m * np.where(np.isfinite(solver.cost), solver.cost,
                                                              0.0)[None], 0.0)))
        a, x, y = np.nonzero(m > 0)
        steps.append(np.full(a.size, k))
        labels.append(a)
        srcs.append(x)
        dsts.append(y)
        vals.append(m[a, x, y])
    flow = peel_paths(g, np.concatenate(steps), np.concatenate(labels), np.concatenate(srcs),
                      np.concatenate(dsts), np.concatenate(vals), label_mass=eta.sum(axis=1))
    pressure = PressureField.from_raw(g, solver.pi / g.dt)
    diag = {"backend": "entropic", "iterations": iterations, "epsilon": eps_target,
            "marginal_error": err, "gap": float("nan"), "degenerate": False,
            "flow_action": action_of_measure(flow)}
    return GeodesicSolution(flow, value, pressure, diag)


def solve(problem):
    if problem.backend == "exact":
        return solve_exact(problem)
    return solve_entropic(problem)


def endpoint_marginals(flow):
    """Per-label start and end distributions (absolute masses), each (N, N)."""
    g = flow.grid
    N = g.num_cells
    start = np.zeros((N, N))
    end = np.zeros((N, N))
    np.add.at(start, (flow.labels, flow.nodes[:, 0]), flow.weights)
    np.add.at(end, (flow.labels, flow.nodes[:, -1]), flow.weights)
    return start, end


def dual_gap(eta_star, p, nu, tol=1e-9):
    """A(nu) - A(eta*) - <p, rho^nu - 1>; nonnegative when eta* is optimal."""
    if nu.grid != eta_star.grid:
        raise InputError("flows live on different grids")
    s1, e1 = endpoint_marginals(eta_star)
    s2, e2 = endpoint_marginals(nu)
    if max(np.max(np.abs(s1 - s2)), np.max(np.abs(e1 - e2))) > tol:
        raise InputError("competitor does not share the endpoint plans")
    g = eta_star.grid
    rho = density_of_unchecked(nu)
    return action_of_measure(nu) - action_of_measure(eta_star) - pairing(g, p, rho - 1.0)


def density_of_unchecked(eta):
    g = eta.grid
    out = np.zeros((g.K + 1, g.num_cells))
    for k in range(g.K + 1):
        out[k] = np.bincount(eta.nodes[:, k], weights=eta.weights, minlength=g.num_cells)
    return out * g.num_cells


__all__ = [
    "DEFAULT_CAP", "GeodesicProblem", "GeodesicSolution", "PressureField", "count_paths",
    "dual_gap", "endpoint_marginals", "enumerate_paths", "full_field", "pairing", "solve",
    "solve_entropic", "solve_exact", "MASS_TOL", "density_of",
]
