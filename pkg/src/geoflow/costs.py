"""Connection costs with a running potential, transport values and pressure smoothing.

The Lagrangian of a discrete path between nodes s < t is

    sum_{k=s}^{t-1} |step_k|^2 / (2 dt) - q(k+1, w_{k+1}) dt

so the potential is sampled at the arrival node of every step.  Fields q
are full (K+1, N) arrays whose two endpoint rows are ignored (treated as
zero); interior-only (K-1, N) arrays are accepted as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .core import DomainGrid, InfeasibleError, InputError, SolverError
from .solver import DEFAULT_CAP, PressureField, full_field

PATH_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Minimal connection costs between nodes s and t.

    ``values`` holds the finite entries; where ``finite`` is False no
    admissible path exists and the cost is +inf (the stored value is 0).
    """

    grid: DomainGrid
    s: int
    t: int
    values: np.ndarray
    finite: np.ndarray
    togo: tuple = field(default=(), repr=False)
    steps: tuple = field(default=(), repr=False)

    def dense(self):
        """Costs with IEEE infinities in the inadmissible entries."""
        return np.where(self.finite, self.values, np.inf)

    def argmin_path(self, x, y):
        """Lexicographically smallest optimal node sequence from x (node s) to y (node t)."""
        if not self.finite[x, y]:
            raise InputError(f"no admissible path from {x} to {y}")
        path = [int(x)]
        for j, S in enumerate(self.steps):
            here = path[-1]
            target = self.togo[j][here, y]
            rest = self.togo[j + 1][:, y]
            total = S[here] + rest
            scale = max(1.0, abs(target))
            ok = np.flatnonzero(np.abs(total - target) <= PATH_TOL * scale)
            path.append(int(ok[0]))
        return np.asarray(path)


def step_matrix(grid, qf, k, cap):
    """Cost of one step k -> k+1: kinetic part minus arrival potential."""
    S = grid.sq_dist / (2.0 * grid.dt) - qf[k + 1][None, :] * grid.dt
    return np.where(grid.adjacency(cap), S, np.inf)


def min_plus(A, B):
    """(A (x) B)(x, z) = min_y A(x, y) + B(y, z)."""
    out = np.full((A.shape[0], B.shape[1]), np.inf)
    for y in range(A.shape[1]):
        col = A[:, y]
        if not np.any(np.isfinite(col)):
            continue
        np.minimum(out, col[:, None] + B[y][None, :], out=out)
    return out


def _check_interval(grid, s, t):
    if not (0 <= s < t <= grid.K):
        raise InputError(f"need 0 <= s < t <= {grid.K}, got s={s}, t={t}")


def dp_cost(grid, q, s=0, t=None, cap=DEFAULT_CAP):
    """Backward value iteration for the connection cost on [s, t]."""
    t = grid.K if t is None else t
    _check_interval(grid, s, t)
    qf = full_field(grid, q)
    steps = [step_matrix(grid, qf, k, cap) for k in range(s, t)]
    N = grid.num_cells
    togo = [None] * (t - s + 1)
    togo[-1] = np.where(np.eye(N, dtype=bool), 0.0, np.inf)
    for j in range(t - s - 1, -1, -1):
        togo[j] = min_plus(steps[j], togo[j + 1])
    C = togo[0]
    finite = np.isfinite(C)
    return CostMatrix(grid, s, t, np.where(finite, C, 0.0), finite, tuple(togo), tuple(steps))


def all_interval_costs(grid, q, cap=DEFAULT_CAP):
    """Dense cost matrices (with infinities) for every node pair s < t."""
    qf = full_field(grid, q)
    steps = [step_matrix(grid, qf, k, cap) for k in range(grid.K)]
    out = {}
    for s in range(grid.K):
        C = steps[s]
        out[(s, s + 1)] = C
        for t in range(s + 2, grid.K + 1):
            C = min_plus(C, steps[t - 1])
            out[(s, t)] = C
    return out


def path_lagrangian(grid, nodes, q, s=0, t=None):
    """Lagrangian cost of a node sequence restricted to [s, t]."""
    nodes = np.asarray(nodes, dtype=np.int64)
    t = nodes.size - 1 if t is None else t
    _check_interval(grid, s, t)
    qf = full_field(grid, q)
    seg = nodes[s: t + 1]
    kin = grid.sq_dist[seg[:-1], seg[1:]].sum() / (2.0 * grid.dt)
    run = qf[np.arange(s + 1, t + 1), seg[1:]].sum() * grid.dt
    return float(kin - run)


@dataclass(frozen=True)
class MinimalityReport:
    verdict: bool
    gap: float
    interval: tuple


def is_q_minimizing(grid, nodes, q, s=0, t=None, tol=1e-9, local=False, cap=DEFAULT_CAP,
                    costs=None):
    """Compare a path's Lagrangian with the minimal connection cost.

    With ``local`` every node subinterval of [s, t] is tested and the worst
    gap is reported.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    t = grid.K if t is None else t
    _check_interval(grid, s, t)
    if costs is None:
        costs = all_interval_costs(grid, q, cap)
    pairs = [(a, b) for a in range(s, t) for b in range(a + 1, t + 1)] if local else [(s, t)]
    worst, where = -np.inf, (s, t)
    for a, b in pairs:
        c = costs[(a, b)][nodes[a], nodes[b]]
        gap = path_lagrangian(grid, nodes, q, a, b) - c
        if gap > worst:
            worst, where = gap, (a, b)
    return MinimalityReport(bool(worst <= tol), float(worst), where)


@dataclass(frozen=True, eq=False)
class OTResult:
    value: float
    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def dual(self, mu1, mu2):
        return float(np.dot(self.u, mu1) + np.dot(self.v, mu2))


def ot_value(cost, mu1, mu2, tol=1e-12):
    """Exact discrete optimal transport by linear programming.

    ``cost`` is a CostMatrix or an array where +inf marks forbidden pairs.
    Returns the value, an optimal plan and dual potentials (u, v) with
    u(x) + v(y) <= c(x, y) on admissible pairs.
    """
    if isinstance(cost, CostMatrix):
        C, finite = cost.values, cost.finite
    else:
        C = np.asarray(cost, dtype=float)
        finite = np.isfinite(C)
        C = np.where(finite, C, 0.0)
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    if abs(mu1.sum() - mu2.sum()) > 1e-9 * max(1.0, mu1.sum()):
        raise InputError("marginals carry different masses")
    I = np.flatnonzero(mu1 > tol)
    J = np.flatnonzero(mu2 > tol)
    if I.size == 1 or J.size == 1:
        ii, jj = np.meshgrid(I, J, indexing="ij")
        if not np.all(finite[ii, jj]):
            raise InfeasibleError("no admissible coupling of the marginals")
        plan = np.zeros(C.shape)
        plan[ii, jj] = np.outer(mu1[I], mu2[J]) / mu1[I].sum()
        value = float(np.sum(plan * C))
        return _ot_duals(C, finite, plan, value, mu1, mu2, I, J)
    sub = finite[np.ix_(I, J)]
    ri, cj = np.nonzero(sub)
    nv = ri.size
    rows = np.concatenate([ri, I.size + cj])
    cols = np.concatenate([np.arange(nv), np.arange(nv)])
    import scipy.sparse as sp
    A = sp.csr_matrix((np.ones(2 * nv), (rows, cols)), shape=(I.size + J.size, nv))
    b = np.concatenate([mu1[I], mu2[J]])
    c = C[I[ri], J[cj]]
    res = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status == 2:
        raise InfeasibleError("no admissible coupling of the marginals")
    if res.status != 0:
        raise SolverError(f"transport LP failed: {res.message}")
    plan = np.zeros(C.shape)
    plan[I[ri], J[cj]] = np.maximum(res.x, 0.0)
    y = res.eqlin.marginals
    u = np.zeros(C.shape[0])
    v = np.zeros(C.shape[1])
    u[I] = y[: I.size]
    v[J] = y[I.size:]
    return OTResult(float(c @ res.x), plan, u, v)


def _ot_duals(C, finite, plan, value, mu1, mu2, I, J):
    # one-point marginal: any split of the cost into potentials works
    u = np.zeros(C.shape[0])
    v = np.zeros(C.shape[1])
    if I.size == 1:
        v[J] = C[I[0], J]
    else:
        u[I] = C[I, J[0]]
    return OTResult(value, plan, u, v)


def two_leg_nodes(grid, w, z, steps):
    """Nodes w + floor(j * D / steps), j = 1..steps, of a straight leg in cells."""
    cw = grid.coords(np.asarray([w]))[0]
    D = grid.step_cells[w, z]
    j = np.arange(1, steps + 1)[:, None]
    pts = cw[None, :] + np.floor_divide(j * D[None, :], steps)
    if grid.periodic:
        pts = np.mod(pts, grid.n)
    return grid.index(pts)


def k_bound(grid, q, s=0, t=None, cap=DEFAULT_CAP, Mq=None):
    """Per-cell function K with c(x, y) <= K(x) + K(y) on [s, t].

    The bound averages two-leg paths x -> z -> y over the midpoint z.  Its
    kinetic part is the larger of d / (4 l) (l half the time span) and the
    worst kinetic energy of a single discrete leg; the running part is the
    leg-averaged maximal function of q.
    """
    t = grid.K if t is None else t
    _check_interval(grid, s, t)
    m = t - s
    if m < 2:
        raise InputError("the bound needs an interval of at least two steps")
    m1 = m // 2
    m2 = m - m1
    if Mq is None:
        Mq = maximal_function(grid, full_field(grid, q))
    Mq = np.asarray(Mq, dtype=float)
    if Mq.shape == (grid.K - 1, grid.num_cells):
        Mq = full_field(grid, Mq)
    N = grid.num_cells
    steps = np.max(np.abs(grid.step_cells), axis=-1)
    worst = int(steps.max())
    if -(-worst // m1) > cap or -(-worst // m2) > cap:
        raise InputError("legs of the two-leg bound violate the velocity cap")
    l_time = m * grid.dt / 2.0
    kin_max = 0.0
    run1 = np.zeros(N)
    run2 = np.zeros(N)
    for w in range(N):
        for z in range(N):
            n1 = np.concatenate([[w], two_leg_nodes(grid, w, z, m1)])
            n2 = np.concatenate([[z], two_leg_nodes(grid, z, w, m2)])
            k1 = grid.sq_dist[n1[:-1], n1[1:]].sum() / (2.0 * grid.dt)
            k2 = grid.sq_dist[n2[:-1], n2[1:]].sum() / (2.0 * grid.dt)
            kin_max = max(kin_max, k1, k2)
            run1[w] += Mq[np.arange(s + 1, s + m1 + 1), n1[1:]].sum() * grid.dt
            run2[w] += Mq[np.arange(s + m1 + 1, t + 1), n2[1:]].sum() * grid.dt
    kinetic = max(grid.d / (4.0 * l_time), kin_max)
    return kinetic + (run1 + run2) / N


def _heat_multiplier(grid, heat_time):
    n = grid.n
    if grid.periodic:
        lam = 1.0 - np.cos(2.0 * np.pi * np.arange(n) / n)
    else:
        lam = 1.0 - np.cos(np.pi * np.arange(n) / n)
    total = np.zeros((n,) * grid.d)
    for ax in range(grid.d):
        shape = [1] * grid.d
        shape[ax] = n
        total = total + lam.reshape(shape)
    return np.exp(-heat_time * n * n * total)


def _apply_heat(grid, field2d, heat_time):
    from scipy import fft

    shape = (field2d.shape[0],) + (grid.n,) * grid.d
    f = field2d.reshape(shape)
    mult = _heat_multiplier(grid, heat_time)
    axes = tuple(range(1, grid.d + 1))
    if grid.periodic:
        out = fft.ifftn(fft.fftn(f, axes=axes) * mult[None], axes=axes).real
    else:
        out = fft.idctn(fft.dctn(f, type=2, axes=axes, norm="ortho") * mult[None],
                        type=2, axes=axes, norm="ortho")
    return out.reshape(field2d.shape)


def smooth_pressure(grid, p, heat_time):
    """Heat-semigroup smoothing of every time slice.

    ``heat_time`` is the variance of the Gaussian, so smoothing by a then
    by b equals smoothing by a + b.  The discrete kernel is the heat
    kernel of the lattice Laplacian (periodic on the torus, reflecting on
    the cube): positive and mass preserving.
    """
    if heat_time < 0:
        raise InputError("smoothing time must be nonnegative")
    values = p.values if isinstance(p, PressureField) else np.asarray(p, dtype=float)
    flat = values.reshape(-1, grid.num_cells)
    if heat_time == 0:
        return flat.copy().reshape(values.shape)
    return _apply_heat(grid, flat, heat_time).reshape(values.shape)


def dyadic_schedule(grid, J=None):
    """Heat times 2^-j for j = 0..J (default J = 2 ceil(log2 n) + 2)."""
    if J is None:
        J = 2 * math.ceil(math.log2(grid.n)) + 2
    return 2.0 ** -np.arange(J + 1)


def maximal_function(grid, p, schedule=None):
    """max(|p|, sup over the schedule of the smoothed |p|), slice by slice."""
    values = p.values if isinstance(p, PressureField) else np.asarray(p, dtype=float)
    schedule = dyadic_schedule(grid) if schedule is None else schedule
    a = np.abs(values)
    out = a.copy()
    for h in schedule:
        np.maximum(out, smooth_pressure(grid, a, float(h)), out=out)
    return out


def precise_representative(grid, p, schedule=None):
    """Lower limit of p_h as h decreases, approximated on the finest scales.

    The minimum over the finer half of the schedule is returned.
    """
    values = p.values if isinstance(p, PressureField) else np.asarray(p, dtype=float)
    schedule = np.sort(dyadic_schedule(grid) if schedule is None else np.asarray(schedule))
    tail = schedule[: max(1, (schedule.size + 1) // 2)]
    out = np.full(values.shape, np.inf)
    for h in tail:
        np.minimum(out, smooth_pressure(grid, values, float(h)), out=out)
    return out


def w2_lower_bound(grid, eta_plan, gamma_plan):
    """Label-averaged quadratic transport value between per-label endpoint measures."""
    eta_l = eta_plan.per_label()
    gam_l = gamma_plan.per_label()
    masses = eta_plan.matrix.sum(axis=1)
    C = 0.5 * grid.sq_dist
    total = 0.0
    for a in range(grid.num_cells):
        if masses[a] <= 0:
            continue
        total += masses[a] * ot_value(C, eta_l[a], gam_l[a]).value
    return total


def w2_endpoint(grid, plan):
    """Quadratic transport value with cost half the squared distance between
    the two marginals of an absolute-mass coupling."""
    m = np.asarray(plan.matrix if hasattr(plan, "matrix") else plan)
    return ot_value(0.5 * grid.sq_dist, m.sum(axis=1), m.sum(axis=0)).value
