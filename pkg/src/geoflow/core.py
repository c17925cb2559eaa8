"""Grids, labelled path measures, plans and the elementary flow operations.

Cells are indexed row-major: a cell with per-axis integer coordinates
``(i_0, ..., i_{d-1})`` has flat index ``sum_j i_j * n**(d-1-j)``.  Time is
always the unit interval split into ``K`` equal steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MASS_TOL = 1e-12
GEOMETRIES = ("torus", "cube")


class GeoflowError(Exception):
    """Base class for all package errors."""


class InputError(GeoflowError, ValueError):
    """Malformed input: bad indices, non-uniform marginals, wrong shapes."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InfeasibleError(GeoflowError):
    """The optimization problem has no feasible point."""


class SolverError(GeoflowError):
    """A numerical backend failed or did not converge."""


@dataclass(frozen=True)
class DomainGrid:
    d: int
    n: int
    K: int
    geometry: str = "torus"

    def __post_init__(self):
        if self.d not in (1, 2):
            raise InputError(f"dimension must be 1 or 2, got {self.d}")
        if self.n < 2:
            raise InputError(f"need at least 2 cells per axis, got {self.n}")
        if self.K < 1:
            raise InputError(f"need at least one time step, got {self.K}")
        if self.geometry not in GEOMETRIES:
            raise InputError(f"unknown geometry {self.geometry!r}")

    @property
    def num_cells(self):
        return self.n ** self.d

    @property
    def dx(self):
        return 1.0 / self.n

    @property
    def dt(self):
        return 1.0 / self.K

    @property
    def cell_mass(self):
        return 1.0 / self.num_cells

    @property
    def times(self):
        return np.arange(self.K + 1) / self.K

    @property
    def periodic(self):
        return self.geometry == "torus"

    def with_steps(self, K):
        return DomainGrid(self.d, self.n, K, self.geometry)

    def to_dict(self):
        return {"d": self.d, "n": self.n, "K": self.K, "geometry": self.geometry}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(int(data["d"]), int(data["n"]), int(data["K"]),
                       str(data.get("geometry", "torus")))
        except (KeyError, TypeError) as exc:
            raise InputError(f"bad grid description: {exc}") from exc

    def check_cells(self, cells):
        cells = np.asarray(cells)
        if cells.size and (cells.min() < 0 or cells.max() >= self.num_cells):
            bad = int(np.flatnonzero((cells.ravel() < 0) | (cells.ravel() >= self.num_cells))[0])
            raise InputError(f"cell index out of range at position {bad}", index=bad)
        return cells

    def coords(self, cells):
        """Integer per-axis coordinates, shape ``cells.shape + (d,)``."""
        cells = self.check_cells(cells)
        return np.stack(np.unravel_index(cells, (self.n,) * self.d), axis=-1)

    def index(self, coords):
        coords = np.asarray(coords)
        return np.ravel_multi_index(tuple(np.moveaxis(coords, -1, 0)), (self.n,) * self.d)

    def centers(self, cells=None):
        if cells is None:
            cells = np.arange(self.num_cells)
        return (self.coords(cells) + 0.5) / self.n

    @cached_property
    def step_cells(self):
        """Signed per-axis displacement in cells, shape (N, N, d).

        On the torus the minimal representative is used and an exact
        half-turn is counted as positive.
        """
        c = self.coords(np.arange(self.num_cells))
        delta = c[None, :, :] - c[:, None, :]
        if self.periodic:
            delta = np.mod(delta, self.n)
            delta = np.where(delta > self.n // 2, delta - self.n, delta)
        return delta

    @cached_property
    def displacement(self):
        """Signed displacement vectors in length units, shape (N, N, d)."""
        return self.step_cells / self.n

    @cached_property
    def sq_dist(self):
        return np.sum(self.displacement ** 2, axis=-1)

    def distance(self, x, y):
        return float(np.sqrt(self.sq_dist[x, y]))

    def adjacency(self, cap):
        """Boolean (N, N) matrix of one-step moves allowed by a cap in cells."""
        if cap < 0:
            raise InputError("velocity cap must be nonnegative")
        return np.max(np.abs(self.step_cells), axis=-1) <= cap

    def successors(self, cap):
        """Sorted successor lists padded with -1, shape (N, M)."""
        return _padded_lists(self.adjacency(cap))

    def predecessors(self, cap):
        return _padded_lists(self.adjacency(cap).T)


def _padded_lists(adj):
    counts = adj.sum(axis=1)
    out = np.full((adj.shape[0], int(counts.max())), -1, dtype=np.int64)
    for x in range(adj.shape[0]):
        row = np.flatnonzero(adj[x])
        out[x, : row.size] = row
    return out


def torus_distance(grid, x, y):
    """Distance modulo 1 between two cells (componentwise wrap-around)."""
    cx = grid.coords(np.asarray(x)).astype(float) / grid.n
    cy = grid.coords(np.asarray(y)).astype(float) / grid.n
    delta = np.abs(cx - cy)
    delta = np.minimum(delta, 1.0 - delta)
    return float(np.sqrt(np.sum(delta ** 2)))


@dataclass(frozen=True, eq=False)
class PathMeasure:
    """Weighted labelled grid paths; weights are absolute masses summing to 1.

    With ``strict`` set, the label marginal must be uniform (each label
    carries mass ``n**-d``).
    """

    grid: DomainGrid
    labels: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    strict: bool = field(default=True, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        nodes = np.asarray(self.nodes, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if nodes.ndim != 2 or nodes.shape[1] != self.grid.K + 1:
            raise InputError(f"paths must have {self.grid.K + 1} nodes")
        if not (labels.size == nodes.shape[0] == weights.size):
            raise InputError("labels, nodes and weights disagree in length")
        self.grid.check_cells(labels)
        self.grid.check_cells(nodes)
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            bad = int(np.flatnonzero(~(weights >= 0))[0])
            raise InputError(f"negative or non-finite weight at path {bad}", index=bad)
        if abs(weights.sum() - 1.0) > MASS_TOL:
            raise InputError(f"weights sum to {float(weights.sum())!r}, expected 1")
        for name, arr in (("labels", labels), ("nodes", nodes), ("weights", weights)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.strict:
            masses = self.label_masses()
            off = np.abs(masses - self.grid.cell_mass)
            if off.max() > MASS_TOL:
                bad = int(np.argmax(off))
                raise InputError(f"label {bad} carries mass {float(masses[bad])!r}", index=bad)

    @property
    def num_paths(self):
        return self.weights.size

    def label_masses(self):
        return np.bincount(self.labels, weights=self.weights, minlength=self.grid.num_cells)

    def is_incompressible(self, tol=1e-9):
        return incompressibility_residual(self) <= tol

    def is_deterministic(self):
        """True when every label follows a single path."""
        live = self.weights > 0
        return np.unique(self.labels[live]).size == int(live.sum())

    def merged(self):
        """Same measure with duplicate (label, path) rows merged, sorted."""
        key = np.column_stack([self.labels, self.nodes])
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        w = np.bincount(inv.reshape(-1), weights=self.weights, minlength=uniq.shape[0])
        keep = w > 0
        return PathMeasure(self.grid, uniq[keep, 0], uniq[keep, 1:], w[keep], strict=self.strict)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Absolute-mass coupling matrix over cells x cells."""

    grid: DomainGrid
    matrix: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        N = self.grid.num_cells
        if m.shape != (N, N):
            raise InputError(f"plan must be {N}x{N}, got {m.shape}")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            bad = int(np.flatnonzero(~(m >= 0).all(axis=1))[0])
            raise InputError(f"negative or non-finite entry in row {bad}", index=bad)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.check:
            self.validate()

    def validate(self, tol=MASS_TOL):
        mass = self.grid.cell_mass
        rows = self.matrix.sum(axis=1)
        bad = np.flatnonzero(np.abs(rows - mass) > tol)
        if bad.size:
            raise InputError(f"row {bad[0]} sums to {float(rows[bad[0]])!r}, expected {mass!r}",
                             index=int(bad[0]))
        cols = self.matrix.sum(axis=0)
        bad = np.flatnonzero(np.abs(cols - mass) > tol)
        if bad.size:
            raise InputError(f"column {bad[0]} sums to {float(cols[bad[0]])!r}, expected {mass!r}",
                             index=int(bad[0]))
        return self

    def per_label(self):
        """Row a rescaled to a probability: the label-a measure."""
        rows = self.matrix.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(rows > 0, self.matrix / rows, 0.0)
        return out

    def relabel(self, perm):
        """Plan whose label a behaves like label ``perm[a]`` of this one."""
        perm = _check_perm(self.grid, perm)
        return TransportPlan(self.grid, self.matrix[perm], check=self.check)

    @classmethod
    def identity(cls, grid):
        return cls(grid, np.eye(grid.num_cells) * grid.cell_mass)

    @classmethod
    def from_map(cls, grid, perm):
        return plan_of_map(grid, perm)


@dataclass(frozen=True, eq=False)
class DensityField:
    grid: DomainGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.K + 1, self.grid.num_cells):
            raise InputError("density must have one row per time node")
        if np.any(v < 0):
            raise InputError("density must be nonnegative")
        mass = v.sum(axis=1) * self.grid.cell_mass
        if np.max(np.abs(mass - 1.0)) > MASS_TOL:
            raise InputError("density slices must carry unit mass")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def _check_perm(grid, perm):
    perm = np.asarray(perm, dtype=np.int64).reshape(-1)
    N = grid.num_cells
    if perm.size != N:
        raise InputError(f"map must list {N} images, got {perm.size}")
    grid.check_cells(perm)
    counts = np.bincount(perm, minlength=N)
    if np.any(counts != 1):
        bad = int(np.flatnonzero(counts != 1)[0])
        raise InputError(f"map is not a bijection: cell {bad} hit {counts[bad]} times",
                         index=bad)
    return perm


def path_action(grid, nodes):
    """Discrete kinetic action sum_k |step_k|^2 / (2 dt) of one node sequence."""
    nodes = grid.check_cells(np.asarray(nodes, dtype=np.int64))
    return float(grid.sq_dist[nodes[:-1], nodes[1:]].sum() / (2.0 * grid.dt))


def path_actions(eta):
    g = eta.grid
    return g.sq_dist[eta.nodes[:, :-1], eta.nodes[:, 1:]].sum(axis=1) / (2.0 * g.dt)


def action_of_measure(eta):
    return float(eta.weights @ path_actions(eta))


def _slice_mass(eta):
    g = eta.grid
    N = g.num_cells
    out = np.zeros((g.K + 1, N))
    for k in range(g.K + 1):
        out[k] = np.bincount(eta.nodes[:, k], weights=eta.weights, minlength=N)
    return out


def density_of(eta):
    return DensityField(eta.grid, _slice_mass(eta) * eta.grid.num_cells)


def incompressibility_residual(eta):
    rho = _slice_mass(eta) * eta.grid.num_cells
    return float(np.max(np.abs(rho - 1.0)))


def endpoint_plan(eta, s, t, per_label=False):
    """Joint law of the positions at nodes s < t.

    Aggregated: an absolute-mass matrix (a TransportPlan, unchecked).
    Per label: array (N, N, N) whose slice ``a`` is the probability plan of
    label a.
    """
    g = eta.grid
    if not (0 <= s < t <= g.K):
        raise InputError(f"need 0 <= s < t <= {g.K}, got s={s}, t={t}")
    N = g.num_cells
    xs, ys = eta.nodes[:, s], eta.nodes[:, t]
    if not per_label:
        m = np.zeros((N, N))
        np.add.at(m, (xs, ys), eta.weights)
        return TransportPlan(g, m, check=False)
    out = np.zeros((N, N, N))
    np.add.at(out, (eta.labels, xs, ys), eta.weights)
    mass = out.sum(axis=(1, 2))
    empty = np.flatnonzero(mass <= 0)
    if empty.size:
        raise InputError(f"label {empty[0]} carries no mass", index=int(empty[0]))
    return out / mass[:, None, None]


def plan_of_map(grid, perm):
    perm = _check_perm(grid, perm)
    m = np.zeros((grid.num_cells, grid.num_cells))
    m[np.arange(grid.num_cells), perm] = grid.cell_mass
    return TransportPlan(grid, m)


def restrict(eta, s, t):
    """Restriction to nodes s..t, reparametrised onto the unit interval."""
    g = eta.grid
    if not (0 <= s < t <= g.K):
        raise InputError(f"need 0 <= s < t <= {g.K}, got s={s}, t={t}")
    return PathMeasure(g.with_steps(t - s), eta.labels, eta.nodes[:, s: t + 1],
                       eta.weights, strict=eta.strict)


def concatenate(eta1, eta2, l=None, tol=1e-10):
    """Glue eta1 on [0, l] and eta2 on [l, 1] by conditional independence.

    Both inputs are unit-time flows on grids with the same space
    discretization; the glued flow has K1 + K2 steps, so ``l`` must equal
    K1 / (K1 + K2) when given.
    """
    g1, g2 = eta1.grid, eta2.grid
    if (g1.d, g1.n, g1.geometry) != (g2.d, g2.n, g2.geometry):
        raise InputError("cannot glue flows on different spatial grids")
    K = g1.K + g2.K
    if l is not None and abs(l - g1.K / K) > 1e-12:
        raise InputError(f"junction {l} is not the node {g1.K}/{K}")
    N = g1.num_cells
    end1 = np.zeros((N, N))
    np.add.at(end1, (eta1.labels, eta1.nodes[:, -1]), eta1.weights)
    start2 = np.zeros((N, N))
    np.add.at(start2, (eta2.labels, eta2.nodes[:, 0]), eta2.weights)
    gap = np.abs(end1 - start2)
    if gap.max() > tol:
        a, x = np.unravel_index(int(np.argmax(gap)), gap.shape)
        raise InputError(f"junction marginals differ for label {a} at cell {x}", index=int(a))
    labels, nodes, weights = [], [], []
    by_key = {}
    for j in range(eta2.num_paths):
        if eta2.weights[j] > 0:
            by_key.setdefault((int(eta2.labels[j]), int(eta2.nodes[j, 0])), []).append(j)
    for i in range(eta1.num_paths):
        w1 = eta1.weights[i]
        if w1 <= 0:
            continue
        a, x = int(eta1.labels[i]), int(eta1.nodes[i, -1])
        for j in by_key.get((a, x), []):
            labels.append(a)
            nodes.append(np.concatenate([eta1.nodes[i], eta2.nodes[j, 1:]]))
            weights.append(w1 * eta2.weights[j] / start2[a, x])
    weights = np.asarray(weights)
    weights = weights / weights.sum()
    return PathMeasure(g1.with_steps(K), np.asarray(labels), np.asarray(nodes), weights,
                       strict=eta1.strict and eta2.strict)


def speed_profile(eta):
    """Per-step kinetic density k -> sum_paths w |step_k|^2 / dt^2."""
    g = eta.grid
    sq = g.sq_dist[eta.nodes[:, :-1], eta.nodes[:, 1:]]
    return (eta.weights @ sq) / g.dt ** 2


def constant_flow(eta_plan):
    """Stationary paths realising a plan whose endpoints coincide."""
    g = eta_plan.grid
    a, x = np.nonzero(eta_plan.matrix)
    nodes = np.repeat(x[:, None], g.K + 1, axis=1)
    return PathMeasure(g, a, nodes, eta_plan.matrix[a, x] / eta_plan.matrix.sum())


def peel_paths(grid, step, label, src, dst, mass, label_mass=None, rel_tol=1e-13):
    """Decompose per-label edge masses into weighted paths.

    Edges are given in coordinate form (step, label, src, dst, mass) with
    absolute masses.  Within each label the lexicographically smallest
    path carrying positive mass is extracted repeatedly, with its
    bottleneck mass, until the label is exhausted.  When ``label_mass`` is
    given, each label's path weights are rescaled to that total.
    """
    step = np.asarray(step, dtype=np.int64)
    label = np.asarray(label, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    mass = np.asarray(mass, dtype=float)
    K = grid.K
    out_labels, out_nodes, out_weights = [], [], []
    order = np.lexsort((dst, src, step, label))
    step, label, src, dst, mass = step[order], label[order], src[order], dst[order], mass[order]
    bounds = np.flatnonzero(np.diff(label)) + 1
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, label.size]):
        if lo == hi:
            continue
        a = int(label[lo])
        scale = float(mass[lo:hi][step[lo:hi] == 0].sum())
        thr = rel_tol * max(scale, 1e-300)
        # remaining[k][x] -> ordered {y: mass}
        remaining = [dict() for _ in range(K)]
        for k, x, y, m in zip(step[lo:hi], src[lo:hi], dst[lo:hi], mass[lo:hi]):
            if m > thr:
                remaining[k].setdefault(int(x), {})[int(y)] = float(m)
        weights, nodes = [], []
        while True:
            starts = [x for x, row in sorted(remaining[0].items())
                      if any(v > thr for v in row.values())]
            if not starts:
                break
            path = [starts[0]]
            for k in range(K):
                row = remaining[k].get(path[-1], {})
                live = [y for y in sorted(row) if row[y] > thr]
                if not live:
                    live = sorted(row, key=lambda y: (-row[y], y))[:1]
                if not live:
                    break
                path.append(live[0])
            if len(path) != K + 1:
                # dead end left by round-off: drop the dangling edge
                k = len(path) - 2
                del remaining[k][path[k]][path[k + 1]]
                continue
            w = min(remaining[k][path[k]][path[k + 1]] for k in range(K))
            if w <= 0:
                remaining[0][path[0]][path[1]] = 0.0
                continue
            for k in range(K):
                row = remaining[k][path[k]]
                row[path[k + 1]] -= w
                if row[path[k + 1]] <= thr:
                    del row[path[k + 1]]
            weights.append(w)
            nodes.append(path)
        if not weights:
            continue
        weights = np.asarray(weights)
        if label_mass is not None:
            weights = weights * (label_mass[a] / weights.sum())
        out_labels.extend([a] * len(nodes))
        out_nodes.extend(nodes)
        out_weights.extend(weights.tolist())
    weights = np.asarray(out_weights)
    weights = weights / weights.sum()
    return PathMeasure(grid, np.asarray(out_labels, dtype=np.int64),
                       np.asarray(out_nodes, dtype=np.int64).reshape(-1, K + 1), weights,
                       strict=label_mass is not None)
