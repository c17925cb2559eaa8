"""Per-label densities and transition masses, and conversions from and to path measures.

Every label carries a probability density c(k, x, a) at each node and a
transition mass m(k, x -> y, a) on each step; the label itself weighs
``label_mass[a]`` (uniform 1/N for incompressible flows).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lstsq

from .core import DomainGrid, InputError, MASS_TOL, peel_paths
from .solver import PressureField


@dataclass(frozen=True, eq=False)
class StepEdges:
    """Sparse transition masses of one step: parallel arrays."""

    label: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    mass: np.ndarray


@dataclass(frozen=True, eq=False)
class EulerianFlow:
    grid: DomainGrid
    edges: tuple
    label_mass: np.ndarray = field(default=None)
    density: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        g = self.grid
        N = g.num_cells
        if len(self.edges) != g.K:
            raise InputError(f"need {g.K} steps of edges, got {len(self.edges)}")
        clean = []
        for k, e in enumerate(self.edges):
            label = np.asarray(e.label, dtype=np.int64)
            src = np.asarray(e.src, dtype=np.int64)
            dst = np.asarray(e.dst, dtype=np.int64)
            mass = np.asarray(e.mass, dtype=float)
            if not (label.size == src.size == dst.size == mass.size):
                raise InputError(f"edge arrays of step {k} disagree in length", index=k)
            g.check_cells(label)
            g.check_cells(src)
            g.check_cells(dst)
            if np.any(mass < 0) or not np.all(np.isfinite(mass)):
                raise InputError(f"negative edge mass in step {k}", index=k)
            for arr in (label, src, dst, mass):
                arr.setflags(write=False)
            clean.append(StepEdges(label, src, dst, mass))
        object.__setattr__(self, "edges", tuple(clean))
        lm = np.full(N, g.cell_mass) if self.label_mass is None else \
            np.asarray(self.label_mass, dtype=float)
        lm.setflags(write=False)
        object.__setattr__(self, "label_mass", lm)
        c = np.zeros((g.K + 1, N, N))
        for k, e in enumerate(self.edges):
            np.add.at(c[k], (e.label, e.src), e.mass)
        last = self.edges[-1]
        np.add.at(c[g.K], (last.label, last.dst), last.mass)
        c.setflags(write=False)
        object.__setattr__(self, "density", c)

    def dense_step(self, k):
        """Transition masses of step k as an (N, N, N) array [label, src, dst]."""
        N = self.grid.num_cells
        out = np.zeros((N, N, N))
        e = self.edges[k]
        np.add.at(out, (e.label, e.src, e.dst), e.mass)
        return out

    def aggregate_density(self):
        """Label-weighted density relative to the uniform measure, shape (K+1, N)."""
        return np.einsum("kax,a->kx", self.density, self.label_mass) * self.grid.num_cells

    def velocity(self, k):
        """Averaged velocity (N, N, d) per (label, cell) on step k; zero where c = 0."""
        g = self.grid
        mom = self._momentum(k)
        c = self.density[k]
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.where(c[..., None] > 0, mom / (c[..., None] * g.dt), 0.0)
        return v

    def _momentum(self, k):
        g = self.grid
        e = self.edges[k]
        out = np.zeros((g.num_cells, g.num_cells, g.d))
        np.add.at(out, (e.label, e.src), e.mass[:, None] * g.displacement[e.src, e.dst])
        return out


def from_path_measure(eta):
    """Per-label slice histograms and step transition masses of a path measure."""
    g = eta.grid
    lm = eta.label_masses()
    scale = np.where(lm > 0, 1.0 / np.where(lm > 0, lm, 1.0), 0.0)
    w = eta.weights * scale[eta.labels]
    edges = []
    for k in range(g.K):
        key = np.column_stack([eta.labels, eta.nodes[:, k], eta.nodes[:, k + 1]])
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        mass = np.bincount(inv.reshape(-1), weights=w, minlength=uniq.shape[0])
        keep = mass > 0
        edges.append(StepEdges(uniq[keep, 0], uniq[keep, 1], uniq[keep, 2], mass[keep]))
    return EulerianFlow(g, tuple(edges), lm)


def continuity_residual(ef):
    """Largest defect of per-label mass conservation through the nodes."""
    g = ef.grid
    worst = 0.0
    for k in range(g.K):
        e = ef.edges[k]
        out_mass = np.zeros((g.num_cells, g.num_cells))
        np.add.at(out_mass, (e.label, e.src), e.mass)
        in_mass = np.zeros((g.num_cells, g.num_cells))
        np.add.at(in_mass, (e.label, e.dst), e.mass)
        if k + 1 < g.K:
            nxt = ef.edges[k + 1]
            nxt_out = np.zeros((g.num_cells, g.num_cells))
            np.add.at(nxt_out, (nxt.label, nxt.src), nxt.mass)
            worst = max(worst, float(np.max(np.abs(in_mass - nxt_out))))
        worst = max(worst, float(np.max(np.abs(out_mass - ef.density[k]))))
    live = ef.label_mass > 0
    sums = ef.density.sum(axis=2)[:, live]
    worst = max(worst, float(np.max(np.abs(sums - 1.0))))
    return worst


def incompressibility_defect(ef):
    return float(np.max(np.abs(ef.aggregate_density() - 1.0)))


def to_path_measure(ef, tol=1e-10):
    """Decompose the transition masses into weighted paths (greedy peeling)."""
    res = continuity_residual(ef)
    if res > tol:
        raise InputError(f"continuity violated by {res:.3e}; cannot decompose")
    g = ef.grid
    steps, labels, srcs, dsts, mass = [], [], [], [], []
    for k, e in enumerate(ef.edges):
        keep = e.mass > 0
        steps.append(np.full(int(keep.sum()), k))
        labels.append(e.label[keep])
        srcs.append(e.src[keep])
        dsts.append(e.dst[keep])
        mass.append(e.mass[keep] * ef.label_mass[e.label[keep]])
    lm = ef.label_mass
    strict = bool(np.all(np.abs(lm - g.cell_mass) <= MASS_TOL))
    eta = peel_paths(g, np.concatenate(steps), np.concatenate(labels), np.concatenate(srcs),
                     np.concatenate(dsts), np.concatenate(mass),
                     label_mass=lm if strict else None)
    return eta


def eulerian_action(ef):
    """Kinetic energy of the averaged velocities: sum mu |sum m disp|^2 / (2 c dt)."""
    g = ef.grid
    total = 0.0
    for k in range(g.K):
        mom = ef._momentum(k)
        c = ef.density[k]
        sq = np.sum(mom ** 2, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            per = np.where(c > 0, sq / np.where(c > 0, c, 1.0), 0.0)
        total += float(ef.label_mass @ per.sum(axis=1)) / (2.0 * g.dt)
    return total


def edge_action(ef):
    """Kinetic energy carried by the individual transitions."""
    g = ef.grid
    total = 0.0
    for e in ef.edges:
        total += float(np.sum(ef.label_mass[e.label] * e.mass * g.sq_dist[e.src, e.dst]))
    return total / (2.0 * g.dt)


def step_spread(ef):
    """Largest spread of the displacements leaving one (step, label, cell).

    Zero exactly when every such group moves by a single step, which is
    when the averaged-velocity action equals the edge action.
    """
    g = ef.grid
    worst = 0
    for e in ef.edges:
        key = np.column_stack([e.label, e.src])
        keep = e.mass > 0
        uniq, counts = np.unique(key[keep], axis=0, return_counts=True)
        if counts.size:
            worst = max(worst, int(counts.max()) - 1)
    return worst


def _gradient_operator(grid):
    """Forward differences on lattice edges, rows = edges, with edge endpoints."""
    n, d = grid.n, grid.d
    cells = np.arange(grid.num_cells)
    coords = grid.coords(cells)
    rows, tails, heads, axes = [], [], [], []
    for ax in range(d):
        nb = coords.copy()
        nb[:, ax] += 1
        if grid.periodic:
            nb[:, ax] %= n
            ok = np.ones(cells.size, dtype=bool)
        else:
            ok = nb[:, ax] < n
        heads_ax = grid.index(np.where(ok[:, None], nb, 0))
        tails.append(cells[ok])
        heads.append(heads_ax[ok])
        axes.append(np.full(int(ok.sum()), ax))
    tails = np.concatenate(tails)
    heads = np.concatenate(heads)
    axes = np.concatenate(axes)
    G = np.zeros((tails.size, grid.num_cells))
    G[np.arange(tails.size), heads] += 1.0 / grid.dx
    G[np.arange(tails.size), tails] -= 1.0 / grid.dx
    return G, tails, heads, axes


def node_forces(ef):
    """Pressure-gradient estimate -rho * acceleration at interior nodes, (K-1, N, d)."""
    g = ef.grid
    N = g.num_cells
    out = np.zeros((g.K - 1, N, g.d))
    moms = [np.einsum("axd,a->xd", ef._momentum(k), ef.label_mass) / g.dt for k in range(g.K)]
    for k in range(1, g.K):
        e = ef.edges[k - 1]
        p_in = np.zeros((N, g.d))
        np.add.at(p_in, e.dst, (ef.label_mass[e.label] * e.mass)[:, None]
                  * g.displacement[e.src, e.dst] / g.dt)
        out[k - 1] = -N * (moms[k] - p_in) / g.dt
    return out


def pressure_from_eulerian(ef):
    """Least-squares pressure whose lattice gradient matches the momentum balance.

    The force at every interior node is minus the density times the change
    of momentum across the node; edge-averaged forces are fitted by forward
    differences (periodic on the torus, reflecting on the cube), which
    gives the usual 2d+1 point Laplacian in the normal equations.
    """
    g = ef.grid
    F = node_forces(ef)
    G, tails, heads, axes = _gradient_operator(g)
    p = np.zeros((g.K - 1, g.num_cells))
    residual = 0.0
    for k in range(g.K - 1):
        f = 0.5 * (F[k][tails, axes] + F[k][heads, axes])
        sol = lstsq(G, f)[0]
        sol = sol - sol.mean()
        p[k] = sol
        residual = max(residual, float(np.max(np.abs(G @ sol - f))) if f.size else 0.0)
    return PressureField.from_raw(g, p), residual


def round_trip_action_gap(eta):
    """Edge action before and after a decomposition round trip."""
    ef = from_path_measure(eta)
    back = from_path_measure(to_path_measure(ef))
    return edge_action(ef), edge_action(back)


__all__ = [
    "EulerianFlow", "StepEdges", "continuity_residual", "edge_action",
    "eulerian_action", "from_path_measure", "incompressibility_defect", "node_forces",
    "pressure_from_eulerian", "step_spread", "to_path_measure",
]
