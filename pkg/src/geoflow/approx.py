"""Approximation of generalized flows by flows of measure-preserving maps.

The pipeline works on the unit cube refined into ``r`` subcells per
coarse cell and per axis:

1. shrink the flow into a concentric cube and make it steady near t = 0,
2. sample trajectories,
3. spread every trajectory into a compactly supported bump and correct the
   resulting density to the uniform one with a Moser-type flow,
4. split the subcells deterministically among the bumps on [0, eps],

and finally snaps every time slice to a permutation of subcells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial import cKDTree

from .core import DomainGrid, InputError, GeoflowError, PathMeasure, action_of_measure

DEFAULT_REFINE = 4
DENSITY_TOL = 1e-3
MAX_RETRIES = 5


class ApproximationError(GeoflowError):
    """A stage of the approximation pipeline could not meet its target."""


# ---------------------------------------------------------------------------
# one-dimensional splitting of a uniform density


def _segments_cdf(segs, x):
    """CDF of a piecewise-constant density given as (lo, hi, value) triples."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for lo, hi, v in segs:
        if hi > lo and v != 0.0:
            out += v * np.clip(x - lo, 0.0, hi - lo)
    return out


@dataclass(frozen=True, eq=False)
class ChefaticaResult:
    """Densities rho^k_t and monotone maps h(t, .) splitting [0, 1] into M densities.

    ``b`` holds the target densities as cell values on a uniform 1D grid,
    shape (M, G), summing to one in every cell.
    """

    b: np.ndarray
    lengths: np.ndarray
    starts: np.ndarray
    floor: float

    @property
    def M(self):
        return self.b.shape[0]

    @property
    def G(self):
        return self.b.shape[1]

    @property
    def stage_length(self):
        return 0.5 / (self.M - 1) if self.M > 1 else 0.5

    def _breaks(self):
        return np.linspace(0.0, 1.0, self.G + 1)

    def _target_cdf(self, k, x):
        edges = self._breaks()
        cum = np.concatenate([[0.0], np.cumsum(self.b[k]) / self.G])
        return np.interp(x, edges, cum)

    def _stage_segments(self, t):
        """Per-label segments during the merging half, t in [0, 1/2]."""
        M, l = self.M, self.lengths
        segs = [[(self.starts[k], self.starts[k] + l[k], 1.0)] for k in range(M)]
        if M == 1:
            return segs
        tau = self.stage_length
        i = min(M - 1, int(math.floor(t / tau)) + 1)
        theta = min(1.0, max(0.0, (t - (i - 1) * tau) / tau))
        L_i = float(l[:i].sum())
        L_next = L_i + float(l[i])
        left = L_i * (1.0 - theta)
        mid = left + theta * L_next
        group = [(0.0, left, 1.0), (left, mid, L_i / L_next)]
        for k in range(i):
            share = l[k] / L_i
            segs[k] = [(lo, hi, share * v) for lo, hi, v in group]
        segs[i] = [(left, mid, l[i] / L_next), (mid, L_next, 1.0)]
        return segs

    def cdf(self, k, t, x):
        """CDF of rho^k_t at the points x."""
        x = np.asarray(x, dtype=float)
        if t <= 0.5:
            return _segments_cdf(self._stage_segments(t)[k], x)
        theta = 2.0 * t - 1.0
        return (1.0 - theta) * self.lengths[k] * np.clip(x, 0.0, 1.0) + \
            theta * self._target_cdf(k, x)

    def _knots(self, k, t):
        if t <= 0.5:
            pts = {0.0, 1.0}
            for lo, hi, v in self._stage_segments(t)[k]:
                pts.update((lo, hi))
            xs = np.array(sorted(pts))
        else:
            xs = self._breaks()
        return xs, self.cdf(k, t, xs)

    def h(self, t, x):
        """Image of the points x under h(t, .)."""
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        ends = self.starts + self.lengths
        member = np.clip(np.searchsorted(ends, x, side="right"), 0, self.M - 1)
        for k in range(self.M):
            sel = member == k
            if not np.any(sel):
                continue
            xs, F = self._knots(k, t)
            lo = int(np.flatnonzero(F <= 0.0)[-1]) if np.any(F <= 0.0) else 0
            hi_idx = np.flatnonzero(F >= self.lengths[k] - 1e-15)
            hi = int(hi_idx[0]) if hi_idx.size else xs.size - 1
            out[sel] = np.interp(x[sel] - self.starts[k], F[lo: hi + 1], xs[lo: hi + 1])
        return out

    def cell_densities(self, t, cells=None):
        """Cell averages (M, cells) of all densities; the columns sum to one exactly.

        The last density is one minus the running sum of the others, so a
        left-to-right sum of every column gives exactly 1.0.
        """
        cells = self.G if cells is None else cells
        edges = np.linspace(0.0, 1.0, cells + 1)
        out = np.empty((self.M, cells))
        acc = np.zeros(cells)
        for k in range(self.M - 1):
            F = self.cdf(k, t, edges)
            out[k] = np.diff(F) * cells
            acc = acc + out[k]
        out[-1] = 1.0 - acc
        return out

    def lipschitz_constants(self, samples_per_stage=64):
        """Largest time-difference quotient of the CDFs in sup norm, per half."""
        def sweep(ts):
            worst = 0.0
            for t0, t1 in zip(ts[:-1], ts[1:]):
                for k in range(self.M):
                    xs = np.union1d(self._knots(k, t0)[0], self._knots(k, t1)[0])
                    d = np.max(np.abs(self.cdf(k, t1, xs) - self.cdf(k, t0, xs)))
                    worst = max(worst, d / (t1 - t0))
            return worst
        stages = max(1, self.M - 1)
        first = np.linspace(0.0, 0.5, stages * samples_per_stage + 1)
        second = np.linspace(0.5, 1.0, samples_per_stage + 1)
        return float(sweep(first)), float(sweep(second))

    def pushforward_error(self, points_per_label=512):
        """Largest CDF mismatch between h(1, .) pushed uniform mass and b_k."""
        worst = 0.0
        for k in range(self.M):
            x = self.starts[k] + (np.arange(points_per_label) + 0.5) / points_per_label \
                * self.lengths[k]
            y = self.h(1.0, x)
            worst = max(worst, float(np.max(np.abs(self._target_cdf(k, y)
                                                    - (x - self.starts[k])))))
        return worst

    def action(self, time_steps=256, space_points=1024):
        """Kinetic energy of h by difference quotients (a lower estimate by Jensen)."""
        x = (np.arange(space_points) + 0.5) / space_points
        stages = max(1, self.M - 1)
        ts = np.union1d(np.linspace(0.0, 0.5, stages * time_steps + 1),
                        np.linspace(0.5, 1.0, time_steps + 1))
        prev = self.h(ts[0], x)
        total = 0.0
        for t0, t1 in zip(ts[:-1], ts[1:]):
            cur = self.h(t1, x)
            total += float(np.mean((cur - prev) ** 2)) / (2.0 * (t1 - t0))
            prev = cur
        return total

    def action_bound(self):
        return self.M ** 2 / self.floor ** 2


def chefatica_interpolate(b):
    """Split the uniform density on [0, 1] into densities b_1..b_M by monotone maps."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if b.ndim != 2 or b.shape[1] < 1:
        raise InputError("densities must be given as an (M, G) array")
    floor = float(b.min())
    if not floor > 0:
        raise InputError("every density must be bounded below by a positive constant")
    if np.max(np.abs(b.sum(axis=0) - 1.0)) > 1e-12:
        raise InputError("densities must sum to one in every cell")
    lengths = b.mean(axis=1)
    starts = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    b.setflags(write=False)
    return ChefaticaResult(b, lengths, starts, floor)


# ---------------------------------------------------------------------------
# shrinking and sampling


@dataclass(frozen=True, eq=False)
class TrajectoryMeasure:
    """Piecewise-linear trajectories of boxes plus a steady frame.

    Atom j is a box of half-width ``half_width`` whose centre follows
    ``paths[j]`` through the time ``knots``; its mass is ``weights[j]``.
    The remaining ``frame_weight`` is uniform on the frame between the unit
    cube and the inner cube [inner_lo, inner_hi]^d, and does not move.
    """

    d: int
    knots: np.ndarray
    paths: np.ndarray
    weights: np.ndarray
    half_width: float
    frame_weight: float
    inner_lo: float
    inner_hi: float
    eps: float

    def action(self):
        steps = np.diff(self.paths, axis=1)
        dtau = np.diff(self.knots)
        per = np.sum(np.sum(steps ** 2, axis=2) / (2.0 * dtau[None, :]), axis=1)
        return float(self.weights @ per)

    def transported_weight(self):
        return float(self.weights.sum())


def shrink_flow(eta, eps):
    """Concentric shrink of a cube flow, steady on [0, eps] and time-compressed after."""
    g = eta.grid
    if g.periodic:
        raise InputError("shrinking applies to the unit cube only")
    if not 0 < eps < 1 / 8:
        raise InputError("need 0 < eps < 1/8")
    scale = 1.0 - 4.0 * eps
    knots = np.concatenate([[0.0], eps + (1.0 - eps) * g.times])
    centres = g.centers(eta.nodes.reshape(-1)).reshape(eta.num_paths, g.K + 1, g.d)
    centres = 2.0 * eps + scale * centres
    paths = np.concatenate([centres[:, :1], centres], axis=1)
    weights = eta.weights * scale ** g.d
    return TrajectoryMeasure(g.d, knots, paths, weights, 0.5 * scale * g.dx,
                             1.0 - scale ** g.d, 2.0 * eps, 1.0 - 2.0 * eps, eps)


@dataclass(frozen=True, eq=False)
class Samples:
    knots: np.ndarray
    positions: np.ndarray
    eps: float

    @property
    def N(self):
        return self.positions.shape[0]

    @property
    def d(self):
        return self.positions.shape[2]

    def action(self):
        steps = np.diff(self.positions, axis=1)
        dtau = np.diff(self.knots)
        return float(np.mean(np.sum(np.sum(steps ** 2, axis=2) / (2.0 * dtau), axis=1)))


def sample_paths(eta, N, seed=0):
    """N independent draws.

    From a PathMeasure the result is an (N, K+1) array of node indices;
    from a TrajectoryMeasure it is a Samples object with positions at the
    knots.
    """
    if N < 1:
        raise InputError("need at least one sample")
    rng = np.random.default_rng(seed)
    if isinstance(eta, PathMeasure):
        idx = rng.choice(eta.num_paths, size=N, p=eta.weights / eta.weights.sum())
        return eta.nodes[idx]
    tm = eta
    T = tm.knots.size
    out = np.empty((N, T, tm.d))
    frame = rng.random(N) < tm.frame_weight
    n_atoms = int((~frame).sum())
    if n_atoms:
        p = tm.weights / tm.weights.sum()
        idx = rng.choice(p.size, size=n_atoms, p=p)
        jitter = rng.uniform(-tm.half_width, tm.half_width, size=(n_atoms, 1, tm.d))
        out[~frame] = tm.paths[idx] + jitter
    n_frame = int(frame.sum())
    pts = np.empty((0, tm.d))
    while pts.shape[0] < n_frame:
        cand = rng.random((2 * (n_frame - pts.shape[0]) + 8, tm.d))
        inside = np.all((cand > tm.inner_lo) & (cand < tm.inner_hi), axis=1)
        pts = np.concatenate([pts, cand[~inside]])
    if n_frame:
        out[frame] = pts[:n_frame, None, :]
    return Samples(tm.knots.copy(), out, tm.eps)


# ---------------------------------------------------------------------------
# mollification


def bump(r2):
    """Unnormalised bump (1 - |y|^2)^2 on the unit ball, from squared radii."""
    return np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)


def _gauss_points(m, d, order=4):
    """Gauss-Legendre points of every refined cell: (cells, order^d, d) and weights."""
    z, w = np.polynomial.legendre.leggauss(order)
    z = 0.5 * (z + 1.0)
    w = 0.5 * w
    h = 1.0 / m
    grids = np.meshgrid(*([z] * d), indexing="ij")
    local = np.stack([gg.reshape(-1) for gg in grids], axis=1)
    wl = np.ones(local.shape[0])
    for gw in np.meshgrid(*([w] * d), indexing="ij"):
        wl = wl * gw.reshape(-1)
    cells = np.stack(np.unravel_index(np.arange(m ** d), (m,) * d), axis=1)
    pts = (cells[:, None, :] + local[None, :, :]) * h
    return pts, wl * h ** d


def _images(centres, eps):
    """Reflections of the centres across the faces of the unit cube within eps."""
    d = centres.shape[1]
    pts = [centres]
    owner = [np.arange(centres.shape[0])]
    for ax in range(d):
        new_pts, new_owner = [], []
        for P, O in zip(pts, owner):
            for side, mirror in ((P[:, ax] < eps, 0.0), (P[:, ax] > 1.0 - eps, 2.0)):
                if np.any(side):
                    Q = P[side].copy()
                    Q[:, ax] = mirror - Q[:, ax]
                    new_pts.append(Q)
                    new_owner.append(O[side])
        pts += new_pts
        owner += new_owner
    return np.concatenate(pts), np.concatenate(owner)


def kernel_cell_masses(centres, eps, m):
    """Sparse cell masses of every reflected bump: (sample, cell, mass) triples.

    Each bump is integrated over the refined cells with tensor Gauss
    quadrature and normalised to unit total mass.
    """
    d = centres.shape[1]
    pts, wq = _gauss_points(m, d)
    nq = wq.size
    flat = pts.reshape(-1, d)
    img, owner = _images(np.asarray(centres, dtype=float), eps)
    tree = cKDTree(flat)
    hits = tree.query_ball_point(img, eps)
    rows, cols, vals = [], [], []
    for j, lst in enumerate(hits):
        if not lst:
            continue
        lst = np.asarray(lst)
        r2 = np.sum((flat[lst] - img[j]) ** 2, axis=1) / eps ** 2
        rows.append(np.full(lst.size, owner[j]))
        cols.append(lst // nq)
        vals.append(bump(r2) * wq[lst % nq])
    if not rows:
        raise ApproximationError("bumps miss every quadrature point")
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(centres.shape[0], m ** d)).tocsr()
    mat.sum_duplicates()
    total = np.asarray(mat.sum(axis=1)).reshape(-1)
    if np.any(total <= 0):
        raise ApproximationError("a bump misses every quadrature point")
    return sp.diags(1.0 / total) @ mat, total


def kernel_values(centres, totals, eps, m, points):
    """Normalised bump densities a_i at arbitrary points: sparse (points, samples)."""
    d = centres.shape[1]
    img, owner = _images(np.asarray(centres, dtype=float), eps)
    tree = cKDTree(img)
    hits = tree.query_ball_point(points, eps)
    rows, cols, vals = [], [], []
    for j, lst in enumerate(hits):
        if not lst:
            continue
        lst = np.asarray(lst)
        r2 = np.sum((img[lst] - points[j]) ** 2, axis=1) / eps ** 2
        rows.append(np.full(lst.size, j))
        cols.append(owner[lst])
        vals.append(bump(r2) / totals[owner[lst]])
    if not rows:
        return sp.csr_matrix((points.shape[0], centres.shape[0]))
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(points.shape[0], centres.shape[0])).tocsr()
    mat.sum_duplicates()
    return mat


@dataclass(frozen=True, eq=False)
class MollifiedFlow:
    """Bump-spread samples on a refined grid of m cells per axis.

    ``density`` holds the cell averages of rho^N at every knot.  After
    correction, ``fluxes`` holds the face fluxes of the correcting field at
    every knot and ``residuals`` the density residual of the corrected
    configuration.
    """

    samples: Samples
    eps: float
    m: int
    density: np.ndarray
    totals: np.ndarray = field(repr=False, default=None)
    fluxes: tuple = field(repr=False, default=None)
    residuals: np.ndarray = field(default=None)

    @property
    def d(self):
        return self.samples.d

    @property
    def corrected(self):
        return self.fluxes is not None

    def density_deviation(self):
        return float(np.max(np.abs(self.density - 1.0)))


def mollify(samples, eps, m):
    """Spread every sample into a reflected bump of radius eps and record rho^N."""
    if not eps > 0:
        raise InputError("bump radius must be positive")
    T = samples.knots.size
    dens = np.empty((T, m ** samples.d))
    totals = None
    for j in range(T):
        mat, tot = kernel_cell_masses(samples.positions[:, j], eps, m)
        if j == 0:
            totals = tot
        dens[j] = np.asarray(mat.sum(axis=0)).reshape(-1) * m ** samples.d / samples.N
    return MollifiedFlow(samples, eps, m, dens, totals)


# ---------------------------------------------------------------------------
# Moser correction


def _neumann_fluxes(rho, m, d):
    """Face fluxes u = grad phi with the discrete Neumann problem Lap phi = rho - 1."""
    from scipy import fft

    h = 1.0 / m
    f = (rho - rho.mean()).reshape((m,) * d)
    lam1 = (2.0 - 2.0 * np.cos(np.pi * np.arange(m) / m)) / h ** 2
    lam = np.zeros((m,) * d)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = m
        lam = lam + lam1.reshape(shape)
    fh = fft.dctn(f, type=2, norm="ortho")
    with np.errstate(divide="ignore", invalid="ignore"):
        ph = np.where(lam > 0, -fh / np.where(lam > 0, lam, 1.0), 0.0)
    phi = fft.idctn(ph, type=2, norm="ortho")
    fluxes = []
    for ax in range(d):
        shape = list(phi.shape)
        shape[ax] = m + 1
        U = np.zeros(shape)
        inner = [slice(None)] * d
        inner[ax] = slice(1, m)
        U[tuple(inner)] = np.diff(phi, axis=ax) / h
        fluxes.append(U)
    return fluxes


def _ratio_log(z):
    """log1p(z) / z, continuous at 0."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    big = np.abs(z) > 1e-8
    with np.errstate(divide="ignore", invalid="ignore"):
        out[big] = np.log1p(z[big]) / z[big]
    small = ~big
    out[small] = 1.0 - z[small] / 2.0 + z[small] ** 2 / 3.0
    return out


def _ratio_exp(y):
    """expm1(y) / y, continuous at 0."""
    y = np.asarray(y, dtype=float)
    out = np.ones_like(y)
    big = np.abs(y) > 1e-8
    with np.errstate(over="ignore", invalid="ignore"):
        out[big] = np.expm1(y[big]) / y[big]
    small = ~big
    out[small] = 1.0 + y[small] / 2.0 + y[small] ** 2 / 6.0
    return out


def transport_points(points, rho, fluxes, m, inverse=False, max_events=None):
    """Exact flow map of the Moser field on [0, 1] in pseudo-time.

    Forward: the density rho (cell values) is carried to the uniform one by
    the field u / ((1 - s) rho + s) with u the face-flux reconstruction of
    grad phi.  Inside a cell each coordinate solves a linear ODE in the
    rescaled time d(sigma) = ds / rho_s, so every cell crossing is computed
    in closed form.  ``inverse`` runs the flow backwards.
    """
    pts = np.array(points, dtype=float)
    n_pts, d = pts.shape
    h = 1.0 / m
    rho = np.asarray(rho, dtype=float).reshape((m,) * d)
    sign = -1.0 if inverse else 1.0
    cell = np.clip(np.floor(pts / h).astype(np.int64), 0, m - 1)
    s = np.zeros(n_pts)
    active = np.ones(n_pts, dtype=bool)
    max_events = max_events or 50 * m * d
    for _ in range(max_events):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        c = cell[idx]
        rc = rho[tuple(c.T)]
        A, B = (rc, np.ones_like(rc)) if not inverse else (np.ones_like(rc), rc)
        rs = A + s[idx] * (B - A)
        rem = 1.0 - s[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            budget = np.where(rs > 0, rem / rs * _ratio_log(rem * (B - A) / np.where(rs > 0, rs, 1.0)),
                              np.inf)
        budget = np.where(rem <= 0, 0.0, budget)
        exit_sig = np.full(idx.size, np.inf)
        exit_ax = np.full(idx.size, -1)
        exit_dir = np.zeros(idx.size, dtype=np.int64)
        v0s, Bs = [], []
        for ax in range(d):
            lo_face = [c[:, j] for j in range(d)]
            U = fluxes[ax]
            uL = sign * U[tuple(lo_face)]
            hi_face = list(lo_face)
            hi_face[ax] = c[:, ax] + 1
            uR = sign * U[tuple(hi_face)]
            xL = c[:, ax] * h
            xR = xL + h
            x = pts[idx, ax]
            slope = (uR - uL) / h
            v0 = uL + slope * (x - xL)
            v0s.append(v0)
            Bs.append(slope)
            with np.errstate(divide="ignore", invalid="ignore"):
                right = (v0 > 0) & (uR > 0)
                sig_r = np.where(right, (xR - x) / np.where(right, v0, 1.0)
                                 * _ratio_log(np.where(right, (uR - v0) / np.where(right, v0, 1.0), 0.0)),
                                 np.inf)
                left = (v0 < 0) & (uL < 0)
                sig_l = np.where(left, (xL - x) / np.where(left, v0, 1.0)
                                 * _ratio_log(np.where(left, (uL - v0) / np.where(left, v0, 1.0), 0.0)),
                                 np.inf)
            sig = np.minimum(sig_r, sig_l)
            better = sig < exit_sig
            exit_sig = np.where(better, sig, exit_sig)
            exit_ax = np.where(better, ax, exit_ax)
            exit_dir = np.where(better, np.where(sig_r <= sig_l, 1, -1), exit_dir)
        step = np.minimum(exit_sig, budget)
        stuck = ~np.isfinite(step)
        fin = ~stuck
        for ax in range(d):
            x = pts[idx, ax]
            v0, slope = v0s[ax], Bs[ax]
            moved = x + v0 * np.where(fin, step, 0.0) * _ratio_exp(slope * np.where(fin, step, 0.0))
            xL = c[:, ax] * h
            stag = np.where(slope < 0, x - v0 / np.where(slope < 0, slope, 1.0), x)
            new = np.where(stuck, stag, moved)
            pts[idx, ax] = np.clip(new, xL, xL + h)
        exited = fin & (exit_sig <= budget)
        # pseudo-time bookkeeping
        used = np.where(fin, step, 0.0)
        s[idx] = np.minimum(1.0, s[idx] + rs * used * _ratio_exp((B - A) * used))
        done = (fin & ~exited) | stuck
        s[idx[done & ~stuck]] = 1.0
        # cross faces
        ex = np.flatnonzero(exited)
        if ex.size:
            gi = idx[ex]
            ax = exit_ax[ex]
            dirn = exit_dir[ex]
            face = (cell[gi, ax] + (dirn > 0)) * h
            pts[gi, ax] = face
            cell[gi, ax] = cell[gi, ax] + dirn
            out = (cell[gi, ax] < 0) | (cell[gi, ax] >= m)
            cell[gi, ax] = np.clip(cell[gi, ax], 0, m - 1)
            done[ex[out]] = True
        active[idx[done]] = False
    return pts


def corrected_density(points, rho, fluxes, m, rel_step=1e-6):
    """Density of the corrected configuration at target points.

    Each point is pulled back through the inverse map to w, and the
    density there is rho(w) / det D(zeta)(w), with the Jacobian of the
    forward map from second-order one-sided differences taken inside the cell of w.
    """
    pts = np.asarray(points, dtype=float)
    n_pts, d = pts.shape
    h = 1.0 / m
    pre = transport_points(pts, rho, fluxes, m, inverse=True)
    cell = np.clip(np.floor(pre / h).astype(np.int64), 0, m - 1)
    centre = (cell + 0.5) * h
    step = rel_step * h * np.where(pre <= centre, 1.0, -1.0)
    base = transport_points(pre, rho, fluxes, m)
    J = np.empty((n_pts, d, d))
    for ax in range(d):
        one, two = pre.copy(), pre.copy()
        one[:, ax] += step[:, ax]
        two[:, ax] += 2.0 * step[:, ax]
        f1 = transport_points(one, rho, fluxes, m)
        f2 = transport_points(two, rho, fluxes, m)
        J[:, :, ax] = (4.0 * f1 - 3.0 * base - f2) / (2.0 * step[:, ax, None])
    det = np.linalg.det(J)
    rc = np.asarray(rho, dtype=float).reshape((m,) * d)[tuple(cell.T)]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(det > 0, rc / det, np.inf)


def density_residual(rho, fluxes, m, d, quad_order=2):
    """Largest deviation of the corrected density from one at Gauss points of every cell."""
    pts, _ = _gauss_points(m, d, quad_order)
    dens = corrected_density(pts.reshape(-1, d), rho, fluxes, m)
    return float(np.max(np.abs(dens - 1.0)))


def moser_correct(mf, tol=DENSITY_TOL):
    """Build the correcting flow at every knot and check the corrected density."""
    fluxes = []
    res = np.empty(mf.density.shape[0])
    for j, rho in enumerate(mf.density):
        F = _neumann_fluxes(rho, mf.m, mf.d)
        fluxes.append(F)
        res[j] = density_residual(rho, F, mf.m, mf.d)
    out = MollifiedFlow(mf.samples, mf.eps, mf.m, mf.density, mf.totals, tuple(fluxes), res)
    if np.max(res) > tol:
        raise ApproximationError(f"corrected density residual {np.max(res):.2e} exceeds {tol}")
    return out


# ---------------------------------------------------------------------------
# deterministic split on [0, eps]


@dataclass(frozen=True, eq=False)
class SplitResult:
    """Sample followed by every refined cell, and the cell it occupies at time eps."""

    labels: np.ndarray
    positions: np.ndarray
    added_action: float
    cubes: list
    budget_met: bool


def split_fractions(mf, quad_order=2):
    """Fractions f_i(z) = a_i / sum_j a_j at the preimages of every refined cell."""
    d, m = mf.d, mf.m
    pts, wq = _gauss_points(m, d, quad_order)
    n_cells, nq, _ = pts.shape
    flat = pts.reshape(-1, d)
    pre = transport_points(flat, mf.density[0], mf.fluxes[0], m, inverse=True)
    vals = kernel_values(mf.samples.positions[:, 0], mf.totals, mf.eps, m, pre)
    agg = sp.csr_matrix((np.ones(flat.shape[0]), (np.repeat(np.arange(n_cells), nq),
                                                   np.arange(flat.shape[0]))),
                        shape=(n_cells, flat.shape[0]))
    cell_vals = (agg @ vals).tocsr()
    tot = np.asarray(cell_vals.sum(axis=1)).reshape(-1)
    empty = np.flatnonzero(tot <= 0)
    if empty.size:
        # cells whose preimage misses every bump follow the nearest sample
        centres = (np.stack(np.unravel_index(empty, (m,) * d), axis=1) + 0.5) / m
        back = transport_points(centres, mf.density[0], mf.fluxes[0], m, inverse=True)
        nearest = cKDTree(mf.samples.positions[:, 0]).query(back)[1]
        extra = sp.csr_matrix((np.ones(empty.size), (empty, nearest)), shape=cell_vals.shape)
        cell_vals = (cell_vals + extra).tocsr()
        tot = np.asarray(cell_vals.sum(axis=1)).reshape(-1)
    return (sp.diags(1.0 / tot) @ cell_vals).tocsr(), pre.reshape(n_cells, nq, d)


def _fine_estimate(frac_rows, side, eps, d):
    """Splitting cost estimate M^2 side^(d+2) / (eps b^2) of a cube, inf if patterns differ."""
    patterns = {tuple(r.indices.tolist()) for r in frac_rows}
    if len(patterns) != 1:
        return math.inf
    M = len(next(iter(patterns)))
    if M <= 1:
        return 0.0
    bmin = min(float(r.data.min()) for r in frac_rows)
    return M ** 2 * side ** (d + 2) / (eps * bmin ** 2)


def deterministic_split(mf, alpha, strict=False):
    """Assign every refined cell to one sample by dyadic cubes and 1D splittings.

    Cubes are halved until the splitting estimate of each cube is below
    its volume share of ``alpha``.  Inside an accepted cube each column is
    split with the 1D construction and the moved cells are sorted back onto
    the column.  Cubes that reach a single cell without meeting the budget
    are assigned by error diffusion over the fractions, without moving;
    with ``strict`` this raises instead.
    """
    if not alpha > 0:
        raise InputError("alpha must be positive")
    if not mf.corrected:
        raise InputError("split needs a corrected flow")
    d, m, eps = mf.d, mf.m, mf.eps
    frac, _ = split_fractions(mf)
    h = 1.0 / m
    labels = np.full(m ** d, -1, dtype=np.int64)
    positions = np.arange(m ** d)
    cubes = []
    forced = []
    budget_met = True
    stack = [((0,) * d, m)]
    while stack:
        origin, side = stack.pop()
        rng_ax = [np.arange(o, o + side) for o in origin]
        cells = np.ravel_multi_index(np.meshgrid(*rng_ax, indexing="ij"), (m,) * d).reshape(-1)
        rows = [frac[c] for c in cells]
        est = _fine_estimate(rows, side * h, eps, d)
        share = alpha * (side * h) ** d
        if est <= share:
            cubes.append((origin, side))
            _split_cube(frac, cells, side, d, m, labels, positions)
            continue
        if side == 1:
            budget_met = False
            forced.append(int(cells[0]))
            continue
        half = side // 2
        for off in np.ndindex(*(2,) * d):
            stack.append((tuple(o + half * b for o, b in zip(origin, off)), half))
    if not budget_met and strict:
        raise ApproximationError("refinement reached single cells before meeting alpha")
    if forced:
        _diffuse_labels(frac, np.sort(np.asarray(forced)), m, d, labels)
    centres = (np.stack(np.unravel_index(np.arange(m ** d), (m,) * d), axis=1) + 0.5) * h
    disp = centres[positions] - centres
    added = float(np.sum(disp ** 2) / (m ** d) / (2.0 * eps))
    return SplitResult(labels, positions, added, cubes, budget_met)


def _split_cube(frac, cells, side, d, m, labels, positions):
    if side == 1:
        row = frac[int(cells[0])]
        labels[cells[0]] = int(row.indices[np.argmax(row.data)])
        return
    grid_idx = cells.reshape((side,) * d)
    cols = grid_idx.reshape(-1, side)
    for col in cols:
        rows = [frac[int(c)] for c in col]
        ids = np.asarray(rows[0].indices)
        b = np.array([[r[0, i] for r in rows] for i in ids])
        b = b / b.sum(axis=0, keepdims=True)
        res = chefatica_interpolate(b)
        y = (np.arange(side) + 0.5) / side
        ends = res.starts + res.lengths
        member = np.clip(np.searchsorted(ends, y, side="right"), 0, res.M - 1)
        target = res.h(1.0, y)
        order = np.argsort(target, kind="stable")
        labels[col] = ids[member]
        positions[col[order]] = col
    return


def _serpentine(cells, m, d):
    coords = np.stack(np.unravel_index(cells, (m,) * d), axis=1)
    if d == 1:
        return cells[np.argsort(coords[:, 0], kind="stable")]
    key_minor = np.where(coords[:, 0] % 2 == 0, coords[:, 1], m - 1 - coords[:, 1])
    return cells[np.lexsort((key_minor, coords[:, 0]))]


def _diffuse_labels(frac, cells, m, d, labels):
    """Error-diffusion rounding of the fractions along a serpentine order."""
    debt = {}
    for c in _serpentine(cells, m, d):
        row = frac[int(c)]
        best, best_val = -1, -math.inf
        for i, f in zip(row.indices, row.data):
            val = debt.get(int(i), 0.0) + f
            if val > best_val:
                best, best_val = int(i), val
        for i, f in zip(row.indices, row.data):
            debt[int(i)] = debt.get(int(i), 0.0) + f
        debt[best] -= 1.0
        labels[c] = best


# ---------------------------------------------------------------------------
# permutation flows


@dataclass(frozen=True, eq=False)
class MPMapFlow:
    """Permutations of refined cells at increasing times 0 = times[0] < ... = 1."""

    grid: DomainGrid
    refine: int
    times: np.ndarray
    maps: np.ndarray

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.int64)
        times = np.asarray(self.times, dtype=float)
        R = self.num_cells
        if maps.ndim != 2 or maps.shape[1] != R or maps.shape[0] != times.size:
            raise InputError("need one permutation of the refined cells per time")
        if times[0] != 0.0 or abs(times[-1] - 1.0) > 1e-12 or np.any(np.diff(times) <= 0):
            raise InputError("times must increase from 0 to 1")
        for j, row in enumerate(maps):
            if np.any(np.sort(row) != np.arange(R)):
                raise InputError(f"map at time index {j} is not a bijection", index=j)
        maps.setflags(write=False)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "times", times)

    @property
    def fine_grid(self):
        return DomainGrid(self.grid.d, self.grid.n * self.refine, 1, self.grid.geometry)

    @property
    def num_cells(self):
        return (self.grid.n * self.refine) ** self.grid.d

    def centres(self):
        return self.fine_grid.centers()

    def displacement(self, a, b):
        fg = self.fine_grid
        return fg.displacement[a, b]

    def action(self):
        fg = self.fine_grid
        total = 0.0
        for j in range(self.times.size - 1):
            sq = fg.sq_dist[self.maps[j], self.maps[j + 1]]
            total += float(np.mean(sq)) / (2.0 * (self.times[j + 1] - self.times[j]))
        return total

    def is_bijective(self):
        R = self.num_cells
        return all(np.array_equal(np.sort(row), np.arange(R)) for row in self.maps)

    def incompressibility_residual(self):
        R = self.num_cells
        rho = np.stack([np.bincount(row, minlength=R) for row in self.maps])
        return float(np.max(np.abs(rho - 1)))

    def endpoint_plan(self):
        """(start cell, end cell) pairs, each with mass 1 / cells."""
        return np.column_stack([self.maps[0], self.maps[-1]])


def refine_deterministic(eta, refine=DEFAULT_REFINE):
    """Exact permutation flow of a deterministic path measure: subcells move rigidly."""
    g = eta.grid
    if not eta.is_deterministic():
        raise InputError("flow is not deterministic")
    n, d, r = g.n, g.d, refine
    live = eta.weights > 0
    path_of = np.full(g.num_cells, -1)
    path_of[eta.labels[live]] = np.flatnonzero(live)
    if np.any(path_of < 0):
        raise InputError("some label carries no path")
    fine = np.arange((n * r) ** d)
    fc = np.stack(np.unravel_index(fine, (n * r,) * d), axis=1)
    coarse = g.index(fc // r)
    offset = fc % r
    maps = []
    for k in range(g.K + 1):
        cc = g.coords(eta.nodes[path_of[coarse], k])
        maps.append(np.ravel_multi_index(tuple((cc * r + offset).T), (n * r,) * d))
    return MPMapFlow(g, r, g.times, np.asarray(maps))


def _snap(points, m, d):
    """Bijective snapping of points to refined cell centres (least squares)."""
    centres = (np.stack(np.unravel_index(np.arange(m ** d), (m,) * d), axis=1) + 0.5) / m
    cost = np.sum((points[:, None, :] - centres[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(points.shape[0], dtype=np.int64)
    out[rows] = cols
    return out


def assemble_flow(eta, mf, split):
    """Permutation flow following the split labels and the corrected trajectories."""
    g = eta.grid
    d, m = mf.d, mf.m
    r = m // g.n
    knots = mf.samples.knots
    pos = mf.samples.positions
    centres = (np.stack(np.unravel_index(np.arange(m ** d), (m,) * d), axis=1) + 0.5) / m
    # particle p sits at cell split.positions[p] at time eps
    at_eps = centres[split.positions]
    physical = transport_points(at_eps, mf.density[1], mf.fluxes[1], m, inverse=True)
    maps = [np.arange(m ** d), np.asarray(split.positions)]
    lab = split.labels
    for j in range(2, knots.size):
        moved = np.clip(physical + pos[lab, j] - pos[lab, 1], 0.0, 1.0)
        corrected = transport_points(moved, mf.density[j], mf.fluxes[j], m)
        maps.append(_snap(corrected, m, d))
    return MPMapFlow(g, r, knots, np.asarray(maps))


def lifted_endpoint_atoms(eta, refine):
    """Atoms (start centre, end centre, mass) of the endpoint plan with rigid subcells."""
    g = eta.grid
    n, d, r = g.n, g.d, refine
    plan = np.zeros((g.num_cells, g.num_cells))
    np.add.at(plan, (eta.nodes[:, 0], eta.nodes[:, -1]), eta.weights)
    m = n * r
    fine = np.arange(m ** d)
    fc = np.stack(np.unravel_index(fine, (m,) * d), axis=1)
    coarse = g.index(fc // r)
    offset = fc % r
    starts, ends, masses = [], [], []
    for a in range(g.num_cells):
        row = plan[a]
        mass_a = row.sum()
        if mass_a <= 0:
            continue
        sub = np.flatnonzero(coarse == a)
        for b in np.flatnonzero(row > 0):
            cb = g.coords(np.array([b]))[0]
            tgt = np.ravel_multi_index(tuple((cb[None, :] * r + offset[sub]).T), (m,) * d)
            starts.append(sub)
            ends.append(tgt)
            masses.append(np.full(sub.size, row[b] / sub.size))
    return np.concatenate(starts), np.concatenate(ends), np.concatenate(masses)


def endpoint_w2(flow, eta):
    """Quadratic Wasserstein distance between the endpoint couplings, at refined resolution."""
    m = flow.grid.n * flow.refine
    d = flow.grid.d
    centres = (np.stack(np.unravel_index(np.arange(m ** d), (m,) * d), axis=1) + 0.5) / m
    R = m ** d
    s1, e1 = flow.maps[0], flow.maps[-1]
    s2, e2, w2 = lifted_endpoint_atoms(eta, flow.refine)
    X = np.concatenate([centres[s1], centres[e1]], axis=1)
    Y = np.concatenate([centres[s2], centres[e2]], axis=1)
    for q in range(1, 9):
        counts = w2 * R * q
        if np.all(np.abs(counts - np.round(counts)) < 1e-9):
            Xq = np.repeat(X, q, axis=0)
            Yq = np.repeat(Y, np.round(counts).astype(np.int64), axis=0)
            cost = np.sum((Xq[:, None, :] - Yq[None, :, :]) ** 2, axis=2)
            rows, cols = linear_sum_assignment(cost)
            return math.sqrt(float(cost[rows, cols].sum()) / (R * q))
    cost = np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=2)
    nx, ny = X.shape[0], Y.shape[0]
    A = sp.vstack([sp.kron(sp.eye(nx), np.ones((1, ny))), sp.kron(np.ones((1, nx)), sp.eye(ny))])
    res = linprog(cost.reshape(-1), A_eq=A, b_eq=np.concatenate([np.full(nx, 1.0 / R), w2]),
                  bounds=(0, None), method="highs")
    return math.sqrt(max(0.0, float(res.fun)))


@dataclass(frozen=True)
class ApproximationReport:
    N: int
    eps: float
    alpha: float
    seed: int
    action: float
    target_action: float
    action_error: float
    endpoint_W2: float
    density_residual: float
    split_action: float
    budget_met: bool
    retries: int


def approximate(eta, N, eps, alpha, seed=0, refine=DEFAULT_REFINE, tol=DENSITY_TOL,
                max_retries=MAX_RETRIES, strict=False):
    """Full pipeline; returns the permutation flow and an error report."""
    g = eta.grid
    target = action_of_measure(eta)
    if eta.is_deterministic():
        flow = refine_deterministic(eta, refine)
        return flow, ApproximationReport(N, eps, alpha, seed, flow.action(), target,
                                         abs(flow.action() - target), endpoint_w2(flow, eta),
                                         0.0, 0.0, True, 0)
    if g.periodic:
        raise InputError("the approximation pipeline needs the unit cube")
    if N < 1 or not eps > 0 or not alpha > 0:
        raise InputError("N, eps and alpha must be positive")
    shrunk = shrink_flow(eta, eps)
    m = g.n * refine
    last = None
    for attempt in range(max_retries + 1):
        samples = sample_paths(shrunk, N, seed + attempt)
        try:
            mf = moser_correct(mollify(samples, eps, m), tol)
        except ApproximationError as exc:
            last = exc
            continue
        split = deterministic_split(mf, alpha, strict=strict)
        flow = assemble_flow(eta, mf, split)
        act = float(flow.action())
        return flow, ApproximationReport(N, eps, alpha, seed + attempt, act, target,
                                         abs(act - target), endpoint_w2(flow, eta),
                                         float(mf.residuals.max()), split.added_action,
                                         split.budget_met, attempt)
    raise ApproximationError(f"no seed in {max_retries + 1} attempts passed the density "
                             f"check: {last}")


def splitting_ring_flow(n=8, K=4):
    """Ring of the central block: every ring cell sends half its mass four cells
    clockwise and half counter-clockwise, one cell per step; all else is still."""
    g = DomainGrid(2, n, K, "cube")
    lo, hi = n // 2 - 2, n // 2 + 1
    ring = [(lo, j) for j in range(lo, hi)] + [(i, hi) for i in range(lo, hi)] + \
        [(hi, j) for j in range(hi, lo, -1)] + [(i, lo) for i in range(hi, lo, -1)]
    ring_idx = [int(g.index(np.array(c))) for c in ring]
    L = len(ring_idx)
    pos = {c: j for j, c in enumerate(ring_idx)}
    labels, nodes, weights = [], [], []
    for a in range(g.num_cells):
        if a in pos:
            j = pos[a]
            for sgn in (1, -1):
                labels.append(a)
                nodes.append([ring_idx[(j + sgn * k) % L] for k in range(K + 1)])
                weights.append(0.5 * g.cell_mass)
        else:
            labels.append(a)
            nodes.append([a] * (K + 1))
            weights.append(g.cell_mass)
    return PathMeasure(g, labels, nodes, weights)
