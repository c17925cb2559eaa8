"""JSON and CSV readers and writers for flows, plans, fields and tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from .core import DomainGrid, InputError, PathMeasure, TransportPlan, plan_of_map


def dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InputError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _num(x):
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise InputError(f"no such file: {path}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InputError(f"{path}: empty table")
    return rows[0], rows[1:]


# flows --------------------------------------------------------------------


def flow_to_dict(eta):
    return {
        "grid": eta.grid.to_dict(),
        "paths": [{"label": int(a), "nodes": [int(v) for v in nodes], "weight": float(w)}
                  for a, nodes, w in zip(eta.labels, eta.nodes, eta.weights)],
    }


def flow_from_dict(data, strict=True):
    try:
        grid = DomainGrid.from_dict(data["grid"])
        paths = data["paths"]
        labels = [p["label"] for p in paths]
        nodes = [p["nodes"] for p in paths]
        weights = [p["weight"] for p in paths]
    except (KeyError, TypeError) as exc:
        raise InputError(f"bad flow file: missing {exc}") from exc
    if not paths:
        raise InputError("flow has no paths")
    if any(len(v) != grid.K + 1 for v in nodes):
        bad = next(i for i, v in enumerate(nodes) if len(v) != grid.K + 1)
        raise InputError(f"path {bad} does not have {grid.K + 1} nodes", index=bad)
    return PathMeasure(grid, labels, nodes, weights, strict=strict)


def read_flow(path, strict=True):
    return flow_from_dict(read_json(path), strict)


# plans --------------------------------------------------------------------


def plan_to_dict(plan):
    return {"grid": plan.grid.to_dict(), "matrix": np.asarray(plan.matrix).tolist()}


def plan_from_spec(spec, grid, base=None):
    """'identity', a plan file path, {"map": perm} or {"matrix": rows}."""
    if isinstance(spec, str):
        if spec == "identity":
            return TransportPlan.identity(grid)
        path = Path(spec)
        if base is not None and not path.is_absolute():
            path = Path(base) / path
        data = read_json(path)
        if "grid" in data and DomainGrid.from_dict(data["grid"]).num_cells != grid.num_cells:
            raise InputError(f"{spec}: plan grid does not match the problem grid")
        return plan_from_spec({k: v for k, v in data.items() if k != "grid"}, grid, base)
    if isinstance(spec, dict) and "map" in spec:
        return plan_of_map(grid, np.asarray(spec["map"], dtype=np.int64))
    if isinstance(spec, dict) and "matrix" in spec:
        m = np.asarray(spec["matrix"], dtype=float)
        if m.shape != (grid.num_cells, grid.num_cells):
            raise InputError(f"plan must be {grid.num_cells}x{grid.num_cells}, got {m.shape}")
        if "mass" in spec and spec["mass"] == "probability":
            m = m * grid.cell_mass
        return TransportPlan(grid, m)
    raise InputError("plan must be 'identity', a file name, {'map': ...} or {'matrix': ...}")


# fields -------------------------------------------------------------------


def _index_header(d):
    return [f"i{j}" for j in range(d)]


def write_pressure(path, field):
    g = field.grid
    coords = g.coords(np.arange(g.num_cells))
    rows = []
    for k in range(1, g.K):
        for x in range(g.num_cells):
            rows.append([k, *[int(c) for c in coords[x]], float(field.values[k - 1, x])])
    write_csv(path, ["k", *_index_header(g.d), "value"], rows)


def read_pressure(path, grid):
    """Pressure CSV on the interior nodes of ``grid``; missing entries are zero."""
    from .solver import PressureField

    header, rows = read_csv(path)
    want = ["k", *_index_header(grid.d), "value"]
    if header != want:
        raise InputError(f"{path}: header {header} does not match {want}")
    vals = np.zeros((max(grid.K - 1, 0), grid.num_cells))
    for i, row in enumerate(rows):
        try:
            k = int(row[0])
            idx = [int(c) for c in row[1:-1]]
            v = float(row[-1])
        except (ValueError, IndexError) as exc:
            raise InputError(f"{path}: bad row {i}", index=i) from exc
        if not 1 <= k <= grid.K - 1 or any(not 0 <= c < grid.n for c in idx):
            raise InputError(f"{path}: row {i} is outside the grid", index=i)
        if not math.isfinite(v):
            raise InputError(f"{path}: row {i} is not finite", index=i)
        vals[k - 1, grid.index(np.array(idx))] = v
    return PressureField.from_raw(grid, vals)


def infer_grid(path, geometry="torus"):
    """Grid implied by a pressure CSV: d from the index columns, n and K from the maxima."""
    header, rows = read_csv(path)
    d = len(header) - 2
    if d not in (1, 2) or not rows:
        raise InputError(f"{path}: cannot infer a grid")
    ks = [int(r[0]) for r in rows]
    n = max(int(c) for r in rows for c in r[1:-1]) + 1
    return DomainGrid(d, n, max(ks) + 1, geometry)


# Eulerian flows -----------------------------------------------------------


def euler_to_dict(ef):
    return {
        "grid": ef.grid.to_dict(),
        "label_mass": [float(v) for v in ef.label_mass],
        "steps": [{"label": e.label.tolist(), "src": e.src.tolist(), "dst": e.dst.tolist(),
                   "mass": [float(v) for v in e.mass]} for e in ef.edges],
    }


def euler_from_dict(data):
    from .eulerian import EulerianFlow, StepEdges

    try:
        grid = DomainGrid.from_dict(data["grid"])
        steps = [StepEdges(s["label"], s["src"], s["dst"], s["mass"]) for s in data["steps"]]
        lm = data.get("label_mass")
    except (KeyError, TypeError) as exc:
        raise InputError(f"bad euler file: missing {exc}") from exc
    return EulerianFlow(grid, tuple(steps), lm)


# permutation flows --------------------------------------------------------


def maps_to_dict(flow):
    return {
        "grid": flow.grid.to_dict(),
        "refine": int(flow.refine),
        "times": [float(t) for t in flow.times],
        "maps": np.asarray(flow.maps).tolist(),
    }


def maps_from_dict(data):
    from .approx import MPMapFlow

    try:
        return MPMapFlow(DomainGrid.from_dict(data["grid"]), int(data["refine"]),
                         data["times"], data["maps"])
    except (KeyError, TypeError) as exc:
        raise InputError(f"bad maps file: missing {exc}") from exc
