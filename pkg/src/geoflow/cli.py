"""Command-line entry point: ``geoflow solve|verify|cost|euler|approx|bench``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import jsonschema

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_REJECTED = 2
EXIT_INPUT = 3

COMMANDS = ("solve", "verify", "cost", "euler", "approx", "bench")

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "geoflow run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["command"],
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "input": {"type": "string"},
        "pressure": {"type": "string"},
        "output": {"type": "string"},
        "flow": {"type": ["string", "null"]},
        "geometry": {"enum": ["torus", "cube"]},
        "direction": {"enum": ["from", "to"]},
        "backend": {"enum": ["exact", "entropic"]},
        "selection": {"enum": ["vertex", "central"]},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
        "v_max": {"type": "integer", "minimum": 0},
        "intervals": {"type": "string", "pattern": "^(all|sample:[0-9]+)$"},
        "interval": {"type": "array", "items": {"type": "integer", "minimum": 0},
                     "minItems": 2, "maxItems": 2},
        "k_bound": {"type": "boolean"},
        "N": {"type": "integer", "minimum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.125},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "refine": {"type": "integer", "minimum": 1},
        "strict": {"type": "boolean"},
        "studies": {"type": "array", "items": {"enum": ["entropic", "refinement", "approx"]}},
        "epsilons": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "sizes": {"type": "array", "items": {"type": "integer", "minimum": 2}},
        "schedule": {"type": "array",
                     "items": {"type": "array", "prefixItems": [
                         {"type": "integer", "minimum": 1},
                         {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.125}],
                         "minItems": 2, "maxItems": 2}},
        "seed": {"type": "integer", "minimum": 0},
        "threads": {"type": ["integer", "null"], "minimum": 1},
    },
}

PROBLEM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["grid", "eta", "gamma"],
    "properties": {
        "grid": {"type": "object", "required": ["d", "n", "K"],
                 "properties": {"d": {"type": "integer"}, "n": {"type": "integer"},
                                "K": {"type": "integer"},
                                "geometry": {"enum": ["torus", "cube"]}},
                 "additionalProperties": False},
        "eta": {"type": ["string", "object"]},
        "gamma": {"type": ["string", "object"]},
        "backend": {"enum": ["exact", "entropic"]},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
        "v_max": {"type": "integer", "minimum": 0},
        "selection": {"enum": ["vertex", "central"]},
    },
}


def validate_config(config):
    """Raise InputError unless the configuration matches the schema."""
    from .core import InputError

    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "config"
        raise InputError(f"invalid configuration at {where}: {exc.message}") from exc
    return config


def _set_threads(threads):
    threads = threads or os.environ.get("GEOFLOW_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(int(threads))
    return int(threads) if threads else None


def _versions():
    import numpy
    import scipy

    from . import __version__

    out = {"geoflow": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__,
           "python": sys.version.split()[0]}
    try:
        import cvxpy
        out["cvxpy"] = cvxpy.__version__
    except ImportError:
        pass
    return out


def _manifest(config, inputs, outputs, directory):
    from ._io import sha256, write_json

    data = {
        "command": config["command"],
        "config": {k: v for k, v in sorted(config.items()) if k not in ("input", "pressure",
                                                                         "output", "flow")},
        "inputs": {Path(p).name: sha256(p) for p in inputs},
        "outputs": {Path(p).name: sha256(p) for p in outputs},
        "seed": config.get("seed", 0),
        "threads": config.get("threads"),
        "versions": _versions(),
    }
    write_json(Path(directory) / "manifest.json", data)


# commands -----------------------------------------------------------------


def _cmd_solve(cfg):
    from ._io import dumps, flow_to_dict, plan_from_spec, read_json, write_pressure
    from .core import DomainGrid, InputError
    from .solver import GeodesicProblem, solve

    src = Path(cfg["input"])
    data = read_json(src)
    try:
        jsonschema.validate(data, PROBLEM_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise InputError(f"invalid problem file: {exc.message}") from exc
    grid = DomainGrid.from_dict(data["grid"])
    eta = plan_from_spec(data["eta"], grid, src.parent)
    gamma = plan_from_spec(data["gamma"], grid, src.parent)

    def pick(key, default):
        return cfg.get(key, data.get(key, default))

    problem = GeodesicProblem(grid, eta, gamma, backend=pick("backend", "exact"),
                              epsilon=pick("epsilon", 1e-2), tol=pick("tol", 1e-9),
                              max_iter=pick("max_iter", 200000), cap=pick("v_max", 2),
                              selection=pick("selection", "vertex"))
    sol = solve(problem)
    out = Path(cfg.get("output", "."))
    out.mkdir(parents=True, exist_ok=True)
    (out / "flow.json").write_text(dumps(flow_to_dict(sol.flow)))
    write_pressure(out / "pressure.csv", sol.pressure)
    diag = {"value": sol.value, **{k: v for k, v in sol.diagnostics.items()}}
    (out / "diagnostics.json").write_text(dumps(_plain(diag)))
    _manifest(cfg, [src], [out / "flow.json", out / "pressure.csv", out / "diagnostics.json"],
              out)
    print(f"value {sol.value!r}")
    return EXIT_OK


def _plain(obj):
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _cmd_verify(cfg):
    from ._io import dumps, read_flow, read_pressure
    from .certificates import certify, parse_intervals

    eta = read_flow(cfg["input"])
    q = read_pressure(cfg["pressure"], eta.grid)
    intervals = parse_intervals(cfg.get("intervals", "all"), eta.grid.K, cfg.get("seed", 0))
    report = certify(eta, q, tol=cfg.get("tol", 1e-7), intervals=intervals,
                     cap=cfg.get("v_max", 2))
    out = Path(cfg.get("output", "report.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps(_plain(report.to_dict())))
    _manifest(cfg, [cfg["input"], cfg["pressure"]], [out], out.parent)
    print("certified" if report.verdict else "rejected")
    return EXIT_OK if report.verdict else EXIT_REJECTED


def _cmd_cost(cfg):
    import numpy as np

    from ._io import infer_grid, read_flow, read_pressure, write_csv
    from .costs import dp_cost, k_bound
    from .core import InputError

    if cfg.get("flow"):
        grid = read_flow(cfg["flow"]).grid
    else:
        grid = infer_grid(cfg["pressure"], cfg.get("geometry", "torus"))
    q = read_pressure(cfg["pressure"], grid)
    s, t = cfg.get("interval", [0, grid.K])
    if not 0 <= s < t <= grid.K:
        raise InputError(f"interval ({s}, {t}) is outside 0..{grid.K}")
    cap = cfg.get("v_max", 2)
    C = dp_cost(grid, q, s, t, cap).dense()
    out = Path(cfg.get("output", "cost.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    N = grid.num_cells
    write_csv(out, ["x", "y", "value"],
              [[x, y, float(C[x, y])] for x in range(N) for y in range(N)])
    outputs = [out]
    if cfg.get("k_bound"):
        kb = k_bound(grid, q, s, t, cap)
        kpath = out.parent / "kbound.csv"
        write_csv(kpath, ["cell", "value"], [[x, float(v)] for x, v in enumerate(np.asarray(kb))])
        outputs.append(kpath)
    inputs = [cfg["pressure"]] + ([cfg["flow"]] if cfg.get("flow") else [])
    _manifest(cfg, inputs, outputs, out.parent)
    return EXIT_OK


def _cmd_euler(cfg):
    from ._io import dumps, euler_from_dict, euler_to_dict, flow_to_dict, read_flow, read_json
    from .eulerian import from_path_measure, to_path_measure

    if cfg["direction"] == "from":
        eta = read_flow(cfg["input"], strict=False)
        payload = euler_to_dict(from_path_measure(eta))
        default = "euler.json"
    else:
        ef = euler_from_dict(read_json(cfg["input"]))
        payload = flow_to_dict(to_path_measure(ef))
        default = "flow.json"
    out = Path(cfg.get("output", default))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps(payload))
    _manifest(cfg, [cfg["input"]], [out], out.parent)
    return EXIT_OK


def _cmd_approx(cfg):
    from ._io import dumps, maps_to_dict, read_flow, write_csv
    from .approx import DEFAULT_REFINE, approximate

    eta = read_flow(cfg["input"])
    flow, rep = approximate(eta, cfg.get("N", 1000), cfg.get("eps", 0.05),
                            cfg.get("alpha", 0.05), seed=cfg.get("seed", 0),
                            refine=cfg.get("refine", DEFAULT_REFINE),
                            strict=cfg.get("strict", False))
    out = Path(cfg.get("output", "maps.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps(maps_to_dict(flow)))
    conv = out.parent / "convergence.csv"
    write_csv(conv, ["N", "eps", "action_error", "endpoint_W2"],
              [[rep.N, float(rep.eps), float(rep.action_error), float(rep.endpoint_W2)]])
    _manifest(cfg, [cfg["input"]], [out, conv], out.parent)
    print(f"action error {rep.action_error!r}, endpoint W2 {rep.endpoint_W2!r}")
    return EXIT_OK


def reflection_problem(n, K, backend="exact", epsilon=1e-2, tol=1e-9, selection="vertex"):
    """Torus T^1 with n cells: identity to the reflection x -> -x."""
    import numpy as np

    from .core import DomainGrid, TransportPlan, plan_of_map
    from .solver import GeodesicProblem

    g = DomainGrid(1, n, K)
    return GeodesicProblem(g, TransportPlan.identity(g), plan_of_map(g, (-np.arange(n)) % n),
                           backend=backend, epsilon=epsilon, tol=tol, selection=selection)


def bench_tables(cfg):
    """The benchmark studies as {name: (header, rows)}."""
    from .approx import approximate, splitting_ring_flow
    from .solver import solve_entropic, solve_exact

    studies = cfg.get("studies", ["entropic", "refinement", "approx"])
    tables = {}
    if "entropic" in studies:
        lp = solve_exact(reflection_problem(4, 2)).value
        rows = []
        for eps in cfg.get("epsilons", [1e-1, 1e-2, 1e-3]):
            sol = solve_entropic(reflection_problem(4, 2, "entropic", eps, cfg.get("tol", 1e-13)))
            rows.append([float(eps), sol.value, lp, (sol.value - lp) / lp,
                         float(sol.diagnostics["marginal_error"])])
        tables["entropic"] = (["epsilon", "value", "lp_value", "relative_gap",
                               "marginal_error"], rows)
    if "refinement" in studies:
        rows = []
        for n in cfg.get("sizes", [4, 8]):
            K = max(2, n // 2)
            rows.append([n, K, solve_exact(reflection_problem(n, K)).value])
        tables["refinement"] = (["n", "K", "value"], rows)
    if "approx" in studies:
        eta = splitting_ring_flow()
        rows = []
        for N, eps in cfg.get("schedule", [[100, 0.1], [1000, 0.05], [10000, 0.025]]):
            _, rep = approximate(eta, int(N), float(eps), cfg.get("alpha", 0.05),
                                 seed=cfg.get("seed", 0))
            rows.append([rep.N, float(rep.eps), rep.action_error, rep.endpoint_W2])
        tables["approx"] = (["N", "eps", "action_error", "endpoint_W2"], rows)
    return tables


def _cmd_bench(cfg):
    from ._io import write_csv

    out = Path(cfg.get("output", "."))
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (header, rows) in bench_tables(cfg).items():
        path = out / f"{name}.csv"
        write_csv(path, header, rows)
        written.append(path)
    _manifest(cfg, [], written, out)
    return EXIT_OK


HANDLERS = {"solve": _cmd_solve, "verify": _cmd_verify, "cost": _cmd_cost,
            "euler": _cmd_euler, "approx": _cmd_approx, "bench": _cmd_bench}


def run(config):
    """Validate a configuration, execute it and return the process exit code."""
    from .approx import ApproximationError
    from .core import InfeasibleError, InputError, SolverError

    try:
        validate_config(config)
        config = dict(config)
        config["threads"] = _set_threads(config.get("threads"))
        return HANDLERS[config["command"]](config)
    except InputError as exc:
        where = f" (index {exc.index})" if getattr(exc, "index", None) is not None else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_INPUT
    except (InfeasibleError, SolverError, ApproximationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


def build_parser():
    p = argparse.ArgumentParser(prog="geoflow", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for numerical libraries (default: GEOFLOW_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve a geodesic problem file")
    s.add_argument("input")
    s.add_argument("-o", "--output", default=".")
    s.add_argument("--backend", choices=["exact", "entropic"])
    s.add_argument("--epsilon", type=float)
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iter", dest="max_iter", type=int)
    s.add_argument("--v-max", dest="v_max", type=int)
    s.add_argument("--selection", choices=["vertex", "central"])

    v = sub.add_parser("verify", help="certify a flow against a pressure")
    v.add_argument("input")
    v.add_argument("pressure")
    v.add_argument("--tol", type=float, default=1e-7)
    v.add_argument("--intervals", default="all")
    v.add_argument("--v-max", dest="v_max", type=int)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("-o", "--output", default="report.json")

    c = sub.add_parser("cost", help="connection cost matrix of a pressure")
    c.add_argument("--q", dest="pressure", required=True)
    c.add_argument("--interval", nargs=2, type=int, metavar=("S", "T"))
    c.add_argument("--out", "-o", dest="output", default="cost.csv")
    c.add_argument("--k-bound", dest="k_bound", action="store_true")
    c.add_argument("--flow", help="take the grid from this flow file")
    c.add_argument("--geometry", choices=["torus", "cube"])
    c.add_argument("--v-max", dest="v_max", type=int)

    e = sub.add_parser("euler", help="convert between path and Eulerian descriptions")
    e.add_argument("direction", choices=["from", "to"])
    e.add_argument("input")
    e.add_argument("-o", "--output")

    a = sub.add_parser("approx", help="approximate a flow by permutation flows")
    a.add_argument("input")
    a.add_argument("-N", type=int, default=1000)
    a.add_argument("--eps", type=float, default=0.05)
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--refine", type=int)
    a.add_argument("--strict", action="store_true")
    a.add_argument("-o", "--output", default="maps.json")

    b = sub.add_parser("bench", help="emit benchmark tables")
    b.add_argument("--studies", nargs="*", choices=["entropic", "refinement", "approx"])
    b.add_argument("--epsilons", nargs="*", type=float)
    b.add_argument("--sizes", nargs="*", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--output", default=".")
    return p


def config_from_args(args):
    cfg = {k: v for k, v in vars(args).items() if v is not None and v is not False}
    if "interval" in cfg:
        cfg["interval"] = list(cfg["interval"])
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    return run(config_from_args(args))


if __name__ == "__main__":
    sys.exit(main())
