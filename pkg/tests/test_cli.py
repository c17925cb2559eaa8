import json
import os

import numpy as np
import pytest

from geoflow import cli
from geoflow._io import (
    euler_from_dict, flow_to_dict, maps_from_dict, read_csv, read_flow, write_json,
)
from geoflow.approx import splitting_ring_flow
from geoflow.core import DomainGrid, PathMeasure, action_of_measure
from geoflow.eulerian import edge_action
from test_core import translation_flow

TRANSLATION = {"grid": {"d": 1, "n": 4, "K": 2}, "eta": "identity",
               "gamma": {"map": [2, 3, 0, 1]}, "v_max": 1}


@pytest.fixture
def solved(tmp_path):
    prob = tmp_path / "problem.json"
    write_json(prob, TRANSLATION)
    assert cli.main(["solve", str(prob), "-o", str(tmp_path / "out")]) == 0
    return tmp_path / "out"


def test_solve_writes_bundle(solved):
    diag = json.loads((solved / "diagnostics.json").read_text())
    assert diag["value"] == pytest.approx(0.125, abs=1e-12)
    assert action_of_measure(read_flow(solved / "flow.json")) == pytest.approx(0.125, abs=1e-12)
    header, rows = read_csv(solved / "pressure.csv")
    assert header == ["k", "i0", "value"] and len(rows) == 4
    manifest = json.loads((solved / "manifest.json").read_text())
    assert {"config", "versions"} <= set(manifest)


def test_solve_overrides_and_plan_files(tmp_path):
    plan = tmp_path / "shift.json"
    write_json(plan, {"map": [2, 3, 0, 1]})
    prob = tmp_path / "problem.json"
    write_json(prob, {"grid": {"d": 1, "n": 4, "K": 2}, "eta": "identity", "gamma": "shift.json"})
    code = cli.run({"command": "solve", "input": str(prob), "output": str(tmp_path / "e"),
                    "backend": "entropic", "epsilon": 0.05})
    assert code == 0
    value = json.loads((tmp_path / "e" / "diagnostics.json").read_text())["value"]
    assert 0.125 <= value <= 0.2


def test_solve_rejects_bad_inputs(tmp_path, capsys):
    prob = tmp_path / "problem.json"
    write_json(prob, {**TRANSLATION, "colour": "red"})
    assert cli.run({"command": "solve", "input": str(prob)}) == cli.EXIT_INPUT
    bad = [[0.25, 0.0, 0.0, 0.0], [0.0, 0.25, 0.0, 0.0], [0.0, 0.0, 0.5, 0.0],
           [0.0, 0.0, 0.0, 0.25]]
    write_json(prob, {**TRANSLATION, "gamma": {"matrix": bad}})
    assert cli.run({"command": "solve", "input": str(prob)}) == cli.EXIT_INPUT
    assert "index 2" in capsys.readouterr().err
    write_json(prob, {**TRANSLATION, "v_max": 0})
    assert cli.run({"command": "solve", "input": str(prob),
                    "output": str(tmp_path / "x")}) == cli.EXIT_FAILED


def test_config_schema():
    assert cli.run({"command": "solve", "input": "x", "unknown": 1}) == cli.EXIT_INPUT
    assert cli.run({"command": "approx", "input": "x", "eps": 0.2}) == cli.EXIT_INPUT
    assert cli.run({"command": "launch"}) == cli.EXIT_INPUT
    assert cli.run({"command": "verify", "input": "x", "intervals": "some"}) == cli.EXIT_INPUT


def test_verify_exit_codes(solved, tmp_path):
    out = tmp_path / "report.json"
    code = cli.main(["verify", str(solved / "flow.json"), str(solved / "pressure.csv"),
                     "-o", str(out)])
    assert code == 0
    assert json.loads(out.read_text())["verdict"] is True
    g = DomainGrid(1, 4, 2)
    cells = np.arange(4)
    wiggle = PathMeasure(g, cells, np.stack([cells, (cells + 1) % 4, cells], axis=1),
                         np.full(4, 0.25))
    write_json(tmp_path / "wiggle.json", flow_to_dict(wiggle))
    code = cli.main(["verify", str(tmp_path / "wiggle.json"), str(solved / "pressure.csv"),
                     "-o", str(out), "--intervals", "sample:2", "--seed", "1"])
    assert code == cli.EXIT_REJECTED
    assert json.loads(out.read_text())["verdict"] is False


def test_verify_reports_malformed_pressure_row(solved, tmp_path, capsys):
    bad = tmp_path / "p.csv"
    bad.write_text("k,i0,value\n1,0,0.0\n1,9,0.0\n")
    code = cli.main(["verify", str(solved / "flow.json"), str(bad), "-o",
                     str(tmp_path / "r.json")])
    assert code == cli.EXIT_INPUT
    assert "index 1" in capsys.readouterr().err


def test_cost_and_k_bound(tmp_path):
    flow = tmp_path / "flow.json"
    write_json(flow, flow_to_dict(translation_flow(n=8, K=4, shift=4)))
    p = tmp_path / "p.csv"
    p.write_text("k,i0,value\n" + "".join(f"{k},{x},0.0\n" for k in (1, 2, 3) for x in range(8)))
    out = tmp_path / "cost" / "cost.csv"
    assert cli.main(["cost", "--q", str(p), "--flow", str(flow), "--out", str(out),
                     "--k-bound"]) == 0
    header, rows = read_csv(out)
    assert header == ["x", "y", "value"] and len(rows) == 64
    table = {(int(x), int(y)): float(v) for x, y, v in rows}
    assert table[(0, 4)] == pytest.approx(0.125, abs=1e-15)
    _, kb = read_csv(out.parent / "kbound.csv")
    np.testing.assert_allclose([float(v) for _, v in kb], 0.5, atol=1e-15)
    # grid inferred from the pressure file alone
    assert cli.main(["cost", "--q", str(p), "--interval", "0", "2", "--out",
                     str(tmp_path / "c2.csv")]) == 0
    assert len(read_csv(tmp_path / "c2.csv")[1]) == 64
    assert cli.main(["cost", "--q", str(p), "--interval", "3", "1", "--out",
                     str(tmp_path / "c3.csv")]) == cli.EXIT_INPUT


def test_euler_round_trip(tmp_path):
    eta = translation_flow(n=6, K=3, shift=3)
    write_json(tmp_path / "flow.json", flow_to_dict(eta))
    assert cli.main(["euler", "from", str(tmp_path / "flow.json"), "-o",
                     str(tmp_path / "e.json")]) == 0
    ef = euler_from_dict(json.loads((tmp_path / "e.json").read_text()))
    assert edge_action(ef) == pytest.approx(action_of_measure(eta), abs=1e-14)
    assert cli.main(["euler", "to", str(tmp_path / "e.json"), "-o",
                     str(tmp_path / "back.json")]) == 0
    back = read_flow(tmp_path / "back.json")
    np.testing.assert_array_equal(back.merged().nodes, eta.merged().nodes)


def test_approx_outputs(tmp_path):
    write_json(tmp_path / "ring.json", flow_to_dict(splitting_ring_flow()))
    out = tmp_path / "a" / "maps.json"
    assert cli.main(["approx", str(tmp_path / "ring.json"), "-N", "100", "--eps", "0.1",
                     "-o", str(out)]) == 0
    flow = maps_from_dict(json.loads(out.read_text()))
    assert flow.is_bijective()
    header, rows = read_csv(out.parent / "convergence.csv")
    assert header == ["N", "eps", "action_error", "endpoint_W2"] and len(rows) == 1
    assert cli.main(["approx", str(tmp_path / "ring.json"), "-N", "100", "--eps", "0.1",
                     "--strict", "-o", str(out)]) == cli.EXIT_FAILED


def test_bench_tables(tmp_path):
    out = tmp_path / "b"
    assert cli.main(["bench", "--studies", "entropic", "refinement", "--epsilons",
                     "--sizes", "4", "8", "-o", str(out)]) == 0
    header, rows = read_csv(out / "entropic.csv")
    assert header[0] == "epsilon" and rows == []
    header, rows = read_csv(out / "refinement.csv")
    values = [float(r[2]) for r in rows]
    assert len(values) == 2 and values[1] <= values[0]


def test_threads_flag(tmp_path, monkeypatch):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    prob = tmp_path / "problem.json"
    write_json(prob, TRANSLATION)
    assert cli.main(["--threads", "2", "solve", str(prob), "-o", str(tmp_path / "o")]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "2"
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["threads"] == 2


def test_argument_parsing():
    args = cli.build_parser().parse_args(["cost", "--q", "p.csv", "--interval", "0", "2"])
    cfg = cli.config_from_args(args)
    assert cfg == {"command": "cost", "pressure": "p.csv", "interval": [0, 2],
                   "output": "cost.csv"}
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["bench", "--studies", "nothing"])
