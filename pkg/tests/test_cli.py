import json
from pathlib import Path

import pytest

import oscdamp
from oscdamp.cli import main, EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_DIVERGED
from oscdamp.report import strip_metadata
from conftest import make_two_bus_text


@pytest.fixture()
def case_path(tmp_path):
    p = tmp_path / "two_area.json"
    p.write_text(oscdamp.bundled_case_text())
    return str(p)


def test_pf_command(case_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["pf", "--case", case_path, "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "pf.json").read_text())
    assert abs(doc["results"]["tie_flow_mw"] - 400.0) < 5.0
    assert (out / "pf.csv").read_text().startswith("bus,vm_pu,va_rad,p_pu,q_pu")
    # every CSV number appears in the JSON
    assert len(doc["results"]["buses"]) == 13


def test_modal_command_baseline(case_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["modal", "--case", case_path, "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "modal.json").read_text())
    worst = doc["results"]["min_damping"]
    assert worst["class"] == "inter_area"
    assert 0.4 <= worst["freq_hz"] <= 0.8
    assert 2.0 <= worst["damping_pct"] <= 12.0


def test_modal_single_machine_no_interarea(tmp_path):
    p = tmp_path / "mini.json"
    p.write_text(make_two_bus_text())
    out = tmp_path / "out"
    assert main(["modal", "--case", str(p), "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "modal.json").read_text())
    assert all(m["class"] != "inter_area" for m in doc["results"]["modes"])


def test_report_idempotent(case_path, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    main(["modal", "--case", case_path, "--out", str(out1)])
    main(["modal", "--case", case_path, "--out", str(out2)])
    t1 = strip_metadata((out1 / "modal.json").read_text())
    t2 = strip_metadata((out2 / "modal.json").read_text())
    assert t1 == t2
    assert (out1 / "modes.csv").read_text() == (out2 / "modes.csv").read_text()


def test_input_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pf", "--case", str(bad)]) == EXIT_INPUT
    missing = tmp_path / "missing.json"
    assert main(["pf", "--case", str(missing)]) == EXIT_INPUT
    doc = json.loads(make_two_bus_text())
    doc["governors"][0]["r"] = 0.0
    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps(doc))
    assert main(["pf", "--case", str(invalid)]) == EXIT_INPUT


def test_numeric_error_exit_code(tmp_path):
    doc = json.loads(make_two_bus_text(p_mw=5000.0, q_mvar=2500.0))
    p = tmp_path / "heavy.json"
    p.write_text(json.dumps(doc))
    assert main(["pf", "--case", str(p)]) == EXIT_NUMERIC


def test_design_command(case_path, tmp_path):
    out = tmp_path / "out"
    assert main(["design", "--case", case_path, "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "design.json").read_text())
    syn = doc["results"]["synthesis"]
    assert syn["status"] == "optimal"
    assert syn["closed_loop_max_re"] < 0
    assert len(doc["results"]["controllers"]["gains"]) == 4
    assert (out / "synthesis.dat-s").exists()
    worst = doc["results"]["closed_loop_min_damping"]
    assert worst["damping_pct"] > 15.0


def test_design_subset_structure(case_path, tmp_path):
    out = tmp_path / "out"
    assert main(["design", "--case", case_path, "--out", str(out),
                 "--controllers", "2,3"]) == EXIT_OK
    doc = json.loads((out / "design.json").read_text())
    ctrl = doc["results"]["controllers"]
    gains = {m: g for m, g in zip(ctrl["machine_ids"], ctrl["gains"])}
    assert any(v != 0 for v in gains[2])
    assert any(v != 0 for v in gains[3])
    assert all(v == 0 for v in gains[1])
    assert all(v == 0 for v in gains[4])


def test_design_rejects_governorless(case_path, tmp_path):
    doc = json.loads(Path(case_path).read_text())
    doc["governors"] = [g for g in doc["governors"] if g["machine"] != 4]
    p = Path(case_path).parent / "nogov.json"
    p.write_text(json.dumps(doc))
    assert main(["design", "--case", str(p), "--controllers", "1,4"]) == EXIT_INPUT


def test_simulate_command(case_path, tmp_path):
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps({
        "duration": 2.0, "dt": 0.01,
        "events": [{"time": 0.5, "type": "trip_line",
                    "from": 3, "to": 101, "circuit": 1}],
    }))
    out = tmp_path / "out"
    assert main(["simulate", "--case", case_path, "--scenario", str(scen),
                 "--out", str(out), "--channels", "delta_rel:3:1,xe:1"]) == EXIT_OK
    doc = json.loads((out / "simulate.json").read_text())
    assert not doc["results"]["divergent"]
    lines = (out / "trajectory.csv").read_text().strip().splitlines()
    assert lines[0] == "time,delta_rel:3:1,xe:1"
    assert len(lines) == 202


def test_simulate_empty_events_flat(case_path, tmp_path):
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps({"duration": 1.0, "dt": 0.01, "events": []}))
    out = tmp_path / "out"
    assert main(["simulate", "--case", case_path, "--scenario", str(scen),
                 "--out", str(out), "--channels", "delta_rel:3:1"]) == EXIT_OK
    rows = (out / "trajectory.csv").read_text().strip().splitlines()[1:]
    vals = [float(r.split(",")[1]) for r in rows]
    assert max(vals) - min(vals) < 1e-9


def test_simulate_divergent_exit_code(case_path, tmp_path):
    scen = tmp_path / "scen.json"
    # grossly unstable step size: the run must be reported, not crash
    scen.write_text(json.dumps({
        "duration": 60.0, "dt": 0.5,
        "events": [{"time": 1.0, "type": "step_load", "bus": 14,
                    "dp_mw": 500.0, "dq_mvar": 100.0}],
    }))
    assert main(["simulate", "--case", case_path,
                 "--scenario", str(scen)]) == EXIT_DIVERGED


def test_sweep_degenerate_matches_modal(case_path, tmp_path):
    out = tmp_path / "out"
    assert main(["sweep", "--case", case_path, "--fractions", "1.0",
                 "--out", str(out)]) == EXIT_OK
    sweep = json.loads((out / "sweep.json").read_text())
    assert main(["modal", "--case", case_path, "--out", str(out)]) == EXIT_OK
    modal = json.loads((out / "modal.json").read_text())
    row = sweep["results"]["rows"][0]
    assert row["converged"]
    assert row["zeta_baseline_pct"] == pytest.approx(
        modal["results"]["min_damping"]["damping_pct"], abs=1e-9)


def test_sweep_rows_sorted_and_recorded(case_path, tmp_path):
    out = tmp_path / "out"
    assert main(["sweep", "--case", case_path, "--fractions", "1.05,0.95",
                 "--workers", "2", "--out", str(out)]) == EXIT_OK
    rows = json.loads((out / "sweep.json").read_text())["results"]["rows"]
    assert [r["fraction"] for r in rows] == [0.95, 1.05]
    assert all(r["converged"] for r in rows)


def test_scan_radial_case_all_island(tmp_path):
    p = tmp_path / "radial.json"
    p.write_text(make_two_bus_text())
    out = tmp_path / "out"
    assert main(["scan-n1", "--case", str(p), "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "scan_n1.json").read_text())
    assert doc["results"]["branches_total"] == 1
    assert doc["results"]["branches_converged"] == 0


def test_scan_row_count(case_path, tmp_path):
    out = tmp_path / "out"
    assert main(["scan-n1", "--case", case_path, "--out", str(out),
                 "--workers", "2"]) == EXIT_OK
    doc = json.loads((out / "scan_n1.json").read_text())
    assert doc["results"]["branches_total"] == 14
    assert len(doc["results"]["rows"]) <= 14


def test_export_sdpa_command(case_path, tmp_path):
    out = tmp_path / "out"
    assert main(["export-sdpa", "--case", case_path, "--out", str(out)]) == EXIT_OK
    text = (out / "synthesis.dat-s").read_text()
    from oscdamp.lmi import read_sdpa
    prob = read_sdpa(text)
    assert len(prob.variables) == int(text.splitlines()[0])


def test_modal_with_designed_controllers(case_path, tmp_path):
    out = tmp_path / "out"
    assert main(["design", "--case", case_path, "--out", str(out)]) == EXIT_OK
    assert main(["modal", "--case", case_path, "--out", str(out),
                 "--gains", str(out / "design.json"),
                 "--controllers", "all"]) == EXIT_OK
    modal = json.loads((out / "modal.json").read_text())
    design = json.loads((out / "design.json").read_text())
    closed = modal["results"]["min_damping"]["damping_pct"]
    assert closed == pytest.approx(
        design["results"]["closed_loop_min_damping"]["damping_pct"], abs=1e-6)
    assert closed > 15.0


def test_simulate_with_gains_activation(case_path, tmp_path):
    out = tmp_path / "out"
    assert main(["design", "--case", case_path, "--out", str(out)]) == EXIT_OK
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps({
        "duration": 14.0, "dt": 0.005, "initial_active": "none",
        "events": [
            {"time": 1.0, "type": "trip_line", "from": 3, "to": 101, "circuit": 1},
            {"time": 10.0, "type": "activate_controllers", "machines": "all"},
        ]}))
    assert main(["simulate", "--case", case_path, "--scenario", str(scen),
                 "--out", str(out), "--gains", str(out / "design.json"),
                 "--controllers", "all", "--channels", "u:1,delta_rel:3:1"]) == EXIT_OK
    rows = [l.split(",") for l in
            (out / "trajectory.csv").read_text().strip().splitlines()[1:]]
    t = [float(r[0]) for r in rows]
    u1 = [float(r[1]) for r in rows]
    assert all(v == 0.0 for v, tt in zip(u1, t) if tt < 10.0)
    assert any(v != 0.0 for v, tt in zip(u1, t) if tt > 10.5)
