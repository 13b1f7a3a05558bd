import json
import subprocess
import sys
from importlib import resources

import pytest

from energynet.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_RUNTIME, main
from energynet.sim.presets import load_preset, preset_path, variant


def vectors_path():
    return resources.files("energynet") / "data" / "ep_vectors.jsonl"


def write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_validate_preset(capsys):
    assert main(["validate", str(preset_path("sws0"))]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "OK"


def test_validate_bad_reference(tmp_path, capsys):
    doc = load_preset("sws0")
    doc["topology"]["links"][0]["router_b"] = "ghost"
    assert main(["validate", write(tmp_path, "bad.json", doc)]) == EXIT_INVALID
    assert "topology.links[0].router_b" in capsys.readouterr().err


def test_validate_malformed_json(tmp_path, capsys):
    p = tmp_path / "broken.json"
    p.write_text('{\n  "meta": \n}')
    assert main(["validate", str(p)]) == EXIT_INVALID
    assert "line 3" in capsys.readouterr().err


def test_missing_file_is_io_error(tmp_path):
    assert main(["validate", str(tmp_path / "nope.json")]) == EXIT_IO


def test_simulate_writes_four_files(tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", "--scenario", str(preset_path("sws0")), "--out", str(out)]) == EXIT_OK
    names = sorted(p.name for p in out.iterdir())
    assert names == ["ledger.json", "metrics.json", "telemetry.jsonl", "trace.jsonl"]
    metrics = json.loads((out / "metrics.json").read_text())
    assert "peak_grid_import_w" in metrics
    lines = (out / "trace.jsonl").read_text().splitlines()
    assert len(lines) == load_preset("sws0")["meta"]["ticks"]


def test_simulate_is_byte_stable(tmp_path):
    args = ["simulate", "--scenario", str(preset_path("ring")), "--ticks", "15", "--seed", "3", "--out"]
    assert main(args + [str(tmp_path / "a")]) == EXIT_OK
    assert main(args + [str(tmp_path / "b")]) == EXIT_OK
    for name in ("trace.jsonl", "metrics.json", "ledger.json", "telemetry.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a" / "trace.jsonl").read_bytes().splitlines()) == 15


def test_conservation_fault_exits_3(tmp_path):
    doc = load_preset("sws0")
    doc["meta"]["fault_injection"] = "conservation_leak"
    path = write(tmp_path, "leak.json", doc)
    assert main(["simulate", "--scenario", path, "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_compare_ring_vs_radial(tmp_path):
    out = tmp_path / "cmp"
    rc = main(["compare", "--scenario", str(preset_path("ring")), "--baseline", str(preset_path("radial_baseline")),
               "--out", str(out)])
    assert rc == EXIT_OK
    c = json.loads((out / "comparison.json").read_text())
    assert c["energynet"]["resilience_index"] == 1.0
    assert c["baseline"]["resilience_index"] < 1.0
    assert c["delta"]["resilience_index"] == pytest.approx(1.0 - c["baseline"]["resilience_index"])


def test_compare_without_failures_is_even(tmp_path):
    doc = variant(load_preset("radial_baseline"), failures=[])
    doc["baseline"]["failures"] = []
    path = write(tmp_path, "calm.json", doc)
    ring = variant(load_preset("ring"), failures=[])
    rpath = write(tmp_path, "ring.json", ring)
    assert main(["compare", "--scenario", rpath, "--baseline", path, "--out", str(tmp_path / "o")]) == EXIT_OK
    c = json.loads((tmp_path / "o" / "comparison.json").read_text())
    assert c["energynet"]["resilience_index"] == c["baseline"]["resilience_index"] == 1.0
    assert c["delta"]["unserved_class0_j"] == pytest.approx(0, abs=1e-6)


def test_compare_demand_mismatch(tmp_path):
    rc = main(["compare", "--scenario", str(preset_path("sws0")), "--baseline", str(preset_path("outage")),
               "--out", str(tmp_path / "o")])
    assert rc == EXIT_INVALID


def test_vectors_regenerate_and_check(tmp_path):
    out = tmp_path / "v.jsonl"
    assert main(["vectors", "--out", str(out)]) == EXIT_OK
    assert out.read_bytes() == vectors_path().read_bytes()
    lines = out.read_text().splitlines()
    assert len(lines) >= 20
    assert main(["vectors", "--out", str(out), "--check"]) == EXIT_OK


def test_vectors_tampered_file_fails(tmp_path):
    out = tmp_path / "v.jsonl"
    out.write_bytes(vectors_path().read_bytes().replace(b'"Heartbeat"', b'"HeartBeat"', 1))
    assert main(["vectors", "--out", str(out), "--check"]) == EXIT_INVALID


def test_module_entry_point_and_log_level(tmp_path):
    env = {"ENERGYNET_LOG": "debug", "PATH": ""}
    proc = subprocess.run([sys.executable, "-m", "energynet.cli", "validate", str(preset_path("sws0"))],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and proc.stdout.strip() == "OK"
