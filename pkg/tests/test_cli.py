import csv
import json
import subprocess
import sys

import pytest

from coserve.cli import main
from coserve.workload import read


@pytest.fixture
def trace(tmp_path):
    p = tmp_path / "t.csv"
    assert main(["gen-trace", "--seed", "1", "--rate", "3", "--duration-s", "10", "--ft-sequences", "4",
                 "--out", str(p)]) == 0
    return p


def test_gen_trace_is_deterministic(tmp_path, trace):
    other = tmp_path / "u.csv"
    main(["gen-trace", "--seed", "1", "--rate", "3", "--duration-s", "10", "--ft-sequences", "4",
          "--out", str(other)])
    assert trace.read_bytes() == other.read_bytes()
    assert len(read(trace).records) > 4


def test_run_writes_outputs(tmp_path, trace):
    out = tmp_path / "run"
    assert main(["run", "--policy", "coserve", "--trace", str(trace), "--seed", "0", "--out", str(out)]) == 0
    for name in ("metrics.csv", "timeline.csv", "summary.json"):
        assert (out / name).exists()
    s = json.loads((out / "summary.json").read_text())
    assert s["run_config"]["policy"] == "coserve" and s["run_config"]["seed"] == 0


def test_flags_override_config_file(tmp_path, trace):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"policy": "temporal:16", "max_batch": 8, "tpot_slo_ms": 40}))
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--trace", str(trace), "--seed", "2", "--max-batch", "16",
                 "--out", str(out)]) == 0
    rc = json.loads((out / "summary.json").read_text())["run_config"]
    assert rc["policy"] == "temporal:16" and rc["max_batch"] == 16 and rc["tpot_slo_ms"] == 40


def test_compare(tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--policies", "coserve,temporal:64", "--rates", "2,4", "--duration-s", "10",
                 "--ft-sequences", "20", "--seed", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "compare.csv").open()))
    assert [(float(r["rate_rps"]), r["policy"]) for r in rows] == [
        (2, "coserve"), (2, "temporal:64"), (4, "coserve"), (4, "temporal:64")]


def test_compare_rescale(tmp_path, trace):
    out = tmp_path / "cmp"
    assert main(["compare", "--policies", "coserve", "--trace", str(trace), "--rescale", "1,2",
                 "--seed", "1", "--out", str(out)]) == 0
    assert len(list(csv.DictReader((out / "compare.csv").open()))) == 2


@pytest.mark.parametrize("argv", [
    ["run", "--policy", "coserve", "--trace", "/nonexistent.csv", "--seed", "0"],
    ["run", "--policy", "coserve"],
    ["run", "--policy", "nope", "--seed", "0", "--duration-s", "1"],
    ["run", "--seed", "0", "--total-pages", "-3"],
    ["frobnicate"],
    [],
    ["run", "--config", "/nonexistent.json", "--seed", "0"],
    ["gen-trace", "--seed", "0", "--burst-amplitude", "2", "--out", "/dev/null"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_missing_trace_diagnostic(capsys):
    main(["run", "--policy", "coserve", "--trace", "/nonexistent.csv", "--seed", "0"])
    assert "nonexistent.csv" in capsys.readouterr().err


def test_verify_grad(capsys):
    assert main(["verify-grad", "--seqlen", "8", "--trials", "3", "--seed", "0"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_parallelize(tmp_path, capsys):
    out = tmp_path / "c.json"
    assert main(["parallelize", "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())[0]["candidates"]) >= 4


def test_prune(tmp_path, capsys):
    assert main(["prune", "--graph", "mlp", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "plan.json").exists() and (tmp_path / "memory.csv").exists()
    assert "memorized" in capsys.readouterr().out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "coserve", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-trace" in r.stdout
