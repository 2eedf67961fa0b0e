import json
import subprocess
import sys

import pytest

from hymik import cli
from hymik.cli import main, resolve_threads


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    g = d / "p5.graph"
    g.write_text("5\n0 1 1\n1 2 0 2\n2 2 1 3\n3 2 2 4\n4 1 3\n")
    csv = d / "sim.csv"
    assert main(["simulate", "--graph", str(g), "--nt", "6", "--replicates", "3", "--seed", "4",
                 "--out", str(csv)]) == 0
    return d, g, csv


def _fit(small_data, out, *extra):
    d, g, csv = small_data
    return main(["fit", "--data", str(csv), "--graph", str(g), "--constraints", "gc",
                 "--out", str(d / out), *extra])


def test_simulate_writes_counts_and_truth(small_data):
    d, _, csv = small_data
    lines = csv.read_text().splitlines()
    assert lines[0] == "time,region,count,exposure,replicate"
    assert len(lines) == 1 + 3 * 30
    truth = json.loads((d / "sim.truth.json").read_text())
    assert truth["seed"] == 4 and len(truth["delta"]) == 30


@pytest.mark.parametrize("method", ["kriging", "hymik"])
def test_fit_report_structure(small_data, method):
    d = small_data[0]
    assert _fit(small_data, f"{method}.json", "--method", method) == 0
    doc = json.loads((d / f"{method}.json").read_text())
    assert doc["status"] == "ok" and doc["method"] == method
    assert [h["name"] for h in doc["hyper"]] == ["tau_alpha", "tau_gamma", "tau_delta"]
    assert doc["latent"]["blocks"]["delta"] == [12, 42]
    assert len(doc["latent"]["means"]) == 42
    assert doc["constraint_residual"] <= cli.CONSTRAINT_TOL
    t = json.loads((d / f"{method}.timings.json").read_text())
    assert t["seconds"]["median"] > 0


def test_reports_are_byte_identical(small_data):
    d = small_data[0]
    assert _fit(small_data, "a.json") == 0
    assert _fit(small_data, "b.json") == 0
    assert _fit(small_data, "c.json", "--threads", "3") == 0
    a = (d / "a.json").read_bytes()
    assert a == (d / "b.json").read_bytes()
    assert a.replace(b"c.json", b"a.json") == (d / "c.json").read_bytes().replace(b"c.json", b"a.json")


def test_compare_writes_pairs(small_data):
    d = small_data[0]
    assert _fit(small_data, "cmp.json", "--compare") == 0
    doc = json.loads((d / "cmp.json").read_text())
    assert doc["comparison"]["delta_pearson"] > 0.999
    header = (d / doc["comparison"]["pairs"]).read_text().splitlines()[0]
    assert header == "block,index,kriging_mean,hymik_mean,kriging_sd,hymik_sd"
    assert "computational_factor" in json.loads((d / "cmp.timings.json").read_text())


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv(cli.THREADS_ENV, raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "4")
    assert resolve_threads(None) == 4
    assert resolve_threads(2) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    with pytest.raises(cli.UsageError):
        resolve_threads(None)
    with pytest.raises(cli.UsageError):
        resolve_threads(0)


def test_bad_thread_env_exits_1(small_data, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert _fit(small_data, "env.json") == 1
    doc = json.loads((small_data[0] / "env.json").read_text())
    assert doc["status"] == "error" and doc["error"]["type"] == "UsageError"


def test_input_errors_exit_1(small_data, tmp_path):
    d, g, csv = small_data
    assert main(["fit", "--data", str(tmp_path / "none.csv"), "--graph", str(g),
                 "--out", str(tmp_path / "o.json")]) == 1
    bad = tmp_path / "neg.csv"
    bad.write_text("time,region,count,exposure\n1,0,-3,1\n")
    assert main(["fit", "--data", str(bad), "--graph", str(g), "--out", str(tmp_path / "o.json")]) == 1
    with pytest.raises(SystemExit) as e:
        main(["fit", "--data", str(csv)])
    assert e.value.code == 1


def test_fit_error_exits_2(small_data, tmp_path):
    d, g, csv = small_data
    # sum-to-zero interaction constraints with a first-order walk cannot be split
    rc = main(["fit", "--data", str(csv), "--graph", str(g), "--constraints", "sc", "--order", "1",
               "--method", "hymik", "--out", str(tmp_path / "e.json")])
    assert rc == 2
    assert json.loads((tmp_path / "e.json").read_text())["error"]["type"] == "PolicyInfeasible"


def test_constraint_violation_exits_3(small_data, monkeypatch):
    monkeypatch.setattr(cli, "CONSTRAINT_TOL", -1.0)
    assert _fit(small_data, "strict.json", "--method", "kriging") == 3
    assert json.loads((small_data[0] / "strict.json").read_text())["status"] == "not_converged"


def test_console_entry_point(small_data, tmp_path):
    r = subprocess.run([sys.executable, "-m", "hymik.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("hymik ")
