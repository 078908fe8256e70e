import csv
import json

import pytest

from porch.cli import main
from porch.runner import METRICS_HEADER


def run_cli(*args):
    return main(["run", *map(str, args)])


def test_ten_cycles(tmp_path, capsys):
    chain, metrics, trace = tmp_path / "c.json", tmp_path / "m.csv", tmp_path / "t.jsonl"
    code = run_cli("--cycles", 10, "--chain-out", chain, "--metrics-out", metrics, "--trace-out", trace)
    assert code == 0
    assert "10/10 cycles committed" in capsys.readouterr().out
    doc = json.loads(chain.read_text())
    assert len(doc["blocks"]) == 11
    rows = list(csv.DictReader(metrics.open()))
    assert list(rows[0]) == METRICS_HEADER and len(rows) == 10
    for r in rows:
        assert r["outcome"] == "Committed"
        assert 0 < float(r["selection_fraction"]) < 1
        assert int(r["total_ms"]) == sum(int(r[k]) for k in METRICS_HEADER[2:8])
    assert all(json.loads(line)["kind"] for line in trace.read_text().splitlines())


@pytest.mark.parametrize("node", ["CC", "DA", "R1", "R4"])
def test_drop_node_exits_cleanly(node, tmp_path):
    metrics = tmp_path / "m.csv"
    assert run_cli("--cycles", 2, "--drop", node, "1.0", "--metrics-out", metrics) == 0
    assert all(r["outcome"] == "Aborted(Timeout)" for r in csv.DictReader(metrics.open()))


def test_report(tmp_path, capsys):
    metrics = tmp_path / "m.csv"
    run_cli("--cycles", 4, "--metrics-out", metrics)
    capsys.readouterr()
    assert main(["report", str(metrics)]) == 0
    out = capsys.readouterr().out
    assert "commit rate:             1.000" in out
    assert "reference prototype: ~0.75" in out


@pytest.mark.parametrize("content", ["", "a,b\n", ",".join(METRICS_HEADER) + "\n"])
def test_report_rejects_bad_files(tmp_path, content, capsys):
    path = tmp_path / "m.csv"
    path.write_text(content)
    assert main(["report", str(path)]) == 2
    assert "error" in capsys.readouterr().err


def test_seed_from_environment(tmp_path, monkeypatch):
    a, b, c = tmp_path / "a.json", tmp_path / "b.json", tmp_path / "c.json"
    monkeypatch.setenv("PORCH_SEED", "17")
    run_cli("--cycles", 3, "--chain-out", a)
    run_cli("--cycles", 3, "--seed", 99, "--chain-out", b)
    monkeypatch.delenv("PORCH_SEED")
    run_cli("--cycles", 3, "--seed", 17, "--chain-out", c)
    assert a.read_text() == b.read_text() == c.read_text()


@pytest.mark.parametrize("args", [
    ["--relays", "1"],
    ["--cycles", "0"],
    ["--k-eligible", "9"],
    ["--challenge-lo", "5", "--challenge-hi", "2"],
    ["--drop", "R9", "0.5"],
    ["--drop", "R1", "2"],
    ["--hash-mode", "triple"],
])
def test_config_errors_exit_2(args):
    with pytest.raises(SystemExit) as err:
        main(["run", *args])
    assert err.value.code == 2


def test_missing_dataset_exits_2(tmp_path):
    assert run_cli("--dataset", tmp_path / "nope.csv") == 2


def test_double_hash_mode(tmp_path):
    chain = tmp_path / "c.json"
    assert run_cli("--cycles", 2, "--hash-mode", "double", "--chain-out", chain) == 0
    assert json.loads(chain.read_text())["hash_mode"] == "double"
