from __future__ import annotations

import json
import subprocess
import sys

import pytest

from teemaf.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main


def test_demo_happy_path(tmp_path, capsys):
    out = tmp_path / "trace.txt"
    assert main(["demo", "--seed", "1", "--out", str(out)]) == EXIT_OK
    trace = out.read_text()
    for step in ("step 0", "step 1", "step 2", "step 3", "step 4-5", "step 6", "step 7"):
        assert step in trace
    assert "isAttested=1" in capsys.readouterr().err


def test_demo_tamper_fails(tmp_path, capsys):
    out = tmp_path / "trace.txt"
    assert main(["demo", "--tamper", "--out", str(out)]) == EXIT_FAILURE
    assert "mre-mismatch" in capsys.readouterr().err
    assert "mre-mismatch" in out.read_text()


def test_demo_config_file(tmp_path):
    config = tmp_path / "demo.json"
    config.write_text(json.dumps({"nodes": 3, "interactions": 2}))
    out = tmp_path / "trace.txt"
    assert main(["demo", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert "interaction 2/2" in out.read_text()
    config.write_text(json.dumps({"warp": 9}))
    assert main(["demo", "--config", str(config)]) == EXIT_USAGE


def test_demo_same_seed_identical_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["demo", "--seed", "5", "--nodes", "3", "--out", str(a)])
    main(["demo", "--seed", "5", "--nodes", "3", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_threats_default_pack(tmp_path):
    out = tmp_path / "results.jsonl"
    assert main(["threats", "--out", str(out)]) == EXIT_OK
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 10 and all(r["passed"] for r in rows)


def test_threats_empty_file(tmp_path):
    scenarios = tmp_path / "empty.jsonl"
    scenarios.write_text("")
    out = tmp_path / "results.jsonl"
    assert main(["threats", "--config", str(scenarios), "--out", str(out)]) == EXIT_OK
    assert out.read_text() == ""


def test_threats_malformed_file(tmp_path, capsys):
    scenarios = tmp_path / "bad.jsonl"
    scenarios.write_text('{"kind": "tamper-image"\n')
    assert main(["threats", "--config", str(scenarios)]) == EXIT_USAGE
    assert "bad.jsonl:1" in capsys.readouterr().err


def test_threats_missing_file(tmp_path):
    assert main(["threats", "--config", str(tmp_path / "nope.jsonl")]) == EXIT_USAGE


def test_bench_ra_off_single_cell(tmp_path):
    out = tmp_path / "bench.csv"
    code = main(["bench", "--ra", "off", "--nodes", "2", "--block-time", "5", "--rate", "50", "--tx", "40", "--out", str(out)])
    assert code == EXIT_OK
    header, row = out.read_text().splitlines()
    assert header.startswith("nodes,block_time_s")
    assert row.startswith("2,5,50,off,40,0,") and row.endswith(",")


def test_bench_bad_grid(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"rates": [0]}))
    assert main(["bench", "--config", str(grid)]) == EXIT_USAGE


@pytest.mark.parametrize(
    "argv",
    [[], ["bogus"], ["demo", "--nodes", "0"], ["bench", "--ra", "maybe"], ["bench", "--rate", "x"]],
)
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_module_entry_point(tmp_path):
    out = tmp_path / "t.txt"
    proc = subprocess.run([sys.executable, "-m", "teemaf", "demo", "--seed", "2", "--out", str(out)], capture_output=True)
    assert proc.returncode == 0 and out.stat().st_size > 0
