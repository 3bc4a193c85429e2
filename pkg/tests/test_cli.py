import json
import shutil
import subprocess
import sys

import pytest

from routesql.cli import STAGES, main


@pytest.fixture
def demo(demo_dir, tmp_path):
    """Private copy of the demo corpus so runs do not leak between tests."""
    root = tmp_path / "demo"
    shutil.copytree(demo_dir, root, ignore=shutil.ignore_patterns("runs"))
    return root


def _run(demo, *args):
    return main([*args, "--config", str(demo / "config.json")])


def _tree(path):
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_missing_artifact_names_producer(demo, capsys):
    assert _run(demo, "prepare-data") == 0
    assert _run(demo, "evaluate") == 1
    err = capsys.readouterr().err
    assert "[evaluate]" in err and "candidates.jsonl" in err and "`routesql generate-sql`" in err


def test_missing_first_stage(demo, capsys):
    assert _run(demo, "train-router", "--run-id", "empty") == 1
    assert "`routesql prepare-data`" in capsys.readouterr().err


def test_train_router_twice_is_byte_identical(demo):
    for stage in STAGES[:3]:
        assert _run(demo, stage) == 0
    model = demo / "runs" / "demo" / "train-router" / "model.json"
    assert _run(demo, "train-router") == 0
    first = model.read_bytes()
    assert _run(demo, "train-router") == 0
    assert model.read_bytes() == first


def test_run_all_matches_sequential_commands(demo):
    assert _run(demo, "run-all", "--run-id", "together", "--markdown") == 0
    for stage in STAGES:
        extra = ["--markdown"] if stage == "evaluate" else []
        assert _run(demo, stage, "--run-id", "apart", *extra) == 0
    runs = demo / "runs"
    together, apart = _tree(runs / "together"), _tree(runs / "apart")
    assert sorted(together) == sorted(apart)
    assert together == apart


def test_report_fields_populated(demo):
    assert _run(demo, "run-all", "--markdown") == 0
    out = demo / "runs" / "demo" / "evaluate"
    report = json.loads((out / "report.json").read_text())
    a = report["aggregates"]
    for key in ("n", "top_k", "ex_before", "em_before", "ex_after", "em_after", "ex_delta", "em_delta",
                "map", "ndcg", "p_at_1", "r_at_1", "within_top_k"):
        assert a[key] is not None, key
    assert report["has_correction"] and report["by_difficulty"]
    assert a["ex_delta"] > 0
    assert (out / "report.csv").exists() and "## Routing" in (out / "report.md").read_text()


def test_config_errors(demo, tmp_path, capsys):
    assert main(["evaluate", "--config", str(tmp_path / "nope.json")]) == 2
    cfg = json.loads((demo / "config.json").read_text())
    del cfg["split"]["seed"]
    (demo / "bad.json").write_text(json.dumps(cfg))
    assert main(["prepare-data", "--config", str(demo / "bad.json")]) == 2
    cfg["split"]["seed"] = 1
    cfg["tables"] = "missing.json"
    (demo / "bad.json").write_text(json.dumps(cfg))
    assert main(["prepare-data", "--config", str(demo / "bad.json")]) == 2
    err = capsys.readouterr().err
    assert "split.seed" in err and "missing.json" in err


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "routesql.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "run-all" in out.stdout
