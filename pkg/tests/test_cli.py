import csv
import json
import shutil

import pytest

from cldistill.cli import RUN_FILES, main


@pytest.fixture(scope="module")
def fixtures(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixtures")
    assert main(["make-fixtures", "--out", str(out)]) == 0
    return out


def test_make_fixtures_contents(fixtures):
    for name in ("tiny.json", "benchmark.json", "cache.json", "idx.json", "student.json", "teacher.ckpt"):
        assert (fixtures / name).exists()


def test_run_writes_all_outputs(fixtures, tmp_path):
    assert main(["run", "--config", str(fixtures / "tiny.json"), "--out", str(tmp_path)]) == 0
    for name in RUN_FILES + ("model.ckpt", "exemplars/exemplars.json"):
        assert (tmp_path / name).exists()
    lines = (tmp_path / "runlog.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["type"] == "config" and json.loads(lines[-1])["type"] == "summary"
    rows = list(csv.DictReader(open(tmp_path / "curves.csv")))
    assert {r["kind"] for r in rows} >= {"seen-acc", "task-acc", "flatness", "train-loss"}


@pytest.mark.parametrize("name", ["cache.json", "idx.json"])
def test_run_on_file_datasets(fixtures, tmp_path, name):
    assert main(["run", "--config", str(fixtures / name), "--out", str(tmp_path)]) == 0


def test_override_recorded(fixtures, tmp_path):
    code = main(["run", "--config", str(fixtures / "tiny.json"), "--out", str(tmp_path),
                 "--override", "distill.variant=gkd"])
    assert code == 0
    resolved = json.loads((tmp_path / "resolved-config.json").read_text())
    assert resolved["distill"]["variant"] == "gkd"


def test_missing_dataset_is_config_error(fixtures, tmp_path, capsys):
    code = main(["run", "--config", str(fixtures / "idx.json"), "--out", str(tmp_path),
                 "--override", "dataset.train-images=/nonexistent/file"])
    assert code == 2
    assert "dataset.train-images" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


def test_validate_config(fixtures, capsys):
    assert main(["validate-config", "--config", str(fixtures / "tiny.json")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["momentum"] == 0.9
    assert main(["validate-config", "--config", str(fixtures / "tiny.json"), "--override", "num-increments=3"]) == 2
    assert "num-increments" in capsys.readouterr().err
    assert main(["validate-config", "--config", str(fixtures / "tiny.json"), "--override", "distill.temperature=0"]) == 2


def test_unknown_flag_is_usage_error(fixtures, capsys):
    assert main(["run", "--config", str(fixtures / "tiny.json"), "--out", "x", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_log_level(fixtures, monkeypatch):
    monkeypatch.setenv("CLDISTILL_LOG", "loud")
    assert main(["validate-config", "--config", str(fixtures / "tiny.json")]) == 2


def test_sweep_grid_and_resume(fixtures, tmp_path):
    args = ["sweep", "--config", str(fixtures / "tiny.json"), "--out", str(tmp_path),
            "--variants", "gkd,rdkd", "--seeds", "0,1", "--parallel", "1"]
    assert main(args) == 0
    cells = sorted(p.parent for p in tmp_path.rglob("metrics.json"))
    assert len(cells) == 4
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    cell_rows = [r for r in rows if r["status"] == "ok"]
    for r in cell_rows:
        m = json.loads((tmp_path / r["variant"] / f"seed-{r['seed']}" / "order-config" / "metrics.json").read_text())
        assert float(r["avg-incremental-accuracy"]) == m["avg-incremental-accuracy"]
    stamp = {c: (c / "metrics.json").stat().st_mtime_ns for c in cells}
    assert main(args + ["--resume"]) == 0
    assert stamp == {c: (c / "metrics.json").stat().st_mtime_ns for c in cells}


def test_sweep_orders_summary(fixtures, tmp_path):
    args = ["sweep", "--config", str(fixtures / "tiny.json"), "--out", str(tmp_path),
            "--variants", "rdkd", "--orders", "3", "--parallel", "2"]
    assert main(args) == 0
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    agg = [r for r in rows if r["status"] == "aggregate"]
    assert len(agg) == 1 and agg[0]["mean"] and agg[0]["variance"]
    vals = [float(r["avg-incremental-accuracy"]) for r in rows if r["status"] == "ok"]
    assert float(agg[0]["mean"]) == pytest.approx(sum(vals) / 3, abs=1e-9)


def test_sweep_records_failures(fixtures, tmp_path):
    # the manifest exists (config is valid) but its data blob is truncated
    shutil.copytree(fixtures / "cache", tmp_path / "cache")
    (tmp_path / "cache" / "train.bin").write_bytes(b"\0" * 8)
    args = ["sweep", "--config", str(fixtures / "cache.json"), "--out", str(tmp_path / "sweep"), "--parallel", "1",
            "--variants", "gkd,rdkd",
            "--override", f"dataset.train-manifest={json.dumps(str(tmp_path / 'cache' / 'train.json'))}"]
    assert main(args) == 1
    tmp_path = tmp_path / "sweep"
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert rows[0]["status"] == "failed"


def test_compress_command(fixtures, tmp_path):
    args = ["compress", "--teacher", str(fixtures / "teacher.ckpt"), "--config", str(fixtures / "student.json"),
            "--out", str(tmp_path), "--pseudo-tasks", "4", "--seeds", "0"]
    assert main(args) == 0
    report = json.loads((tmp_path / "compress.json").read_text())
    assert report["pseudo-tasks"] == 4 and len(report["runs"]) == 1
    assert main(args[:-4] + ["--pseudo-tasks", "3"]) == 2
    assert main(["compress", "--teacher", str(tmp_path / "missing.ckpt"), "--config",
                 str(fixtures / "student.json"), "--out", str(tmp_path)]) == 2
