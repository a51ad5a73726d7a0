import shutil
import subprocess
import sys

import pytest

from cate_fusion.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main

SPEC = """experiment = mismatch_heatmap
grid = 0.0,0.5
n_replicates = 1
methods = racer,sr_oscar,mr_oscar
dgp.p = 20
dgp.n_r = 80
dgp.n_o = 120
dgp.n_eval = 40
estimator.path_length = 15
"""


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SPEC)
    return path


def test_run_summarize_heatmap(spec_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--spec", str(spec_file), "--out", str(out), "-q"]) == EXIT_OK
    assert "mr_oscar" in capsys.readouterr().out
    assert main(["summarize", "--in", str(out)]) == EXIT_OK
    assert "0;0.5" in capsys.readouterr().out
    assert main(["heatmap", "--in", str(out)]) == EXIT_OK
    text = (out / "heatmap_gap_mr_sr.csv").read_text()
    assert text.splitlines()[0] == "f1\\f2,0,0.5" and "NA" in text
    assert (out / "heatmap_gap_mr_racer.csv").exists()


def test_seed_override_changes_records(spec_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", "--spec", str(spec_file), "--out", str(a), "-q", "--seed", "1"])
    main(["run", "--spec", str(spec_file), "--out", str(b), "-q", "--seed", "2"])
    assert (a / "records.csv").read_text() != (b / "records.csv").read_text()


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("dgp.nonsense = 3\n")
    assert main(["run", "--spec", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "dgp.nonsense" in capsys.readouterr().err
    assert main(["run", "--spec", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG


def test_partial_failure_exit_code(tmp_path):
    spec = tmp_path / "fail.cfg"
    spec.write_text(SPEC + "dgp.n_r = 12\n")
    out = tmp_path / "o"
    assert main(["run", "--spec", str(spec), "--out", str(out), "-q"]) == EXIT_PARTIAL
    assert main(["summarize", "--in", str(out)]) == EXIT_PARTIAL


def test_workers_env(spec_file, tmp_path, monkeypatch):
    monkeypatch.setenv("CATE_FUSION_WORKERS", "2")
    out = tmp_path / "o"
    assert main(["run", "--spec", str(spec_file), "--out", str(out), "-q"]) == EXIT_OK
    ref = tmp_path / "r"
    main(["run", "--spec", str(spec_file), "--out", str(ref), "-q", "--workers", "1"])
    assert (out / "records.csv").read_bytes() == (ref / "records.csv").read_bytes()


def test_module_entry_point(spec_file, tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "cate_fusion.cli", "run", "--spec", str(spec_file), "--out", str(tmp_path / "o"), "-q"],
        capture_output=True, text=True, timeout=600,
    )
    assert res.returncode == 0, res.stderr


@pytest.mark.skipif(shutil.which("cate-fusion") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["cate-fusion", "--help"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0 and "summarize" in res.stdout
