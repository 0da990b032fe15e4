import hashlib
from pathlib import Path

import pytest

from mrrn.cli import run_cli
from mrrn.metrics import read_stats_csv

TINY = """\
[arch]
num_streams = 2
base_channels = 4
input_size = 16
num_classes = 2
rcus_per_block = 1
cnn_blocks_per_rcu = 1
"""

SMALL = """\
[arch]
num_streams = 2
channels = 4,8
input_size = 32
rcus_per_block = 1
cnn_blocks_per_rcu = 1
[data]
n_train = 6
n_val = 3
n_test = 3
[train]
epochs = 2
batch_size = 3
"""


def _cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _cfg(root, SMALL)
    data = str(root / "data")
    assert run_cli(["generate-data", "--config", cfg, "--data-dir", data, "--out", str(root / "gen")]) == 0
    assert run_cli(["train", "--config", cfg, "--data-dir", data, "--out", str(root / "run")]) == 0
    return root, cfg, data


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_param_count_tiny(tmp_path, capsys):
    assert run_cli(["param-count", "--config", _cfg(tmp_path, TINY), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip() == "1714"


def test_param_count_reference_prints_delta(tmp_path, capsys):
    assert run_cli(["param-count", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "12434214" and "delta -16507503" in out[1]


def test_gradcheck_f64_ops_exit_zero(tmp_path, capsys):
    rc = run_cli(["gradcheck", "--precision", "f64", "--ops-only", "--instances", "3", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == 0 and "f64: max relative error" in out and "FAIL" not in out


@pytest.mark.parametrize("argv", [["frobnicate"], ["train", "--no-such-flag"], ["train", "--seed", "x"],
                                  ["param-count", "--set", "nosep"]])
def test_bad_invocations_one_line_error(tmp_path, capsys, argv):
    rc = run_cli(argv + ["--out", str(tmp_path)] if argv[0] != "frobnicate" else argv)
    err = capsys.readouterr().err.strip().splitlines()
    assert rc == 2 and len(err) == 1 and err[0].startswith("mrrn: error:")


def test_invalid_config_reports_all_problems(tmp_path, capsys):
    rc = run_cli(["param-count", "--set", "arch.num_classes=1", "--set", "arch.input_size=48",
                  "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert rc == 2 and "num_classes" in err and "power of two" in err


def test_missing_dataset_is_a_clean_error(tmp_path, capsys):
    rc = run_cli(["train", "--config", _cfg(tmp_path, SMALL), "--data-dir", str(tmp_path / "nope"),
                  "--out", str(tmp_path)])
    err = capsys.readouterr().err.strip().splitlines()
    assert rc == 1 and len(err) == 1 and err[0].startswith("mrrn: error:")


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MRRN_SEED", "17")
    assert run_cli(["param-count", "--out", str(tmp_path)]) == 0
    assert "seed = 17" in (tmp_path / "resolved.cfg").read_text()
    monkeypatch.setenv("MRRN_SEED", "seventeen")
    assert run_cli(["param-count", "--out", str(tmp_path)]) == 2


def test_train_outputs_and_rerun_from_resolved_config(small_run, tmp_path):
    root, cfg, data = small_run
    run = root / "run"
    for name in ("history.csv", "best.ckpt", "epoch_1.ckpt", "epoch_2.ckpt", "resolved.cfg"):
        assert (run / name).exists()
    again = tmp_path / "again"
    assert run_cli(["train", "--config", str(run / "resolved.cfg"), "--out", str(again)]) == 0
    assert _digest(again / "history.csv") == _digest(run / "history.csv")
    assert _digest(again / "best.ckpt") == _digest(run / "best.ckpt")


def test_eval_with_ground_truth_predictions_is_perfect(small_run, tmp_path):
    root, cfg, data = small_run
    pred_dir = Path(data) / "test"
    if not pred_dir.exists():
        pred_dir = Path(data)
    out = tmp_path / "ev"
    assert run_cli(["eval", "--config", cfg, "--data-dir", data, "--predictions", str(pred_dir),
                    "--method", "GT", "--out", str(out)]) == 0
    row = read_stats_csv((out / "eval.csv").read_text())["GT"]
    assert all(s.mean == 1.0 and s.std == 0.0 for s in row.values())


def test_eval_predict_report_pipeline(small_run, tmp_path, capsys):
    root, cfg, data = small_run
    ckpt = str(root / "run" / "best.ckpt")
    out = tmp_path / "p"
    assert run_cli(["eval", "--config", cfg, "--data-dir", data, "--checkpoint", ckpt, "--out", str(out)]) == 0
    assert run_cli(["predict", "--config", cfg, "--data-dir", data, "--checkpoint", ckpt, "--out", str(out)]) == 0
    overlays = sorted((out / "overlays").glob("*.ppm"))
    assert len(overlays) == 3 and overlays[0].read_bytes().startswith(b"P6\n32 32\n255\n")
    assert len(list((out / "predictions").glob("*.mrsl"))) == 3
    assert sorted((out / "overlays").glob("*_pred.pgm"))[0].read_bytes().startswith(b"P5")
    capsys.readouterr()
    assert run_cli(["report", str(out / "eval.csv"), "--out", str(out)]) == 0
    text = (out / "report.txt").read_text()
    assert "| Method" in text and "MRRN" in text and "median DSC" in text


def test_eval_rejects_corrupt_checkpoint(small_run, tmp_path, capsys):
    root, cfg, data = small_run
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((root / "run" / "best.ckpt").read_bytes()[:100])
    rc = run_cli(["eval", "--config", cfg, "--data-dir", data, "--checkpoint", str(bad), "--out", str(tmp_path)])
    err = capsys.readouterr().err.strip().splitlines()
    assert rc == 1 and len(err) == 1 and "byte offset" in err[0]
