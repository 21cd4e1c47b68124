import json
import shutil
import subprocess
import sys

import pytest

from reciptrack.cli import EXIT_CHECK_FAILED, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY = {
    "seed": 3,
    "model": {"backbone_channels": [4, 4, 4], "exemplar_size": 16, "search_size": 48},
    "train": {"epochs": 2, "warmup_epochs": 1, "steps_per_epoch": 3, "batch_size": 2, "freeze_epochs": 0, "lr_peak": 0.01},
    "data": {"train_sequences": 2, "frames": 6, "frame_size": [64, 64], "benchmark_sequences": 2},
}


@pytest.fixture()
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_train_track_eval(tiny, tmp_path, capsys):
    bench, ck, res, rep = (tmp_path / d for d in ("bench", "train", "res", "rep"))
    assert run("gen", "--config", tiny, "--out", bench) == EXIT_OK
    assert (bench / "benchmark.json").exists()
    assert run("train", "--config", tiny, "--out", ck) == EXIT_OK
    assert (ck / "checkpoint" / "manifest.json").exists() and (ck / "train_log.csv").exists()
    assert run("track", "--config", tiny, "--checkpoint", ck / "checkpoint", "--data", bench, "--out", res) == EXIT_OK
    assert len(list(res.glob("*.csv"))) == 2
    capsys.readouterr()
    assert run("eval", "--data", bench, "--results", res, "--out", rep, "--json") == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert 0 <= summary["ao"] <= 1 and summary["frames"] == 2 * 5
    assert json.loads((rep / "report.json").read_text())["ao"] == summary["ao"]


def test_eval_on_oracle_results_gives_ao_one(tiny, tmp_path, capsys):
    bench, res = tmp_path / "bench", tmp_path / "res"
    run("gen", "--config", tiny, "--out", bench)
    res.mkdir()
    for seq in bench.iterdir():
        if seq.is_dir():
            rows = (seq / "groundtruth.csv").read_text().splitlines()
            out = ["frame,x0,y0,x1,y1,score"] + [r + ",1.0" for r in rows[1:]]
            (res / f"{seq.name}.csv").write_text("\n".join(out) + "\n")
    capsys.readouterr()
    assert run("eval", "--data", bench, "--results", res, "--out", tmp_path / "rep", "--json") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["ao"] == 1.0


def test_malformed_config_exits_with_key(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"lr_peek": 0.1}}))
    assert run("gen", "--config", path, "--out", tmp_path / "o") == EXIT_USAGE
    assert "train.lr_peek" in capsys.readouterr().err


def test_missing_inputs_exit_nonzero(tiny, tmp_path, capsys):
    assert run("gen", "--config", tiny) == EXIT_USAGE
    assert run("track", "--checkpoint", tmp_path / "nope", "--data", tmp_path, "--out", tmp_path / "o") == EXIT_RUNTIME
    assert run("train", "--config", tiny, "--out", tmp_path / "t", "--resume", tmp_path) == EXIT_RUNTIME
    assert run("gen", "--config", tmp_path / "missing.json", "--out", tmp_path / "o") == EXIT_USAGE
    err = capsys.readouterr().err
    assert "nope" in err and "not a checkpoint" in err


def test_resume_through_cli(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", tiny, "--out", a) == EXIT_OK
    shutil.copytree(a, b)
    assert run("train", "--config", tiny, "--out", b, "--resume", b / "checkpoint") == EXIT_OK
    assert (a / "train_log.csv").read_text() == (b / "train_log.csv").read_text()


def test_gradcheck_exit_codes(tmp_path, capsys):
    assert run("gradcheck", "--tol", "1e-4", "--seeds", 2, "--cases", "loss.total,head.forward", "--out", tmp_path) == EXIT_OK
    assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"] is True
    assert run("gradcheck", "--tol", "1e-30", "--seeds", 1, "--cases", "loss.total") == EXIT_CHECK_FAILED
    assert run("gradcheck", "--cases", "no.such.case") == EXIT_USAGE
    assert "FAIL" in capsys.readouterr().out


def test_ablate_analyze_and_sweep(tiny, tmp_path, capsys):
    bench, ab, an, sw = (tmp_path / d for d in ("bench", "ab", "an", "sw"))
    run("gen", "--config", tiny, "--out", bench)
    status = run("ablate", "--config", tiny, "--data", bench, "--seeds", 1, "--out", ab)
    assert status in (EXIT_OK, EXIT_CHECK_FAILED)
    doc = json.loads((ab / "ablation.json").read_text())
    assert set(doc["rows"]) == {"I", "II", "III", "IV", "centerness"}
    assert set(doc["ordering"]) == {"II>I", "III>I", "IV>I", "pearson IV>I"}
    assert status == (EXIT_OK if all(doc["ordering"].values()) else EXIT_CHECK_FAILED)
    capsys.readouterr()
    assert run("analyze", "--results", ab, "--data", bench, "--out", an, "--json") == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["IV"]["pairs"] == 2 * 5
    assert (an / "pairs_IV.csv").read_text().startswith("seed,score,iou\n")
    assert run("sweep", "--config", tiny, "--data", bench, "--radii", "1,2", "--out", sw) == EXIT_OK
    assert (sw / "sweep.csv").read_text().splitlines()[0] == "r,R,AO,SR@0.5,SR@0.75"


def test_ablate_rejects_unknown_variant(tiny, tmp_path):
    run("gen", "--config", tiny, "--out", tmp_path / "b")
    assert run("ablate", "--config", tiny, "--data", tmp_path / "b", "--variants", "I,V") == EXIT_USAGE


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "reciptrack", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
