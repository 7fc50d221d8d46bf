import json
import os
import shutil
import subprocess
import sys

import pytest

from rvt import cli, config, io

TINY_INI = """\
[run]
seed = 0
preset = synthetic

[synth]
n_participants = 3
sessions_per_participant = 2
clips_per_session = 3
frames_per_clip = 3
image_size = 16

[encoder]
conv_blocks = 2
conv_width = 4
spatial_layers = 1
temporal_layers = 1
embed_dim = 8
heads = 2
feature_dim = 8
ffn_mult = 2
image_size = 16
input_pool = 2
frames = 3

[train]
epochs = 2
hidden = 4
lr = 0.01
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    assert run("synth", "--config", ini, "--out", root / "data") == 0
    assert run("loocv", "--config", ini, "--data", root / "data", "--out", root / "run") == 0
    assert run("loocv", "--config", ini, "--data", root / "data", "--out", root / "abl",
               "--ablate-recurrence") == 0
    return root


def test_synth_writes_manifest_and_frames(work):
    m = io.read_manifest(work / "data")
    assert len(m["sessions"]) == 6 and m["frame_format"] == "pgm"
    assert len(m["sessions"][0]["frames"]) == 3


def test_synth_overrides_and_f64(tmp_path):
    assert run("synth", "--out", tmp_path / "e", "--clips", 2) == 1
    assert run("synth", "--out", tmp_path / "d", "--participants", 2, "--sessions", 1,
               "--clips", 3, "--format", "f64") == 0
    m = io.read_manifest(tmp_path / "d")
    assert len(m["sessions"]) == 2 and m["frame_format"] == "f64"


def test_loocv_run_layout(work):
    run_dir = work / "run"
    for name in ("config.ini", "data.json", "report.json", "traces.csv"):
        assert (run_dir / name).is_file()
    folds = sorted(os.listdir(run_dir / "folds"))
    assert folds == ["P01", "P02", "P03"]
    for f in ("predictions.csv", "loss.csv", "split.json"):
        assert (run_dir / "folds" / "P01" / f).is_file()
    rep = json.loads((run_dir / "report.json").read_text())
    assert rep["n_folds"] == 3
    assert config.load(run_dir / "config.ini").train.epochs == 2


def test_ablation_flag_is_recorded(work):
    assert config.load(work / "abl" / "config.ini").train.ablate_recurrence


def test_eval_recomputes_report(work, capsys):
    assert run("eval", "--run", work / "run", "--compare", work / "abl") == 0
    ev = json.loads((work / "run" / "eval.json").read_text())
    rep = json.loads((work / "run" / "report.json").read_text())
    assert ev["report"]["pooled"] == pytest.approx(rep["pooled"])
    assert ev["comparison"]["n_pairs"] <= 3
    assert "wilcoxon bacc" in capsys.readouterr().out


def test_train_single_model(work):
    assert run("train", "--config", work / "tiny.ini", "--data", work / "data",
               "--out", work / "single") == 0
    assert (work / "single" / "model").exists()
    rep = json.loads((work / "single" / "report.json").read_text())
    assert len(rep["loss"]) == 2


def test_gee_without_and_with_traces(work, tmp_path, capsys):
    # 3 participants x 2 sessions leave too few lag-1 pairs for AR(1)
    assert run("gee", "--data", work / "data") == 1
    assert "too few" in capsys.readouterr().err
    assert run("gee", "--data", work / "data", "--corr", "independence",
               "--out", tmp_path) == 0
    out = json.loads((tmp_path / "gee.json").read_text())
    assert set(out["models"]) == {"eq2", "eq3"}
    assert run("gee", "--data", work / "data", "--run", work / "run",
               "--corr", "independence") == 0
    assert "eq4" in json.loads((work / "run" / "gee.json").read_text())["models"]


def test_saliency_outputs(work, tmp_path):
    assert run("saliency", "--run", work / "run", "--data", work / "data",
               "--out", tmp_path, "--participant", "P01", "--radius", 1) == 0
    s = json.loads((tmp_path / "saliency.json").read_text())
    assert s["n_maps"] == 4
    assert 0.0 <= s["top_decile_eye_fraction_mean_map"] <= 1.0
    assert (tmp_path / "mean_map.pgm").is_file()
    assert len(os.listdir(tmp_path / "maps")) == 8


def test_audit_clean_runs(work, tmp_path, capsys):
    assert run("audit", "--run", work / "run", "--run", work / "abl",
               "--out", tmp_path / "a.json") == 0
    assert json.loads((tmp_path / "a.json").read_text())["ok"] is True
    assert "zero train/test participant overlap" in capsys.readouterr().out


def test_audit_detects_leak_and_tampering(work, tmp_path):
    bad = tmp_path / "bad"
    shutil.copytree(work / "run", bad)
    split = bad / "folds" / "P01" / "split.json"
    s = json.loads(split.read_text())
    s["train"].append("P01")
    split.write_text(json.dumps(s))
    rep = cli.audit_run(str(bad))
    assert any("both train and test" in p for p in rep["problems"])
    assert run("audit", "--run", bad) == 1

    data = tmp_path / "data"
    shutil.copytree(work / "data", data)
    rec = json.loads((work / "run" / "data.json").read_text())
    mpath = io.manifest_path(str(data))
    with open(mpath, "a") as f:
        f.write("\n")
    rep = cli.audit_run(str(work / "run"), str(data))
    assert any("changed" in p for p in rep["problems"])
    assert rec["sha256"]


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("loocv", "--out", tmp_path) == 2
    assert "--data is required" in capsys.readouterr().err
    assert run("synth") == 2
    assert run("loocv", "--jobs", 0, "--out", tmp_path) == 2
    assert run("bogus") == 2
    assert run("eval") == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert run("loocv", "--data", tmp_path / "none", "--out", tmp_path / "o") == 1
    assert "no manifest" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nwarmup = 1\n")
    assert run("synth", "--config", bad, "--out", tmp_path / "d") == 1


def test_log_level_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("RVT_LOG_LEVEL", "loud")
    assert run("synth", "--out", tmp_path) == 2
    assert "RVT_LOG_LEVEL" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "rvt", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "loocv" in res.stdout
