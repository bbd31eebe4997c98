import json
import subprocess
import sys

import numpy as np
import pytest

from toksep.cli import STEM_FILES, main
from toksep.dsp import read_wav

TINY = {
    "codec": {"channels": [4, 4, 8, 8], "dim": 8, "codebook_size": 16, "rvq_layers": 2, "decoder_channels": 16, "semantic_filters": 8, "epochs": 1, "batch_size": 4},
    "conformer": {"layers": 1, "heads": 2, "model_dim": 16, "conv_kernel": 3, "lm_hidden": 32},
    "lm": {"layers": 1, "heads": 2, "hidden": 32, "rvq_layers": 2, "codebook_size": 16},
    "train": {"batch_size": 2, "segment_s": 1.0, "warmup_steps": 2},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["synth", "--out", str(root / "data"), "--clips", "3", "--seconds", "1"]) == 0
    assert main(["train-codec", "--data", str(root / "data"), "--out", str(root / "codec"), "--config", str(root / "tiny.json")]) == 0
    assert main(["train-sep", "--data", str(root / "data"), "--codec", str(root / "codec"), "--out", str(root / "sep"),
                 "--config", str(root / "tiny.json"), "--steps", "3", "--rvq-weights", "3,1"]) == 0
    return root


def test_synth_writes_named_stems_and_is_reproducible(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--clips", "2", "--seconds", "0.5", "--seed", "4"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--clips", "2", "--seconds", "0.5", "--seed", "4"]) == 0
    clips = sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_dir())
    assert clips == ["clip_00000", "clip_00001"]
    for c in clips:
        names = sorted(p.name for p in (tmp_path / "a" / c).iterdir())
        assert names == sorted(["mixture.wav", *STEM_FILES])
        assert len(list((tmp_path / "a").rglob("*.wav"))) == 10
        for n in names:
            assert (tmp_path / "a" / c / n).read_bytes() == (tmp_path / "b" / c / n).read_bytes()
    assert json.loads((tmp_path / "a" / "run_manifest.json").read_text())["seeds"]["seed"] == 4


def test_invalid_arguments_exit_1(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--seconds", "0"]) == 1
    assert main(["synth", "--out", str(tmp_path / "x"), "--clips", "0"]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["train-sep", "--data", "d", "--codec", "c", "--out", "o", "--rvq-weights", "1,-2"]) == 1
    assert "error:" in capsys.readouterr().err


def test_existing_output_directory_needs_force(tmp_path):
    out = tmp_path / "o"
    assert main(["synth", "--out", str(out), "--clips", "1", "--seconds", "0.2"]) == 0
    assert main(["synth", "--out", str(out), "--clips", "1", "--seconds", "0.2"]) == 1
    assert main(["synth", "--out", str(out), "--clips", "1", "--seconds", "0.2", "--force"]) == 0


def test_missing_stems_are_listed(work, tmp_path, capsys):
    bad = tmp_path / "data" / "clip_00000"
    bad.mkdir(parents=True)
    src = work / "data" / "clip_00000"
    for f in ("mixture.wav", "vocals.wav", "other.wav"):
        (bad / f).write_bytes((src / f).read_bytes())
    assert main(["train-codec", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "c")]) == 1
    err = capsys.readouterr().err
    assert "missing stems" in err and "drums, bass" in err


def test_train_sep_manifest_echoes_weights(work):
    man = json.loads((work / "sep" / "run_manifest.json").read_text())
    assert man["rvq_loss_weights"] == [3.0, 1.0]
    assert man["config"]["train"]["label_smoothing"] == 0.1
    assert man["digests"]["codec"] == json.loads((work / "codec" / "run_manifest.json").read_text())["digests"]["codec"]
    assert (work / "sep" / "loss_curve.png").stat().st_size > 0


def test_resume_continues_loss_curve(work, tmp_path):
    import shutil

    from toksep.train import read_loss_curve

    d = tmp_path / "resumed"
    shutil.copytree(work / "sep", d)
    assert main(["train-sep", "--data", str(work / "data"), "--codec", str(work / "codec"), "--out", str(d),
                 "--resume", str(d), "--steps", "6"]) == 0
    curve = read_loss_curve(d / "loss_curve.csv")
    assert [r["step"] for r in curve] == list(range(6))
    assert abs(curve[3]["loss"] - curve[2]["loss"]) < 0.05 * curve[2]["loss"]


def test_separate_and_eval(work):
    clip = work / "data" / "clip_00001"
    assert main(["separate", str(clip / "mixture.wav"), "--codec", str(work / "codec"), "--model", str(work / "sep"),
                 "--out", str(work / "est"), "--tokens", "--plot"]) == 0
    mix = read_wav(clip / "mixture.wav")
    for f in STEM_FILES:
        s = read_wav(work / "est" / f)
        assert len(s) == len(mix) and s.sample_rate_hz == mix.sample_rate_hz
    assert (work / "est" / "spectrograms.png").exists()
    assert main(["eval", "--ref", str(clip), "--est", str(work / "est"), "--codec", str(work / "codec"), "--out", str(work / "rep")]) == 0
    rep = json.loads((work / "rep" / "report.json").read_text())
    assert set(rep) == {"estimate", "baseline"}
    assert "token_accuracy" in rep["estimate"]["tracks"]["vocals"]
    for f in ("report.csv", "metrics.png", "spectrograms.png", "run_manifest.json"):
        assert (work / "rep" / f).exists()


def test_eval_of_mixture_reproduces_baseline(work, tmp_path):
    clip = work / "data" / "clip_00002"
    est = tmp_path / "est"
    est.mkdir()
    for f in STEM_FILES:
        (est / f).write_bytes((clip / "mixture.wav").read_bytes())
    assert main(["eval", "--ref", str(clip), "--est", str(est), "--codec", str(work / "codec"), "--out", str(tmp_path / "rep")]) == 0
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    for t, m in rep["estimate"]["tracks"].items():
        assert abs(m["mel_l1"] - rep["baseline"]["tracks"][t]["mel_l1"]) <= 1e-9


def test_separate_resamples_other_rates(work, tmp_path):
    from toksep.dsp import AudioBuffer, write_wav

    x = read_wav(work / "data" / "clip_00000" / "mixture.wav")
    write_wav(tmp_path / "m44.wav", AudioBuffer(np.interp(np.arange(44100) * 48000 / 44100, np.arange(len(x)), x.samples).astype(np.float32), 44100))
    assert main(["separate", str(tmp_path / "m44.wav"), "--codec", str(work / "codec"), "--model", str(work / "sep"),
                 "--out", str(tmp_path / "o")]) == 0
    assert read_wav(tmp_path / "o" / "vocals.wav").sample_rate_hz == 48000


def test_selftest_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "toksep", "selftest"], capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = [l for l in proc.stdout.splitlines() if l.strip()]
    assert len(lines) == 6 and all(l.startswith("PASS") for l in lines)
