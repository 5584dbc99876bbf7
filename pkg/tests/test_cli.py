import json
import subprocess
import sys
import wave
from pathlib import Path

import numpy as np
import pytest

from isa_anh import __version__
from isa_anh.cli import ConfigFileError, main, parse_config
from isa_anh.synthgen import read_dataset

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_version_flag():
    proc = subprocess.run([sys.executable, "-m", "isa_anh.cli", "--version"], capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.strip() == f"isa-anh {__version__}"


def test_synth_a4_fixture(tmp_path, capsys):
    out = tmp_path / "a4.jsonl"
    code, stdout, _ = run(["synth", "--config", FIXTURES / "a4.toml", "--out", out], capsys)
    assert code == 0
    summary = json.loads(stdout)
    assert summary == {"dataset": str(out), "samples": 20000, "segments": 40}
    data = read_dataset(out)
    assert data.x.shape == (20000, 4) and data.s.shape == (20000, 4)


def test_synth_seed_flag_changes_data(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run(["synth", "--config", FIXTURES / "tiny.toml", "--out", a, "--seed", "1"], capsys)
    run(["synth", "--config", FIXTURES / "tiny.toml", "--out", b, "--seed", "2"], capsys)
    assert a.read_bytes() != b.read_bytes()


def test_gradcheck_exits_zero(capsys):
    code, stdout, _ = run(["gradcheck"], capsys)
    assert code == 0
    assert json.loads(stdout)["passed"] is True


def test_missing_config_exit_2(tmp_path, capsys):
    code, _, err = run(["train", "--config", tmp_path / "missing.toml"], capsys)
    assert code == 2 and "missing.toml" in err


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("[training]\nlamda_hsic = 0.1\n", "lamda_hsic"),
        ("outdir = 'x'\n", "outdir"),
        ("[training]\nlr = 'fast'\n", "training.lr"),
        ("[training]\nbeta = -1.0\n", "beta"),
        ("[synthetic]\nsegments = 0\n", "segments"),
        ("data_path = 'a'\n[synthetic]\n", "only one"),
        ("metrics = ['accuracy']\n", "metrics"),
        ("[training\n", "<config>"),
    ],
)
def test_config_errors(text, fragment):
    with pytest.raises(ConfigFileError, match=fragment):
        parse_config(text)


def test_bad_config_file_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[training]\nnegatives = 5\n")
    code, _, err = run(["train", "--config", cfg], capsys)
    assert code == 2 and "negatives" in err


def test_config_values_are_typed():
    cfg = parse_config("[training]\nlr = 1\nseed = 4\n")
    assert cfg.training.lr == 1.0 and isinstance(cfg.training.lr, float)
    with pytest.raises(ConfigFileError):
        parse_config("[training]\nseed = 1.5\n")
    with pytest.raises(ConfigFileError):
        parse_config("[training]\nrecord_wall_time = 1\n")


def test_train_is_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, _, _ = run(["train", "--config", FIXTURES / "tiny.toml", "--out", out, "--seed", "7"], capsys)
        assert code == 0
        outs.append(out)
    a, b = outs
    assert (a / "run.jsonl").read_bytes() == (b / "run.jsonl").read_bytes()
    ckpts_a = sorted(p.name for p in (a / "checkpoints").iterdir())
    assert ckpts_a == sorted(p.name for p in (b / "checkpoints").iterdir())
    assert len(ckpts_a) >= 2
    for name in ckpts_a:
        assert (a / "checkpoints" / name).read_bytes() == (b / "checkpoints" / name).read_bytes()


def test_train_eval_roundtrip(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(["train", "--config", FIXTURES / "tiny.toml", "--out", out, "--eval"], capsys)
    assert code == 0
    summary = json.loads(stdout)
    metrics = summary["metrics"]
    assert 0 <= metrics["matched_score"] <= 1 and metrics["version"] == __version__
    line = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
    assert line["matched_score"] == metrics["matched_score"]

    target = tmp_path / "eval.jsonl"
    code, stdout, _ = run(
        ["eval", "--checkpoint", summary["checkpoint"], "--data", out / "data.jsonl", "--out", target], capsys
    )
    assert code == 0
    again = json.loads(stdout)
    assert again["matched_score"] == pytest.approx(metrics["matched_score"], abs=1e-12)
    assert set(again["per_pair_hsic"]) == {"0-1"}
    assert 0 <= again["probe_accuracy"] <= 1


def test_eval_missing_checkpoint_exit_1(tmp_path, capsys):
    code, _, err = run(["eval", "--checkpoint", tmp_path / "none.json", "--data", tmp_path / "none.jsonl"], capsys)
    assert code == 1 and err.startswith("error:")


def test_hsic_test_json(tmp_path, capsys):
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(128, 2))
    np.savetxt(tmp_path / "x.csv", Y, delimiter=",")
    np.savetxt(tmp_path / "y.csv", Y ** 2, delimiter=",")
    code, stdout, _ = run(["hsic-test", tmp_path / "x.csv", tmp_path / "y.csv", "--permutations", "99"], capsys)
    assert code == 0
    res = json.loads(stdout)
    assert res["p_value"] == 0.01 and res["hsic"] > 0 and len(res["bandwidths"]) == 2


@pytest.mark.parametrize("fmt", ["jsonl", "binary"])
def test_featurize(tmp_path, capsys, fmt):
    wav = tmp_path / "tone.wav"
    t = np.arange(16000) / 16000
    pcm = (np.sin(2 * np.pi * 300 * t) * 8000).astype("<i2")
    with wave.open(str(wav), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(pcm.tobytes())
    out = tmp_path / f"feat.{fmt}"
    code, stdout, _ = run(["featurize", wav, out, "--format", fmt], capsys)
    assert code == 0
    assert json.loads(stdout)["frames"] == 98 and out.exists()


def test_featurize_bad_wav_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav")
    code, _, err = run(["featurize", bad, tmp_path / "o.jsonl"], capsys)
    assert code == 1 and "WavParseError" in err
