import json
from pathlib import Path

import pytest
import yaml

from vltrack import harness
from vltrack import numerics as nx
from vltrack.config import ExperimentConfig, load_config, micro_config
from vltrack.gradcheck import model_cases
from vltrack.world import load_sequence

TINY = {
    "model": {"width": 16, "heads": 2, "shallow_layers": 1, "deep_layers": 1, "template_h": 16, "template_w": 16,
              "search_h": 32, "search_w": 32},
    "train": {"steps": 4, "batch_size": 2, "pool_sequences": 3, "log_every": 0},
    "world": {"n_frames": 5},
    "eval": {"n_sequences": 2, "n_frames": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_missing_section_is_named(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"model": TINY["model"]}))
    assert harness.main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == harness.EXIT_INVALID
    assert "train" in capsys.readouterr().err


def test_every_violation_is_listed(tmp_path, capsys):
    raw = {"model": dict(TINY["model"], width=15, tau=-1.0), "train": {"steps": -3}}
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert harness.main(["train", "--config", str(path)]) == harness.EXIT_INVALID
    err = capsys.readouterr().err
    assert "tau" in err and "steps" in err and "width" in err


def test_fixture_round_trip(tmp_path, capsys):
    path = tmp_path / "vectors.json"
    assert harness.main(["fixtures", "export", str(path)]) == harness.EXIT_OK
    assert harness.main(["fixtures", "verify", str(path)]) == harness.EXIT_OK
    out = capsys.readouterr().out
    for name in ("masked_softmax", "mmc_uniform", "distractor_split", "box_decode", "two_layer_forward"):
        assert name in out


def test_corrupted_fixture_reports_the_vector(tmp_path, capsys):
    path = tmp_path / "vectors.json"
    harness.main(["fixtures", "export", str(path)])
    doc = json.loads(path.read_text())
    target = next(v for v in doc["vectors"] if v["name"] == "mmc_uniform")
    target["expected"] = 2.5
    path.write_text(json.dumps(doc))
    capsys.readouterr()
    assert harness.main(["fixtures", "verify", str(path)]) == harness.EXIT_FAILED
    out = capsys.readouterr().out
    assert any("mmc_uniform" in ln and "FAIL" in ln for ln in out.splitlines())


def test_verify_missing_file(tmp_path):
    assert harness.main(["fixtures", "verify", str(tmp_path / "nope.json")]) == harness.EXIT_INVALID


def test_gradcheck_covers_every_path():
    names = [case[0] for case in model_cases(micro_config().model, 0)]
    assert len(names) >= 6 and len(set(names)) == len(names)


def test_gradcheck_negative_control_names_the_primitive(monkeypatch, capsys):
    original = nx._gelu_backward
    monkeypatch.setattr(nx, "_gelu_backward", lambda *a, **k: original(*a, **k) * 1.01)
    assert harness.main(["gradcheck"]) == harness.EXIT_FAILED
    lines = capsys.readouterr().out.splitlines()
    assert any(ln.startswith("FAIL primitive") and " gelu " in ln for ln in lines)
    assert lines[-1].startswith("FAIL gradcheck")


def test_generate_world_honours_env(tmp_path, monkeypatch, tiny_config):
    monkeypatch.setenv(harness.OUT_ENV, str(tmp_path / "env_out"))
    assert harness.main(["generate-world", "--config", str(tiny_config), "--count", "2", "--seed", "7"]) == 0
    seq = load_sequence(tmp_path / "env_out" / "seq_0000008")
    assert seq.seed == 8 and len(seq) == 5


def test_out_flag_beats_env(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUT_ENV, str(tmp_path / "env"))
    assert harness.output_dir(str(tmp_path / "flag"), "x") == tmp_path / "flag"
    assert harness.output_dir(None, "x") == tmp_path / "env"
    monkeypatch.delenv(harness.OUT_ENV)
    assert str(harness.output_dir(None, "train")) == "runs/train"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    cfg_path = base / "tiny.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY))
    out = base / "train"
    code = harness.main(["train", "--config", str(cfg_path), "--out", str(out)])
    return code, cfg_path, out


def test_train_writes_every_artifact(trained):
    code, _, out = trained
    assert code == harness.EXIT_OK
    for name in ("model.ckpt", "config.yaml", "loss_history.csv", "report.yaml", "success_plot.png",
                 "loss_curve.png"):
        assert (out / name).stat().st_size > 0, name
    assert (out / "success_plot.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    report = yaml.safe_load((out / "report.yaml").read_text())
    assert list(report) == ["format", "version", "config_digest", "seed", "settings", "wall_clock_seconds",
                            "artifacts"]
    assert list(report["settings"]) == ["bbox", "nl", "nl+bbox"]
    for vals in report["settings"].values():
        assert 0 <= vals["mean_iou"] <= 1 and vals["sequences"] == 2
    history = (out / "loss_history.csv").read_text().splitlines()
    assert history[0].startswith("step,total") and len(history) == 1 + TINY["train"]["steps"]


def test_eval_reproduces_the_report(trained, tmp_path):
    _, cfg_path, out = trained
    code = harness.main(["eval", "--config", str(cfg_path), "--checkpoint", str(out / "model.ckpt"),
                         "--against", str(out / "report.yaml"), "--trajectories", "--out", str(tmp_path)])
    assert code == harness.EXIT_OK
    trajs = sorted((tmp_path / "trajectories" / "nl").glob("*.csv"))
    assert len(trajs) == 2 and trajs[0].read_text().startswith("frame,x,y,w,h,confidence")


def test_eval_detects_metric_mismatch(trained, tmp_path):
    _, cfg_path, out = trained
    report = yaml.safe_load((out / "report.yaml").read_text())
    report["settings"]["nl"]["mean_iou"] += 0.01
    doctored = tmp_path / "doctored.yaml"
    doctored.write_text(yaml.safe_dump(report, sort_keys=False))
    code = harness.main(["eval", "--config", str(cfg_path), "--checkpoint", str(out / "model.ckpt"),
                         "--against", str(doctored), "--mode", "nl", "--out", str(tmp_path / "e")])
    assert code == harness.EXIT_FAILED


def test_eval_detects_config_drift(trained, tmp_path):
    _, cfg_path, out = trained
    drifted = dict(TINY, eval={"n_sequences": 3, "n_frames": 4})
    path = tmp_path / "drift.yaml"
    path.write_text(yaml.safe_dump(drifted))
    code = harness.main(["eval", "--config", str(path), "--checkpoint", str(out / "model.ckpt"),
                         "--against", str(out / "report.yaml"), "--out", str(tmp_path / "e")])
    assert code == harness.EXIT_INVALID


def test_eval_rejects_mismatched_checkpoint(trained, tmp_path, capsys):
    _, _, out = trained
    wider = dict(TINY, model=dict(TINY["model"], width=32))
    path = tmp_path / "wide.yaml"
    path.write_text(yaml.safe_dump(wider))
    code = harness.main(["eval", "--config", str(path), "--checkpoint", str(out / "model.ckpt"),
                         "--out", str(tmp_path / "e")])
    assert code == harness.EXIT_INVALID
    assert "width" in capsys.readouterr().err


def test_same_config_same_metrics(trained, tmp_path):
    code, cfg_path, out = trained
    assert harness.main(["train", "--config", str(cfg_path), "--out", str(tmp_path)]) == harness.EXIT_OK
    a = yaml.safe_load((out / "report.yaml").read_text())
    b = yaml.safe_load((tmp_path / "report.yaml").read_text())
    assert a["settings"] == b["settings"] and a["config_digest"] == b["config_digest"]


def test_shipped_default_config_matches_the_code():
    path = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"
    assert load_config(path).digest() == ExperimentConfig().validate().digest()
