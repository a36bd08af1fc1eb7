import json
import sys
from pathlib import Path

import pytest
import yaml
from filelock import FileLock

from vcbackdoor.cli import main

FAST = {"train": {"epochs": 2}, "model": {"channels": [4, 8], "hidden": 16},
        "evaluation": {"sweep": {"values": [0.0, 0.1], "seeds": [0, 1]}, "defense": {"epochs": 2}}}


def merge(doc, patch):
    for k, v in patch.items():
        if isinstance(v, dict):
            merge(doc.setdefault(k, {}), v)
        else:
            doc[k] = v
    return doc


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["mkcorpus", "--out", str(root), "--classes", "4", "--per-class", "20", "--speakers", "5"]) == 0
    return root


def write_config(corpus, tmp_path, patch=None):
    doc = yaml.safe_load((corpus / "experiment.yaml").read_text())
    doc = merge(merge(doc, FAST), patch or {})
    doc["dataset"]["manifest"] = str(corpus / "manifest.csv")
    doc["output_dir"] = str(tmp_path / "run")
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_mkcorpus_layout(corpus):
    assert (corpus / "manifest.csv").exists() and (corpus / "manifest.vocab.json").exists()
    assert len(list((corpus / "audio").glob("*.wav"))) == 80
    assert len(list((corpus / "targets").glob("*.wav"))) == 3


def test_full_pipeline(corpus, tmp_path, capsys):
    cfg = write_config(corpus, tmp_path)
    run = tmp_path / "run"
    for cmd in ("poison", "train", "eval", "scenarios", "defend", "sweep"):
        assert main([cmd, "--config", cfg]) == 0, cmd
    assert (run / "poison" / "poison_manifest.json").exists()
    assert (run / "train" / "model.npz").exists()
    assert (run / "eval" / "report.json").exists() and (run / "eval" / "report.txt").exists()
    assert (run / "sweep" / "sweep.png").exists() and (run / "sweep" / "sweep.txt").exists()
    assert (run / "defense" / "curve.png").exists()
    assert (run / "scenarios" / "matrix.txt").exists()
    rep = json.loads((run / "eval" / "report.json").read_text())
    assert rep["config_digest"] == json.loads((run / "train" / "stamp.json").read_text())["config_digest"]
    sweep = json.loads((run / "sweep" / "sweep.json").read_text())["sweep"]
    assert len(sweep["points"]) == 4

    capsys.readouterr()
    assert main(["verify", "--config", cfg]) == 0
    assert "FAILED" not in capsys.readouterr().out

    # idempotent reruns
    digest = (run / "poison" / "stamp.json").read_text()
    assert main(["poison", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    assert "up to date" in capsys.readouterr().out
    assert (run / "poison" / "stamp.json").read_text() == digest

    # tampering is caught
    rep["report"]["attack_success_rate"] = 1.0
    (run / "eval" / "report.json").write_text(json.dumps(rep))
    assert main(["verify", "--config", cfg]) == 1
    assert "hash mismatch" in capsys.readouterr().out


def test_eval_without_checkpoint(corpus, tmp_path, capsys):
    cfg = write_config(corpus, tmp_path)
    assert main(["eval", "--config", cfg]) == 3
    assert "run train first" in capsys.readouterr().err
    assert main(["train", "--config", cfg]) == 3
    assert "run poison first" in capsys.readouterr().err


def test_dry_run_writes_nothing(corpus, tmp_path, capsys):
    cfg = write_config(corpus, tmp_path, {"poison": {"rate": 0.1}})
    assert main(["poison", "--config", cfg, "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "N=72 n=7" in out and "y_t=0" in out  # floor(0.1 * floor(0.9 * 80)) = floor(7.2)
    assert not (tmp_path / "run").exists()


def test_sweep_resumes(corpus, tmp_path, capsys):
    cfg = write_config(corpus, tmp_path)
    assert main(["sweep", "--config", cfg]) == 0
    assert "4 trainings, 0 points resumed" in capsys.readouterr().out
    points = sorted((tmp_path / "run" / "sweep" / "points").glob("*.json"))
    points[0].unlink()  # as if killed before the last point was written
    assert main(["sweep", "--config", cfg]) == 0
    assert "1 trainings, 3 points resumed" in capsys.readouterr().out


def test_validation_exit_code(corpus, tmp_path, capsys):
    cfg = write_config(corpus, tmp_path, {"poison": {"target_label": 9}})
    assert main(["poison", "--config", cfg]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 99\n")
    assert main(["poison", "--config", str(bad)]) == 2


def test_lock_prevents_concurrent_writers(corpus, tmp_path, capsys):
    cfg = write_config(corpus, tmp_path)
    (tmp_path / "run").mkdir()
    with FileLock(str(tmp_path / "run" / ".lock")):
        assert main(["poison", "--config", cfg]) == 4
    assert "locked" in capsys.readouterr().err


def test_seed_and_out_overrides(corpus, tmp_path, capsys):
    cfg = write_config(corpus, tmp_path)
    other = tmp_path / "elsewhere"
    assert main(["poison", "--config", cfg, "--seed", "5", "--out", str(other)]) == 0
    doc = json.loads((other / "poison" / "poison_manifest.json").read_text())
    assert doc["plan"]["seed"] == 5


def test_voice_conversion_via_env(corpus, tmp_path, monkeypatch, capsys):
    trig = {"kind": "voice_conversion", "target_speech_path": str(corpus / "targets" / "target1.wav"),
            "target_speaker_id": "tgt1"}
    cfg = write_config(corpus, tmp_path, {"poison": {"trigger": trig}, "evaluation": {"probes": {"vc": trig}}})
    monkeypatch.delenv("VCBACKDOOR_VC_COMMAND", raising=False)
    assert main(["poison", "--config", cfg]) == 2
    monkeypatch.setenv("VCBACKDOOR_VC_COMMAND",
                       f"{sys.executable} -m vcbackdoor.mockvc shift {{source}} {{target}} {{output}}")
    assert main(["poison", "--config", cfg, "--jobs", "2"]) == 0
    doc = json.loads((tmp_path / "run" / "poison" / "poison_manifest.json").read_text())
    assert doc["plan"]["trigger"]["kind"] == "voice_conversion"
    assert Path(tmp_path / "run" / "vc" / ".vc_cache").exists()


def test_parallel_sweep_matches_serial(corpus, tmp_path, capsys):
    cfg = write_config(corpus, tmp_path)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "serial")]) == 0
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "parallel"), "--jobs", "2"]) == 0
    a, b = (json.loads((tmp_path / d / "sweep" / "sweep.json").read_text())["sweep"] for d in ("serial", "parallel"))
    assert a == b
