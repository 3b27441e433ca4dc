import csv
import json
import os

import numpy as np
import pytest

from specemo import cli, evaluation, spectro
from specemo.audio_io import SynthSpec, synth_dataset


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.setenv("SPECEMO_CACHE", str(tmp_path / "cache"))
    synth_dataset(SynthSpec(classes=2, speakers=2, clips=2, seed=1), tmp_path / "data")
    return tmp_path


def write_config(path, **sections):
    cfg = {"schema_version": 1, "dataset": {"manifest": "data/synth.csv"}, "output_dir": "runs"}
    for key, value in sections.items():
        cfg[key] = value
    path.write_text(json.dumps(cfg))
    return str(path)


def test_synth_command(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "s"), "--classes", "2", "--speakers", "2"]) == 0
    assert len((tmp_path / "s" / "synth.csv").read_text().splitlines()) == 9


def test_extract_counts_and_cache(workspace, caplog):
    cfg = write_config(workspace / "c.json")
    out = workspace / "ex"
    assert cli.main(["extract", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "index.csv")))
    assert len(rows) == 8 and len(list((out / "images").iterdir())) == 8
    img = spectro.from_ppm((out / rows[0]["image"]).read_bytes())
    assert img.shape == (64, 64, 3)
    with caplog.at_level("INFO", logger="specemo"):
        assert cli.main(["extract", "--config", cfg, "--out", str(out)]) == 0
    assert "8 cache hits, 0 computed" in caplog.text


def test_extract_partial_failure(workspace, capsys):
    (workspace / "data" / "S01_anger_00.wav").write_bytes(b"not a wav")
    cfg = write_config(workspace / "c.json")
    out = workspace / "ex"
    assert cli.main(["extract", "--config", cfg, "--out", str(out)]) == 2
    assert len(list((out / "images").iterdir())) == 7
    assert "S01_anger_00.wav" in capsys.readouterr().err


def test_config_errors(workspace, capsys):
    cfg = workspace / "c.json"
    cfg.write_text(json.dumps({"schema_version": 1, "dataset": {"manifest": "missing.csv"}}))
    assert cli.main(["eval", "--config", str(cfg)]) == 1
    assert "dataset.manifest" in capsys.readouterr().err
    cfg.write_text(json.dumps({"train": {"mode": "rnn"}, "dataset": {"manifest": "data/synth.csv"}}))
    assert cli.main(["eval", "--config", str(cfg)]) == 1
    assert "train" in capsys.readouterr().err
    cfg.write_text(json.dumps({"eval": {"folds": 3}}))
    assert cli.main(["eval", "--config", str(cfg)]) == 1
    assert "eval.folds" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval"])
    assert exc.value.code == 1


def test_seed_override_changes_digest(workspace):
    cfg = write_config(workspace / "c.json")
    a = cli.load_config(cfg)
    b = cli.load_config(cfg, seed=5)
    assert b.train.seed == 5 and b.raw["eval"]["seed"] == 5
    assert a.digest != b.digest
    assert cli.load_config(cfg, out=workspace / "elsewhere").digest == a.digest


def test_eval_svc_consistent_with_predictions(workspace):
    cfg = write_config(workspace / "c.json", train={"mode": "svc"}, eval={"fold_kind": "by_speaker", "k": 2})
    with pytest.warns(Warning):
        assert cli.main(["eval", "--config", cfg, "--run-id", "r"]) == 0
    run = workspace / "runs" / "r"
    report = json.loads((run / "report.json").read_text())
    rows = list(csv.DictReader(open(run / "predictions.csv")))
    recomputed = evaluation.compute_metrics([r["true"] for r in rows], [r["pred"] for r in rows])
    assert report["accuracy"] == recomputed.accuracy
    assert report["confusion"] == recomputed.confusion.tolist()
    digest = cli.config_digest(json.loads((run / "config.json").read_text()))
    assert report["config_digest"] == digest
    assert all(r["config_digest"] == digest for r in rows)
    assert sorted(os.listdir(run / "folds")) == ["fold_00.json", "fold_00.weights", "fold_01.json", "fold_01.weights"]


def test_report_rendering(workspace):
    cfg = write_config(workspace / "c.json", train={"mode": "am", "epochs": 2},
                       eval={"fold_kind": "by_speaker", "k": 2}, report={"attention_samples": 3})
    assert cli.main(["eval", "--config", cfg, "--run-id", "r"]) == 0
    run = workspace / "runs" / "r"
    assert cli.main(["report", str(run)]) == 0
    first = {p: (run / p).read_bytes() for p in ("report.txt", "confusion.csv", "confusion.ppm")}
    gallery = sorted(os.listdir(run / "attention"))
    assert gallery == ["sample_00.pgm", "sample_01.pgm", "sample_02.pgm"]
    assert spectro.from_ppm((run / "attention" / gallery[0]).read_bytes()).shape == (64, 128)
    assert cli.main(["report", str(run)]) == 0
    assert all((run / p).read_bytes() == b for p, b in first.items())
    # tampered config: digests no longer agree
    cfg_json = json.loads((run / "config.json").read_text())
    cfg_json["train"]["epochs"] = 3
    (run / "config.json").write_text(json.dumps(cfg_json))
    assert cli.main(["report", str(run)]) == 1
    assert cli.main(["report", str(workspace / "nowhere")]) == 1


def test_identity_heatmap_is_diagonal():
    img = cli.confusion_heatmap(np.diag([3, 5, 2]))
    table = spectro.load_colormap()
    assert img.shape == (48, 48, 3)
    np.testing.assert_allclose(img[8, 8], table[255])
    np.testing.assert_allclose(img[8, 24], table[0])


def test_train_and_cross(workspace):
    cfg = write_config(workspace / "c.json", train={"mode": "fc", "epochs": 2})
    assert cli.main(["train", "--config", cfg, "--run-id", "t"]) == 0
    run = workspace / "runs" / "t"
    assert {"config.json", "model.weights", "history.json"} <= set(os.listdir(run))
    net, meta = cli.load_model(run / "model.weights")
    assert meta["mode"] == "fc" and meta["config_digest"] == cli.config_digest(
        json.loads((run / "config.json").read_text()))
    cross = workspace / "x.json"
    cross.write_text(json.dumps({"dataset": {"manifest": "data/synth.csv", "test_manifest": "data/synth.csv"},
                                 "train": {"mode": "fc", "epochs": 2}, "output_dir": "runs"}))
    assert cli.main(["cross", "--config", str(cross), "--run-id", "x"]) == 0
    assert {"report.json", "predictions.csv", "model.weights"} <= set(os.listdir(workspace / "runs" / "x"))
