import json
import shutil

import numpy as np
import pytest

from saliex import dataio, encoder
from saliex.cli import RunConfig, main
from saliex.errors import ConfigError

from helpers import run_pipeline, synth, tree_bytes


def _synth(tmp_path, name="data", count=3, seed=1):
    return synth(main, tmp_path, name, count, seed)


def test_pipeline_byte_reproducible(tmp_path):
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    files_a, files_b = tree_bytes(a), tree_bytes(b)
    assert sorted(files_a) == sorted(files_b)
    for rel, data in files_a.items():
        assert files_b[rel] == data, rel
    for name in ("model.ckpt", "model.ckpt.trainlog.csv", "expl.csv", "expl.ppm", "expl.stats.csv",
                 "report.csv", "report_pr/MEAN.csv", "one.pgm", "table.csv"):
        assert (a / name).exists(), name
    pred = dataio.load_pgm(a / "pred" / "img_0000.pgm")
    np.testing.assert_array_equal(pred, dataio.load_pgm(a / "one.pgm"))


def test_explain_constant_predictor(tmp_path):
    manifest = _synth(tmp_path)
    image = dataio.read_manifest(manifest)[0][0]
    assert main(["explain", "--constant-predictor", "--image", str(image), "--out", str(tmp_path / "c")]) == 0
    assert np.all(dataio.load_ppm(tmp_path / "c.ppm") == 255)
    lines = (tmp_path / "c.stats.csv").read_text().splitlines()
    assert lines == ["mean,std_pos,std_neg,n_pos,n_neg", "0.0,0.0,0.0,0,0"]


def test_explain_workers_env(tmp_path, monkeypatch):
    manifest = _synth(tmp_path)
    image = dataio.read_manifest(manifest)[0][0]
    model = encoder.build_encoder(encoder.EncoderConfig(num_stages=2, stage_channels=(2, 2), fusion_channels=2,
                                                        input_size=(16, 16)))
    ckpt = tmp_path / "m.ckpt"
    encoder.save_checkpoint(model, ckpt)
    assert main(["explain", "--ckpt", str(ckpt), "--image", str(image), "--out", str(tmp_path / "w1")]) == 0
    monkeypatch.setenv("SALIEX_WORKERS", "4")
    assert main(["explain", "--ckpt", str(ckpt), "--image", str(image), "--out", str(tmp_path / "w4")]) == 0
    assert (tmp_path / "w1.csv").read_bytes() == (tmp_path / "w4.csv").read_bytes()
    monkeypatch.setenv("SALIEX_WORKERS", "many")
    assert main(["explain", "--ckpt", str(ckpt), "--image", str(image), "--out", str(tmp_path / "w")]) == 2


def test_eval_perfect_prediction(tmp_path):
    manifest = _synth(tmp_path, count=3)
    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    for img, mask in dataio.read_manifest(manifest):
        shutil.copy(mask, pred_dir / (img.stem + ".pgm"))
    out = tmp_path / "r.csv"
    assert main(["eval", "--pred", str(pred_dir), "--gt", str(manifest), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "image,fmeasure,mae,boundary_f_w2,boundary_f_w4,boundary_f_w8,boundary_f_w12,boundary_f_w16,boundary_f_w20"
    mean = rows[-1].split(",")
    assert mean[0] == "MEAN" and float(mean[1]) == 1.0 and float(mean[2]) == 0.0
    pr = (tmp_path / "r_pr" / "img_0000.csv").read_text().splitlines()
    assert len(pr) == 257


def test_eval_pred_manifest(tmp_path):
    manifest = _synth(tmp_path, count=2)
    pred_manifest = tmp_path / "data" / "pred.txt"
    pred_manifest.write_text("".join(f"{m.relative_to(tmp_path / 'data')}\n" for _, m in dataio.read_manifest(manifest)))
    out = tmp_path / "r.csv"
    assert main(["eval", "--pred", str(pred_manifest), "--gt", str(manifest), "--out", str(out)]) == 0
    assert out.read_text().splitlines()[-1].startswith("MEAN,1.0,0.0")


def test_report(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    header = "image,fmeasure,mae,boundary_f_w2\n"
    a.write_text(header + "x,0.9,0.1,0.8\nMEAN,0.9,0.1,0.8\n")
    b.write_text(header + "x,0.7,0.2,0.6\nMEAN,0.7,0.2,0.6\n")
    out = tmp_path / "table.csv"
    assert main(["report", "--eval", str(a), str(b), "--labels", "dense,adjacent", "--out", str(out)]) == 0
    assert out.read_text() == "run,fmeasure,mae,boundary_f_w2\ndense,0.9,0.1,0.8\nadjacent,0.7,0.2,0.6\n"
    assert "dense" in capsys.readouterr().out


def test_usage_errors():
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["eval", "--pred", "x", "--gt", "y", "--out", "z", "--widths", "a"]) == 1


def test_data_errors(tmp_path, capsys):
    missing = tmp_path / "nope.ckpt"
    assert main(["predict", "--ckpt", str(missing), "--image", "x.ppm", "--out", "y.pgm"]) == 2
    assert str(missing) in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"encoder": {"stages": 3}}))
    manifest = _synth(tmp_path)
    assert main(["train", "--config", str(bad), "--data", str(manifest), "--out", str(tmp_path / "m")]) == 2
    assert "stages" in capsys.readouterr().err


def test_run_config():
    cfg = RunConfig.from_dict({"seed": 9, "train": {"epochs": 2}})
    assert cfg.encoder.seed == cfg.train.seed == cfg.explain.seed == 9
    assert cfg.train.epochs == 2
    again = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"sed": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"data": {"test": "x"}})
