import csv
import json

import numpy as np
import pytest

from macsswin.cli import main, read_label_csv
from macsswin.exceptions import ValidationError


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert run("synth", "--out", root, "--n-images", 64, "--seed", 5, "--n-videos", 16) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    folds = out / "folds.json"
    assert run("folds", "--manifest", corpus / "manifest.jsonl", "--out", folds) == 0
    cfg = out / "run.yaml"
    cfg.write_text(
        f"data:\n  manifest: {corpus / 'manifest.jsonl'}\n  folds: {folds}\n  fold: 0\n"
        "train:\n  epochs: 2\n  batch_size: 16\n  warmup_epochs: 1\nseed: 3\n"
    )
    assert run("train", "--config", cfg, "--out", out / "train") == 0
    return out


def test_synth_writes_corpus(corpus):
    lines = (corpus / "manifest.jsonl").read_text().splitlines()
    labels = [json.loads(x)["label"] for x in lines]
    assert len(labels) == 64
    assert labels.count("Y") == round(64 / 5)
    assert (corpus / "boxes.jsonl").exists()


def test_synth_default_size_and_errors(tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "bad", "--ratio", -1) == 2
    assert "ratio" in capsys.readouterr().err
    cfg = tmp_path / "s.yaml"
    cfg.write_text("synth:\n  n_images: 10\n  colour: red\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "bad2") == 2


def test_synth_temporal(tmp_path):
    out = tmp_path / "video"
    assert run("synth", "--temporal", "--out", out, "--n-videos", 2, "--frames-per-video", 200, "--seed", 1) == 0
    recs = [json.loads(x) for x in (out / "manifest.jsonl").read_text().splitlines()]
    assert {r["video_id"] for r in recs} == {"vid00", "vid01"}
    assert {r["frame_path"].split("/")[1] for r in recs} == {"vid00", "vid01"}
    labels = [r["label"] for r in recs if r["video_id"] == "vid00"]
    first_run = next(i for i, lab in enumerate(labels) if lab != labels[0])
    assert first_run >= 64


def test_folds_command(corpus, tmp_path, capsys):
    out = tmp_path / "folds.json"
    assert run("folds", "--manifest", corpus / "manifest.jsonl", "--out", out) == 0
    doc = json.loads(out.read_text())
    vals = [v for f in doc["folds"] for v in f["val_videos"]]
    assert sorted(vals) == sorted(f"vid{i:02d}" for i in range(16))
    printed = capsys.readouterr().out
    assert "ratios range between" in printed and printed.count("fold ") == 4
    assert run("folds", "--manifest", corpus / "manifest.jsonl", "--out", out, "--k", 3) == 2


def test_train_outputs(trained):
    train = trained / "train"
    for name in ("best.ckpt", "last.ckpt", "train_log.jsonl", "run_config.json"):
        assert (train / name).exists(), name
    rows = [json.loads(x) for x in (train / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows if r["split"] == "train"] == [0, 1]
    snap = json.loads((train / "run_config.json").read_text())
    assert snap["train"]["seed"] == 3 and snap["train"]["epochs"] == 2


def test_train_is_reproducible_and_resumable(trained, tmp_path):
    cfg = trained / "run.yaml"
    again = tmp_path / "again"
    assert run("train", "--config", cfg, "--out", again) == 0
    assert (again / "train_log.jsonl").read_text() == (trained / "train" / "train_log.jsonl").read_text()
    text = cfg.read_text().replace("epochs: 2", "epochs: 3")
    cfg3 = tmp_path / "run3.yaml"
    cfg3.write_text(text)
    assert run("train", "--config", cfg3, "--out", again, "--resume") == 0
    rows = [json.loads(x) for x in (again / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows if r["split"] == "train"] == [0, 1, 2]


def test_train_errors(tmp_path, corpus):
    assert run("train", "--out", tmp_path / "x") == 2
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("train:\n  epochs: 0\n")
    assert run("train", "--config", cfg, "--manifest", corpus / "manifest.jsonl", "--out", tmp_path / "y") == 2
    cfg.write_text("trian: {}\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "z") == 2
    cfg.write_text("train:\n  epochs: 1\n  base_lr: 1.0e+30\n  warmup_lr: 1.0e+29\n  warmup_epochs: 0\n")
    with np.errstate(all="ignore"):
        assert run("train", "--config", cfg, "--manifest", corpus / "manifest.jsonl", "--out", tmp_path / "w") == 3


def test_eval_report(trained, corpus, tmp_path):
    out = tmp_path / "eval"
    assert run("eval", "--checkpoint", trained / "train" / "best.ckpt", "--manifest", corpus / "manifest.jsonl",
               "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["thresholds"] == [0.5, 0.4, 0.3]
    assert [r["row"]["method"] for r in report["rows"]] == ["MACSSwin-T(0.5)", "MACSSwin-T(0.4)", "MACSSwin-T(0.3)"]
    assert sum(report["rows"][0]["confusion"].values()) == 64
    with open(out / "report.csv") as fh:
        assert len(list(csv.reader(fh))) == 4
    again = tmp_path / "eval2"
    run("eval", "--checkpoint", trained / "train" / "best.ckpt", "--manifest", corpus / "manifest.jsonl", "--out", again)
    assert (again / "report.json").read_bytes() == (out / "report.json").read_bytes()


def test_eval_errors(trained, corpus, tmp_path):
    ckpt = trained / "train" / "best.ckpt"
    manifest = corpus / "manifest.jsonl"
    assert run("eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", tmp_path, "--videos", "nope") == 2
    assert run("eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", tmp_path, "--thresholds", "0.5,1.5") == 2
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert run("eval", "--checkpoint", tmp_path / "junk.ckpt", "--manifest", manifest, "--out", tmp_path) == 2
    assert run("eval", "--checkpoint", tmp_path / "none.ckpt", "--manifest", manifest, "--out", tmp_path) == 4


def test_eval_video_mode(tmp_path):
    corpus = tmp_path / "video"
    assert run("synth", "--temporal", "--out", corpus, "--n-videos", 2, "--frames-per-video", 160, "--seed", 2) == 0
    cfg = tmp_path / "v.yaml"
    cfg.write_text(f"data:\n  manifest: {corpus / 'manifest.jsonl'}\ntrain:\n  epochs: 1\n  batch_size: 4\n"
                   "  warmup_epochs: 0\n")
    assert run("train-video", "--config", cfg, "--out", tmp_path / "vt") == 0
    out = tmp_path / "veval"
    assert run("eval", "--checkpoint", tmp_path / "vt" / "last.ckpt", "--manifest", corpus / "manifest.jsonl",
               "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["kind"] == "video" and report["grouping"] == "block"
    assert report["rows"][0]["row"]["method"].startswith("vidMACSSwin-T")


def test_cam_command(trained, corpus, tmp_path, capsys):
    out = tmp_path / "cam"
    args = ["cam", "--checkpoint", trained / "train" / "best.ckpt", "--manifest", corpus / "manifest.jsonl",
            "--limit", 3]
    assert run(*args, "--out", out) == 0
    rows = [json.loads(x) for x in (out / "localization.jsonl").read_text().splitlines()]
    assert len(rows) == 3 and all(0 <= r["mass_fraction"] <= 1 for r in rows)
    pngs = sorted((out / "heatmaps").glob("*.png"))
    assert len(pngs) == 3
    assert run(*args, "--out", tmp_path / "cam2") == 0
    assert [p.read_bytes() for p in pngs] == [p.read_bytes() for p in sorted((tmp_path / "cam2" / "heatmaps").glob("*.png"))]
    capsys.readouterr()
    assert run(*args, "--out", tmp_path / "cam3", "--boxes", tmp_path / "missing.jsonl") == 0
    assert "localization scores skipped" in capsys.readouterr().err
    assert not (tmp_path / "cam3" / "localization.jsonl").exists()


def _write_csv(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        w.writerows(rows)
    return path


def test_agreement_command(tmp_path):
    rng = np.random.default_rng(0)
    truth = rng.random(15) < 0.5
    ratings = [["Y" if (t if rng.random() < 0.8 else not t) else "X" for _ in range(10)] for t in truth]
    header = [f"rater{i}" for i in range(10)]
    r_path = _write_csv(tmp_path / "ratings.csv", ratings, header)
    p_path = _write_csv(tmp_path / "preds.csv", [["Y" if t else "X"] for t in truth], ["model(0.5)"])
    out = tmp_path / "agree.json"
    assert run("agreement", "--ratings", r_path, "--predictions", p_path, "--out", out) == 0
    doc = json.loads(out.read_text())
    assert doc["kappa"]["n_items"] == 15 and doc["kappa"]["n_raters"] == 10
    assert doc["models"] == ["model(0.5)"]
    assert set(doc["mcc"]["model(0.5)"]) == set(header) | {"model(0.5)"}


def test_agreement_perfect_and_malformed(tmp_path, capsys):
    perfect = _write_csv(tmp_path / "p.csv", [["X"] * 4, ["Y"] * 4, ["Y"] * 4])
    assert run("agreement", "--ratings", perfect, "--out", tmp_path / "p.json") == 0
    assert json.loads((tmp_path / "p.json").read_text())["kappa"]["kappa"] == 1.0
    bad = _write_csv(tmp_path / "b.csv", [["X", "Y"], ["Y", "Q"]], ["a", "b"])
    assert run("agreement", "--ratings", bad, "--out", tmp_path / "b.json") == 2
    assert "row 3" in capsys.readouterr().err
    ragged = tmp_path / "r.csv"
    ragged.write_text("X,Y\nY\n")
    with pytest.raises(ValidationError, match="row 2"):
        read_label_csv(ragged)
