"""Command-line entry point: ``macsswin <command> [options]``.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
failure during training, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_checkpoint
from .data.folds import make_folds
from .data.manifest import load_manifest
from .data.preprocess import load_image, normalize_resize
from .data.synth import SynthConfig, load_boxes, synth_generate
from .exceptions import ConfigError, FormatError, ImageReadError, MacsSwinError, TrainingError, ValidationError
from .explain import grad_cam, localization_score, upsample_overlay, write_localization_report
from .inference import clip_dataset, load_timelines, predict_video
from .metrics import DEFAULT_THRESHOLDS, as_binary, build_report, fleiss_kappa, mcc_matrix, threshold_sweep, write_report
from .models import get_config
from .train import FrameDataset, TrainConfig, get_train_config, predict_scores, train_image, train_video

log = logging.getLogger("macsswin")

THREADS_ENV = "MACSSWIN_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SCORE_FLOOR = 1e-12


def load_document(path) -> dict:
    """Read a YAML or JSON config document (JSON is valid YAML)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: unreadable config ({e})") from e
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return doc


def snapshot(out: Path, name: str, doc: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(doc, indent=2, sort_keys=True, default=list) + "\n")


def parse_thresholds(text: str | None) -> tuple[float, ...]:
    if not text:
        return DEFAULT_THRESHOLDS
    try:
        values = tuple(float(t) for t in text.split(","))
    except ValueError as e:
        raise ConfigError(f"bad --thresholds {text!r}") from e
    for v in values:
        if not 0 < v < 1:
            raise ConfigError(f"thresholds must lie in (0, 1), got {v}")
    return values


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    doc = load_document(args.config) if args.config else {}
    doc = dict(doc.get("synth", doc))
    for key in ("n_images", "ratio", "size", "n_videos", "frames_per_video"):
        v = getattr(args, key)
        if v is not None:
            doc[key] = v
    if args.temporal:
        doc["temporal"] = True
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = SynthConfig.from_dict(doc)
    res = synth_generate(cfg, args.out)
    print(f"wrote {len(res.records)} frames to {res.root} (X={res.n_x}, Y={res.n_y}, Z={res.n_z})")
    return EXIT_OK


# ---------------------------------------------------------------- folds


def cmd_folds(args) -> int:
    manifest = load_manifest(args.manifest)
    res = make_folds(manifest.counts_per_video(), k=args.k, seed=args.seed or 0, max_deviation=args.max_deviation)
    lo, hi = res.ratio_range()
    doc = {"manifest": str(args.manifest), "k": args.k, "method": res.method, "global_ratio": res.global_ratio,
           "max_deviation": res.deviation, "warning": res.warning, "folds": [f.to_dict() for f in res.folds]}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2) + "\n")
    for f in res.folds:
        print(f"fold {f.fold_id}: val={','.join(f.val_videos)}  train {f.train_ratio:.2f}:1  val {f.val_ratio:.2f}:1")
    print(f"ratios range between {lo:.2f}:1 and {hi:.2f}:1 (global {res.global_ratio:.2f}:1, {res.method})")
    return EXIT_OK


def _fold_videos(data: dict, manifest):
    folds_path = data.get("folds")
    if not folds_path:
        return manifest.videos(), []
    doc = json.loads(Path(folds_path).read_text())
    fold = int(data.get("fold", 0))
    try:
        f = doc["folds"][fold]
    except (KeyError, IndexError) as e:
        raise ConfigError(f"{folds_path} has no fold {fold}") from e
    return list(f["train_videos"]), list(f["val_videos"])


# ---------------------------------------------------------------- train


def _run_doc(args, kind: str) -> tuple[dict, TrainConfig]:
    doc = load_document(args.config) if args.config else {}
    unknown = set(doc) - {"data", "train", "model", "eval", "seed", "out", "init"}
    if unknown:
        raise ConfigError(f"unknown run config sections: {sorted(unknown)}")
    train_doc = dict(doc.get("train") or {})
    preset = train_doc.pop("preset", "tiny_image" if kind == "image" else "tiny_video")
    base = get_train_config(preset).to_dict()
    tc = TrainConfig.from_dict({**base, **train_doc})
    model_doc = doc.get("model") or {}
    if isinstance(model_doc, dict):
        overrides = dict(model_doc)
        if "preset" in overrides:
            tc = replace(tc, model=overrides.pop("preset"))
        if overrides:
            tc = replace(tc, model_overrides={**tc.model_overrides, **overrides})
    seed = args.seed if args.seed is not None else doc.get("seed")
    if seed is not None:
        tc = replace(tc, seed=int(seed))
    if tc.kind != kind:
        raise ConfigError(f"train preset {preset!r} is for {tc.kind} models")
    return doc, tc


def _out_dir(args, doc) -> Path:
    out = args.out or doc.get("out")
    if not out:
        raise ConfigError("no output directory (--out or 'out' in the config)")
    return Path(out)


def cmd_train(args) -> int:
    doc, tc = _run_doc(args, "image")
    out = _out_dir(args, doc)
    data = doc.get("data") or {}
    if args.manifest:
        data["manifest"] = args.manifest
    if "manifest" not in data:
        raise ConfigError("no manifest given (--manifest or data.manifest)")
    manifest = load_manifest(data["manifest"])
    train_v, val_v = _fold_videos(data, manifest)
    mcfg = get_config(tc.model, **tc.model_overrides)
    train_ds = FrameDataset.from_manifest(manifest, mcfg.img_size, videos=set(train_v))
    val_ds = FrameDataset.from_manifest(manifest, mcfg.img_size, videos=set(val_v)) if val_v else None
    snapshot(out, "run_config.json", {**doc, "train": tc.to_dict(), "data": data})
    res = train_image(tc, train_ds, val_ds, out_dir=out, resume=args.resume, init=doc.get("init"),
                      on_epoch=_print_row)
    print(f"best epoch {res.best_epoch} (F1 {res.best_f1:.4f}); checkpoints in {out}")
    return EXIT_OK


def cmd_train_video(args) -> int:
    doc, tc = _run_doc(args, "video")
    out = _out_dir(args, doc)
    data = doc.get("data") or {}
    if args.manifest:
        data["manifest"] = args.manifest
    if "manifest" not in data:
        raise ConfigError("no manifest given (--manifest or data.manifest)")
    manifest = load_manifest(data["manifest"])
    train_v, val_v = _fold_videos(data, manifest)
    mcfg = get_config(tc.model, video=True, **tc.model_overrides)
    stats: dict = {}
    train_ds = clip_dataset(load_timelines(manifest, mcfg.img_size, train_v), mcfg.num_frames, seed=tc.seed, stats=stats)
    val_ds = clip_dataset(load_timelines(manifest, mcfg.img_size, val_v), mcfg.num_frames) if val_v else None
    log.info("clip sampler: %s", stats)
    snapshot(out, "run_config.json", {**doc, "train": tc.to_dict(), "data": data, "sampler": stats})
    res = train_video(tc, train_ds, val_ds, out_dir=out, resume=args.resume, init=doc.get("init"),
                      on_epoch=_print_row)
    print(f"best epoch {res.best_epoch} (F1 {res.best_f1:.4f}); checkpoints in {out}")
    return EXIT_OK


def _print_row(r: dict) -> None:
    print(f"epoch {r['epoch']:3d} {r['split']:5s} loss {r['loss']:.4f} acc {r['acc']:.3f} "
          f"prec {r['prec']:.3f} rec {r['rec']:.3f} f1 {r['f1']:.3f} lr {r['lr']:.2e}", flush=True)


# ---------------------------------------------------------------- eval


def _select_videos(args, manifest) -> list[str]:
    if args.videos:
        return args.videos.split(",")
    if args.folds:
        _, val = _fold_videos({"folds": args.folds, "fold": args.fold}, manifest)
        return val
    return manifest.videos()


def cmd_eval(args) -> int:
    thresholds = parse_thresholds(args.thresholds)
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, require_xy=False)
    videos = _select_videos(args, manifest)
    if not any(r.video_id in set(videos) for r in manifest.xy):
        raise ValidationError("evaluation set is empty after excluding Type-Z frames")
    extra = {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), "videos": videos, "kind": model.kind}
    if model.kind == "image":
        ds = FrameDataset.from_manifest(manifest, model.cfg.img_size, model.cfg.mean, model.cfg.std, set(videos))
        scores, labels = predict_scores(model, ds), ds.labels
    else:
        scores, labels = [], []
        for vid, tl in load_timelines(manifest, model.cfg.img_size, videos).items():
            if not tl.xy[0]:
                continue
            pred = predict_video(model, tl, mode=args.grouping)
            frames, labs = tl.xy
            chosen = frames if not args.center_only else sorted(pred.per_center)
            lab_of = dict(zip(frames, labs))
            src = pred.per_center if args.center_only else pred.per_frame
            scores += [src[f] for f in chosen]
            labels += [1 if lab_of[f] == "Y" else 0 for f in chosen]
        scores, labels = np.asarray(scores), np.asarray(labels)
        extra["grouping"] = args.grouping
        extra["center_only"] = bool(args.center_only)
    scores = np.clip(scores, SCORE_FLOOR, 1 - SCORE_FLOOR)
    sweep = threshold_sweep(scores, labels, thresholds)
    name = "MACSSwin-T" if model.kind == "image" else "vidMACSSwin-T"
    report = build_report(sweep, name, extra={**extra, "n_items": int(len(scores))})
    out = Path(args.out)
    write_report(report, out / "report.json", out / "report.csv")
    for r in report["rows"]:
        row = r["row"]
        print(f"{row['method']:22s} acc {row['accuracy']:>14s} prec {row['precision']:>14s} "
              f"rec {row['recall']:>14s} f1 {row['f1']}")
    return EXIT_OK


# ---------------------------------------------------------------- cam


def cmd_cam(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.kind != "image":
        raise ConfigError("Grad-CAM is available for the frame classifier only")
    manifest = load_manifest(args.manifest)
    boxes_path = Path(args.boxes) if args.boxes else manifest.root / "boxes.jsonl"
    boxes = None
    if boxes_path.exists():
        boxes = load_boxes(boxes_path)
    else:
        print(f"notice: no box file at {boxes_path}; writing heatmaps only, localization scores skipped", file=sys.stderr)
    wanted = set(args.videos.split(",")) if args.videos else None
    recs = [r for r in manifest.xy if r.label == "Y" and (wanted is None or r.video_id in wanted)]
    if args.limit:
        recs = recs[: args.limit]
    if not recs:
        raise ValidationError("no Type-Y frames selected")
    out = Path(args.out)
    rows = []
    for r in recs:
        img = load_image(manifest.resolve(r))
        x = normalize_resize(img, model.cfg.img_size, model.cfg.mean, model.cfg.std)
        cam = grad_cam(model, x, class_index=1, source=r.key)
        rel = f"heatmaps/{r.video_id}_{r.frame_index:06d}.png"
        upsample_overlay(cam, img, out / rel, alpha=args.alpha)
        if boxes is not None and r.key in boxes:
            s = localization_score(cam, boxes[r.key], img.shape[0], img.shape[1])
            rows.append({"video_id": r.video_id, "frame_index": r.frame_index, "heatmap": rel,
                         "peak_inside": s.peak_inside, "mass_fraction": round(s.mass_fraction, 6),
                         "zero_map": s.zero_map})
    if boxes is not None:
        write_localization_report(rows, out / "localization.jsonl")
        if rows:
            rate = float(np.mean([r["peak_inside"] for r in rows]))
            print(f"peak inside box on {rate:.1%} of {len(rows)} frames")
    print(f"wrote {len(recs)} heatmaps to {out / 'heatmaps'}")
    return EXIT_OK


# ---------------------------------------------------------------- agreement


def read_label_csv(path, what: str = "ratings") -> tuple[list[str], list[list[str]]]:
    """CSV with one row per item and one X/Y column per rater; an optional
    header row names the columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [[c.strip() for c in row] for row in csv.reader(fh) if any(c.strip() for c in row)]
    if not rows:
        raise ValidationError(f"{path}: no {what}")
    header = None
    if any(c not in ("X", "Y") for c in rows[0]):
        header, rows = rows[0], rows[1:]
    width = len(header) if header else len(rows[0]) if rows else 0
    for i, row in enumerate(rows, 2 if header else 1):
        if len(row) != width:
            raise ValidationError(f"{path}: row {i} has {len(row)} cells, expected {width}")
        bad = [c for c in row if c not in ("X", "Y")]
        if bad:
            raise ValidationError(f"{path}: row {i} has label {bad[0]!r}; cells must be X or Y")
    if not rows:
        raise ValidationError(f"{path}: no {what}")
    names = header or [f"{what[:-1]}{j + 1}" for j in range(width)]
    return names, rows


def cmd_agreement(args) -> int:
    names, rows = read_label_csv(args.ratings, "raters")
    kappa = fleiss_kappa(rows)
    columns = {n: as_binary([r[j] for r in rows]) for j, n in enumerate(names)}
    raters = list(columns)
    if args.predictions:
        pnames, prows = read_label_csv(args.predictions, "models")
        if len(prows) != len(rows):
            raise ValidationError(f"{len(prows)} prediction rows for {len(rows)} rated items")
        for j, n in enumerate(pnames):
            columns[n if n not in columns else f"model:{n}"] = as_binary([r[j] for r in prows])
    table = mcc_matrix(columns)
    report = {
        "kappa": {"kappa": kappa.kappa, "p_value": kappa.p_value, "z": kappa.z, "se": kappa.se,
                  "n_items": kappa.n_items, "n_raters": kappa.n_raters, "degenerate": kappa.degenerate},
        "mcc": table,
        "raters": raters,
        "models": [n for n in columns if n not in raters],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"Fleiss kappa {kappa.kappa:.3f} (p = {kappa.p_value:.3g}) over {kappa.n_items} items x {kappa.n_raters} raters")
    for m in report["models"]:
        vals = [table[m][r] for r in raters]
        print(f"{m}: MCC vs raters {min(vals):.2f} .. {max(vals):.2f}")
    return EXIT_OK


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="macsswin", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML/JSON run document")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    common(s)
    s.add_argument("--temporal", action="store_true")
    s.add_argument("--n-images", dest="n_images", type=int)
    s.add_argument("--ratio", type=float)
    s.add_argument("--size", type=int)
    s.add_argument("--n-videos", dest="n_videos", type=int)
    s.add_argument("--frames-per-video", dest="frames_per_video", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("folds", help="video-level k-fold split")
    common(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--max-deviation", dest="max_deviation", type=float)
    s.set_defaults(func=cmd_folds)

    for name, fn in (("train", cmd_train), ("train-video", cmd_train_video)):
        s = sub.add_parser(name, help=f"train the {'frame' if name == 'train' else 'clip'} classifier")
        common(s, out_required=False)
        s.add_argument("--manifest")
        s.add_argument("--resume", action="store_true")
        s.set_defaults(func=fn)

    s = sub.add_parser("eval", help="threshold sweep report for a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--thresholds", default="0.5,0.4,0.3")
    s.add_argument("--videos", help="comma-separated video ids")
    s.add_argument("--folds")
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--grouping", choices=("block", "interleaved"), default="block")
    s.add_argument("--center-only", dest="center_only", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cam", help="Grad-CAM heatmaps and localization scores")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--boxes")
    s.add_argument("--videos")
    s.add_argument("--limit", type=int)
    s.add_argument("--alpha", type=float, default=0.5)
    s.set_defaults(func=cmd_cam)

    s = sub.add_parser("agreement", help="Fleiss kappa and MCC matrix from a ratings CSV")
    common(s)
    s.add_argument("--ratings", required=True)
    s.add_argument("--predictions")
    s.set_defaults(func=cmd_agreement)
    return p


def _limit_threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(int(n))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _limit_threads()
        return args.func(args)
    except TrainingError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageReadError, FileNotFoundError, PermissionError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (MacsSwinError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
