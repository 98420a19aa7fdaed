"""Manifests, folds, clip sampling, preprocessing and the synthetic corpus."""
from .clips import ClipSample, InferenceBlock, block_scores, infer_clip_grouping, label_runs, train_clip_sampler
from .folds import FoldResult, FoldSplit, make_folds
from .manifest import ClassCounts, Manifest, ManifestRecord, class_weights, load_manifest, write_manifest
from .preprocess import AugmentConfig, augment, derive_seed, hflip, load_image, normalize_resize, resize_bilinear
from .synth import SynthConfig, generate_images, generate_video, load_boxes, render_scene, synth_generate

__all__ = [
    "AugmentConfig", "ClassCounts", "ClipSample", "FoldResult", "FoldSplit", "InferenceBlock", "Manifest",
    "ManifestRecord", "SynthConfig", "augment", "block_scores", "class_weights", "derive_seed",
    "generate_images", "generate_video", "hflip", "infer_clip_grouping", "label_runs", "load_boxes",
    "load_image", "load_manifest", "make_folds", "normalize_resize", "render_scene", "resize_bilinear",
    "synth_generate", "train_clip_sampler", "write_manifest",
]
