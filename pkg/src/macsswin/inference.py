"""Per-frame and per-video prediction helpers.

Video inference groups each Type-Z-free timeline into blocks of
``n_seq * group_size`` frames, scores the ``n_seq`` sub-sampled clips of a
block, averages them and assigns the mean to every real frame of the block.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data.clips import InferenceBlock, block_scores, infer_clip_grouping, train_clip_sampler
from .data.manifest import Manifest
from .data.preprocess import derive_seed, load_image, resize_bilinear
from .exceptions import ValidationError
from .models import VidMacsSwin, predict
from .tensor import Tensor
from .train import ClipDataset


@dataclass
class VideoTimeline:
    """Frames of one video addressed by frame index; ``labels`` follow ``frame_indices``."""

    video_id: str
    frames: np.ndarray  # (max_index + 1, S, S, 3) uint8; Type-Z slots may be blank
    frame_indices: list[int]
    labels: list[str]

    @property
    def xy(self) -> tuple[list[int], list[str]]:
        keep = [(f, lab) for f, lab in zip(self.frame_indices, self.labels) if lab != "Z"]
        return [f for f, _ in keep], [lab for _, lab in keep]


def timelines_from_arrays(videos: dict[str, tuple[np.ndarray, Sequence[str]]]) -> dict[str, VideoTimeline]:
    """Wrap in-memory ``(frames, labels)`` pairs (frame index = position)."""
    return {v: VideoTimeline(v, np.asarray(f), list(range(len(f))), list(labs)) for v, (f, labs) in videos.items()}


def load_timelines(manifest: Manifest, size: int, videos: Sequence[str] | None = None) -> dict[str, VideoTimeline]:
    out = {}
    for vid in videos if videos is not None else manifest.videos():
        recs = manifest.timeline(vid)
        xy = [r for r in recs if r.label != "Z"]
        frames = np.zeros((recs[-1].frame_index + 1, size, size, 3), dtype=np.uint8) if recs else np.zeros((0, size, size, 3), np.uint8)
        for r in xy:
            img = load_image(manifest.resolve(r))
            if img.shape[:2] != (size, size):
                img = np.clip(np.rint(resize_bilinear(img, size, size)), 0, 255).astype(np.uint8)
            frames[r.frame_index] = img
        out[vid] = VideoTimeline(vid, frames, [r.frame_index for r in recs], [r.label for r in recs])
    return out


def clip_dataset(timelines: dict[str, VideoTimeline], clip_len: int, group_size: int | None = None,
                 seed: int | None = None, stats: dict | None = None) -> ClipDataset:
    """Training/validation clips: same-label runs tiled into groups of ``group_size``."""
    group_size = group_size or 2 * clip_len
    clips = []
    for v, tl in timelines.items():
        frames, labels = tl.xy
        s = None if seed is None else derive_seed(seed, v)
        clips += train_clip_sampler(frames, labels, s, v, group_size, clip_len, stats)
    if not clips:
        raise ValidationError("no clip fits inside a same-label run; videos too short or too fragmented")
    return ClipDataset({v: tl.frames for v, tl in timelines.items()}, clips)


@dataclass
class VideoPrediction:
    video_id: str
    blocks: list[InferenceBlock]
    sequence_scores: list[list[float]]
    per_frame: dict[int, float]
    per_center: dict[int, float]


def predict_video(model: VidMacsSwin, timeline: VideoTimeline, group_size: int | None = None,
                  n_seq: int = 4, mode: str = "block", batch_size: int = 8) -> VideoPrediction:
    clip_len = model.cfg.num_frames
    group_size = group_size or 2 * clip_len
    frames, _ = timeline.xy
    if not frames:
        raise ValidationError(f"video {timeline.video_id} has no Type-X/Type-Y frames")
    blocks = infer_clip_grouping(frames, timeline.video_id, group_size, clip_len, n_seq, mode)
    ds = ClipDataset({timeline.video_id: timeline.frames}, [s for b in blocks for s in b.sequences],
                     model.cfg.mean, model.cfg.std)
    model.eval()
    scores = []
    for start in range(0, len(ds), batch_size):
        idx = list(range(start, min(start + batch_size, len(ds))))
        scores.append(predict(model(Tensor(ds.batch(idx))))[1])
    flat = np.concatenate(scores).tolist()
    seq_scores = [flat[i * n_seq : (i + 1) * n_seq] for i in range(len(blocks))]
    per_frame, per_center = block_scores(blocks, seq_scores)
    return VideoPrediction(timeline.video_id, blocks, seq_scores, per_frame, per_center)
