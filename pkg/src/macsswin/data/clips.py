"""Temporal sampling of fixed-length clips from per-video frame timelines.

Timelines are the Type-Z-free frame sequences of one video; runs and
groupings are computed on positions in that sequence, and the returned clips
carry the original frame indices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..exceptions import ConfigError

GROUP_SIZE = 64
CLIP_LEN = 32
SEQUENCES_PER_BLOCK = 4


@dataclass(frozen=True)
class ClipSample:
    video_id: str
    frame_indices: tuple[int, ...]
    label: int | None = None
    center_frame: int | None = None


@dataclass(frozen=True)
class InferenceBlock:
    """``SEQUENCES_PER_BLOCK`` clips drawn from one block of consecutive frames.

    ``frames`` is the padded block (length ``group_size * n_seq``); only the
    first ``n_valid`` entries are real frames and receive predictions.
    """

    video_id: str
    frames: tuple[int, ...]
    n_valid: int
    sequences: tuple[ClipSample, ...]

    @property
    def center_frame(self) -> int:
        return self.frames[len(self.frames) // 2]

    @property
    def valid_frames(self) -> tuple[int, ...]:
        return self.frames[: self.n_valid]


def label_runs(labels: Sequence) -> list[tuple[int, int, object]]:
    """Maximal runs of equal labels as ``(start, stop, label)`` position ranges."""
    runs = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            runs.append((start, i, labels[start]))
            start = i
    return runs


def _stride(group_size: int, clip_len: int) -> int:
    if clip_len <= 0 or group_size % clip_len:
        raise ConfigError(f"group size {group_size} must be a positive multiple of clip length {clip_len}")
    return group_size // clip_len


def train_clip_sampler(
    frames: Sequence[int],
    labels: Sequence,
    seed: int | None = None,
    video_id: str = "",
    group_size: int = GROUP_SIZE,
    clip_len: int = CLIP_LEN,
    stats: dict | None = None,
) -> list[ClipSample]:
    """Tile every same-label run into non-overlapping groups and subsample each.

    A group of ``group_size`` consecutive frames yields ``clip_len`` frames at a
    uniform stride. The start offset within the stride is 0 when ``seed`` is
    None, otherwise drawn per clip from ``range(stride)``. Runs shorter than
    one group are dropped and tallied in ``stats['dropped_frames']``.
    """
    if len(frames) != len(labels):
        raise ConfigError("frames and labels differ in length")
    stride = _stride(group_size, clip_len)
    rng = np.random.default_rng(seed) if seed is not None else None
    clips, dropped = [], 0
    for start, stop, label in label_runs(list(labels)):
        n_groups = (stop - start) // group_size
        dropped += (stop - start) - n_groups * group_size
        for g in range(n_groups):
            base = start + g * group_size
            off = int(rng.integers(stride)) if rng is not None else 0
            idx = tuple(int(frames[base + off + stride * i]) for i in range(clip_len))
            y = 1 if label in ("Y", 1, True) else 0
            clips.append(ClipSample(video_id, idx, label=y))
    if stats is not None:
        stats["dropped_frames"] = stats.get("dropped_frames", 0) + dropped
        stats["clips"] = stats.get("clips", 0) + len(clips)
    return clips


def infer_clip_grouping(
    frames: Sequence[int],
    video_id: str = "",
    group_size: int = GROUP_SIZE,
    clip_len: int = CLIP_LEN,
    n_seq: int = SEQUENCES_PER_BLOCK,
    mode: str = "block",
) -> list[InferenceBlock]:
    """Split a timeline into blocks of ``n_seq * group_size`` frames.

    ``mode="block"`` takes sequence j from the j-th consecutive sub-block at a
    uniform stride starting at offset 0. ``mode="interleaved"`` instead draws
    every sequence from the whole block at stride ``n_seq * stride``, offset
    by ``j * stride``. A short tail block is right-padded by repeating the last
    frame.
    """
    if mode not in ("block", "interleaved"):
        raise ConfigError(f"unknown grouping mode {mode!r}")
    stride = _stride(group_size, clip_len)
    block = group_size * n_seq
    frames = [int(f) for f in frames]
    blocks = []
    for start in range(0, len(frames), block):
        chunk = frames[start : start + block]
        n_valid = len(chunk)
        chunk = chunk + [chunk[-1]] * (block - n_valid)
        seqs = []
        for j in range(n_seq):
            if mode == "block":
                pos = [j * group_size + stride * i for i in range(clip_len)]
            else:
                pos = [j * stride + n_seq * stride * i for i in range(clip_len)]
            seqs.append(ClipSample(video_id, tuple(chunk[p] for p in pos), center_frame=chunk[block // 2]))
        blocks.append(InferenceBlock(video_id, tuple(chunk), n_valid, tuple(seqs)))
    return blocks


def block_scores(blocks: Sequence[InferenceBlock], seq_scores: Sequence[Sequence[float]]):
    """Average the per-sequence scores of each block.

    Returns ``(per_frame, per_center)``: the block mean assigned to every real
    frame of the block, and the same mean keyed by each block's center frame.
    """
    per_frame, per_center = {}, {}
    for blk, scores in zip(blocks, seq_scores):
        mean = float(np.mean(scores))
        for f in blk.valid_frames:
            per_frame[f] = mean
        per_center[blk.center_frame] = mean
    return per_frame, per_center
