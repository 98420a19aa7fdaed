"""Synthetic microscope-like scenes with a camouflaged positive class.

Negative (X) scenes are textured tissue crossed by curvilinear vessels.
Positive (Y) scenes add a bulbous ellipsoidal blob attached to a vessel,
coloured close to the vessels (``blob_contrast`` controls how close). The
blob bounding box is written to a side-channel file only.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..exceptions import ConfigError
from .manifest import ManifestRecord, write_manifest
from .preprocess import resize_bilinear, save_png

TISSUE = np.array([196.0, 112.0, 98.0])
VESSEL = np.array([150.0, 38.0, 42.0])
BLOB_TINT = np.array([236.0, 200.0, 70.0])


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 1000
    ratio: float = 4.0
    size: int = 64
    seed: int = 0
    temporal: bool = False
    n_videos: int = 16
    frames_per_video: int = 320
    min_run: int = 64
    max_run: int = 128
    z_fraction: float = 0.05
    blob_contrast: float = 0.35
    blob_radius: tuple[float, float] = (0.12, 0.17)
    n_vessels: tuple[int, int] = (2, 4)
    vessel_width: tuple[float, float] = (0.025, 0.05)
    brightness_jitter: float = 0.15
    noise: float = 4.0

    def __post_init__(self):
        if not self.ratio > 0 or not np.isfinite(self.ratio):
            raise ConfigError(f"ratio must be a positive number, got {self.ratio}")
        if self.size < 16:
            raise ConfigError(f"image size must be >= 16, got {self.size}")
        if self.n_videos < 1 or self.n_images < 1:
            raise ConfigError("need at least one video and one image")
        if self.temporal and self.min_run > self.max_run:
            raise ConfigError("min_run must not exceed max_run")
        if not 0 <= self.blob_contrast <= 1:
            raise ConfigError("blob_contrast must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("blob_radius", "n_vessels", "vessel_width"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclass
class Scene:
    image: np.ndarray  # float64 (H, W, 3) in [0, 255]
    box: list[int] | None  # [x0, y0, x1, y1), pixels


@dataclass
class SynthResult:
    root: Path
    manifest_path: Path
    boxes_path: Path
    n_x: int
    n_y: int
    n_z: int
    records: list = field(default_factory=list)


def _smooth_field(rng, size: int, cells: int) -> np.ndarray:
    return resize_bilinear(rng.normal(size=(cells, cells)), size, size)


def _bezier(rng, size: int, n: int = 160) -> np.ndarray:
    def edge_point():
        t = rng.uniform(0, size)
        side = rng.integers(4)
        return np.array([(0, t), (size, t), (t, 0), (t, size)][side], dtype=np.float64)

    p0, p2 = edge_point(), edge_point()
    p1 = rng.uniform(0.2 * size, 0.8 * size, size=2)
    t = np.linspace(0, 1, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2  # (n, 2) as (x, y)


def _distance(points: np.ndarray, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    px = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=1)
    d2 = ((px[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    return np.sqrt(d2.min(axis=1)).reshape(size, size)


def render_scene(cfg: SynthConfig, rng: np.random.Generator, positive: bool, size: int | None = None) -> Scene:
    """Draw one scene; ``size`` overrides ``cfg.size`` (used for video canvases)."""
    s = size or cfg.size
    scale = s / cfg.size
    bright = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    tint = rng.normal(0, 8, size=3)
    img = np.empty((s, s, 3))
    img[:] = TISSUE * bright + tint
    tex = 14 * _smooth_field(rng, s, max(4, s // 8)) + 6 * _smooth_field(rng, s, max(8, s // 4))
    img += tex[..., None] * np.array([1.0, 0.8, 0.7])

    vessels = []
    vcol = VESSEL * bright + rng.normal(0, 10, size=3)
    for _ in range(int(rng.integers(cfg.n_vessels[0], cfg.n_vessels[1] + 1))):
        pts = _bezier(rng, s)
        width = rng.uniform(*cfg.vessel_width) * cfg.size * scale
        dist = _distance(pts[::2], s)
        alpha = np.clip(width - dist + 0.5, 0, 1)[..., None]
        shade = 0.85 + 0.15 * np.clip(dist / max(width, 1e-6), 0, 1)[..., None]
        img = img * (1 - alpha) + (vcol * shade) * alpha
        vessels.append((pts, width))

    box = None
    if positive:
        pts, width = vessels[int(rng.integers(len(vessels)))]
        r = rng.uniform(*cfg.blob_radius) * cfg.size * scale
        lo, hi = r + 1.0, s - r - 1.0
        inside = np.flatnonzero((pts[:, 0] > lo) & (pts[:, 0] < hi) & (pts[:, 1] > lo) & (pts[:, 1] < hi))
        i = int(rng.choice(inside)) if inside.size else len(pts) // 2
        tangent = pts[min(i + 1, len(pts) - 1)] - pts[max(i - 1, 0)]
        normal = np.array([-tangent[1], tangent[0]]) / (np.linalg.norm(tangent) + 1e-9)
        normal *= rng.choice([-1.0, 1.0])
        center = np.clip(pts[i] + normal * (0.5 * width + 0.6 * r), lo, hi)
        rx, ry = r, r * rng.uniform(0.8, 1.0)
        theta = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:s, 0:s] + 0.5
        dx, dy = xx - center[0], yy - center[1]
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        rho2 = u * u + v * v
        alpha = np.clip((1.0 - np.sqrt(rho2)) * r + 0.5, 0, 1)[..., None]
        base = vcol * (1 - cfg.blob_contrast) + BLOB_TINT * bright * cfg.blob_contrast
        dome = np.sqrt(np.clip(1.0 - rho2, 0, 1))[..., None]
        hl = np.exp(-((u + 0.35) ** 2 + (v + 0.35) ** 2) / 0.08)[..., None]
        color = base * (0.78 + 0.3 * dome) + 40.0 * hl
        img = img * (1 - alpha) + color * alpha
        ys, xs = np.nonzero(alpha[..., 0] > 0.5)
        box = [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]

    img += rng.normal(0, cfg.noise, size=img.shape)
    return Scene(np.clip(img, 0, 255), box)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _n_positive(n: int, ratio: float) -> int:
    return int(round(n / (ratio + 1.0)))


def generate_images(cfg: SynthConfig):
    """In-memory corpus: ``(images uint8 (N,S,S,3), labels (N,), boxes list)``."""
    n_y = _n_positive(cfg.n_images, cfg.ratio)
    order = np.random.default_rng(cfg.seed).permutation(cfg.n_images)
    labels = np.zeros(cfg.n_images, dtype=np.int64)
    labels[order[:n_y]] = 1
    images = np.empty((cfg.n_images, cfg.size, cfg.size, 3), dtype=np.uint8)
    boxes = []
    for i in range(cfg.n_images):
        rng = np.random.default_rng([cfg.seed, 1, i])
        sc = render_scene(cfg, rng, bool(labels[i]))
        images[i] = to_uint8(sc.image)
        boxes.append(sc.box)
    return images, labels, boxes


def _video_labels(cfg: SynthConfig, rng) -> list[str]:
    labels: list[str] = []
    current = "X" if rng.random() < 0.7 else "Y"
    while len(labels) < cfg.frames_per_video:
        n = int(rng.integers(cfg.min_run, cfg.max_run + 1))
        if current == "X":
            n = int(round(n * cfg.ratio))
        labels += [current] * n
        if rng.random() < cfg.z_fraction * 4:
            labels += ["Z"] * int(rng.integers(4, 12))
        current = "Y" if current == "X" else "X"
    return labels[: cfg.frames_per_video]


def generate_video(cfg: SynthConfig, video: int):
    """Frames of one synthetic video: ``(frames uint8 (T,S,S,3), labels, boxes)``.

    The scene is fixed per video; the view drifts smoothly over a larger
    canvas, and Type-Z frames are motion-blurred views.
    """
    rng = np.random.default_rng([cfg.seed, 2, video])
    s = cfg.size
    margin = max(2, s // 8)
    canvas = s + 2 * margin
    state = rng.bit_generator.state
    neg = render_scene(cfg, rng, positive=False, size=canvas)
    rng.bit_generator.state = state  # same scene, plus the blob
    pos = render_scene(cfg, rng, positive=True, size=canvas)
    labels = _video_labels(cfg, rng)
    t = np.arange(len(labels))
    ph = rng.uniform(0, 2 * np.pi, size=4)
    dx = np.rint(margin * (0.6 * np.sin(t / 37.0 + ph[0]) + 0.4 * np.sin(t / 11.0 + ph[1]))).astype(int)
    dy = np.rint(margin * (0.6 * np.sin(t / 41.0 + ph[2]) + 0.4 * np.sin(t / 13.0 + ph[3]))).astype(int)
    frames = np.empty((len(labels), s, s, 3), dtype=np.uint8)
    boxes = []
    for i, lab in enumerate(labels):
        x0, y0 = margin + dx[i], margin + dy[i]
        src = pos if lab == "Y" else neg
        view = src.image[y0 : y0 + s, x0 : x0 + s]
        if lab == "Z":
            view = np.mean([src.image[y0 : y0 + s, max(0, x0 - k) : max(0, x0 - k) + s] for k in range(0, 2 * margin, 2)], axis=0)
        flicker = 1.0 + 0.03 * np.sin(i / 5.0 + ph[0])
        view = view * flicker + rng.normal(0, cfg.noise * 0.5, size=view.shape)
        frames[i] = to_uint8(view)
        box = None
        if lab == "Y" and pos.box is not None:
            bx0, by0, bx1, by1 = pos.box
            box = [int(max(bx0 - x0, 0)), int(max(by0 - y0, 0)), int(min(bx1 - x0, s)), int(min(by1 - y0, s))]
            if box[2] <= box[0] or box[3] <= box[1]:
                box = None
        boxes.append(box)
    return frames, labels, boxes


def synth_generate(cfg: SynthConfig, out_dir) -> SynthResult:
    """Write PNG frames, ``manifest.jsonl`` and the ``boxes.jsonl`` side channel."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    records, box_rows = [], []
    vids = [f"vid{v:02d}" for v in range(cfg.n_videos)]

    def emit(vid, idx, img, label, box):
        rel = f"frames/{vid}/{idx:06d}.png"
        save_png(root / rel, img)
        records.append(ManifestRecord(vid, idx, rel, label))
        if label == "Y" and box is not None:
            box_rows.append({"video_id": vid, "frame_index": idx, "box": box})

    if cfg.temporal:
        for v, vid in enumerate(vids):
            frames, labels, boxes = generate_video(cfg, v)
            for i in range(len(frames)):
                emit(vid, i, frames[i], labels[i], boxes[i])
    else:
        images, labels, boxes = generate_images(cfg)
        per_video = [0] * cfg.n_videos
        for i in range(cfg.n_images):
            v = i % cfg.n_videos
            emit(vids[v], per_video[v], images[i], "Y" if labels[i] else "X", boxes[i])
            per_video[v] += 1

    records.sort(key=lambda r: (r.video_id, r.frame_index))
    box_rows.sort(key=lambda b: (b["video_id"], b["frame_index"]))
    manifest_path = root / "manifest.jsonl"
    write_manifest(manifest_path, records)
    boxes_path = root / "boxes.jsonl"
    with open(boxes_path, "w", encoding="utf-8") as fh:
        for row in box_rows:
            fh.write(json.dumps(row) + "\n")
    (root / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    n_x = sum(r.label == "X" for r in records)
    n_y = sum(r.label == "Y" for r in records)
    return SynthResult(root, manifest_path, boxes_path, n_x, n_y, len(records) - n_x - n_y, records)


def load_boxes(path) -> dict[tuple[str, int], list[int]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[(row["video_id"], int(row["frame_index"]))] = list(row["box"])
    return out
