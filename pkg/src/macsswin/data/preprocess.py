"""Image loading, resizing/normalisation and seeded augmentation."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..exceptions import ImageReadError
from ..models import IMAGENET_MEAN, IMAGENET_STD


def load_image(path) -> np.ndarray:
    """Decode an image file to uint8 RGB ``(H, W, 3)``."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise ImageReadError(path, str(e)) from e


def save_png(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG", compress_level=6)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge-clamped, no antialiasing
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``(H, W)`` or ``(H, W, C)`` data, returned as float64."""
    a = np.asarray(img, dtype=np.float64)
    rows = _interp_matrix(a.shape[0], out_h)
    cols = _interp_matrix(a.shape[1], out_w)
    out = np.tensordot(rows, a, axes=(1, 0))
    out = np.tensordot(cols, out, axes=(1, 1)).swapaxes(0, 1)
    return out


def normalize_resize(
    img: np.ndarray,
    size: int = 224,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
) -> np.ndarray:
    """Resize the whole frame (no crop) to ``size x size`` and standardise.

    Returns float32 ``(3, size, size)``: ``(pixel / 255 - mean) / std``.
    """
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got {a.shape}")
    if a.shape[:2] != (size, size):
        a = resize_bilinear(a, size, size)
    a = a.astype(np.float64) / 255.0
    a = (a - np.asarray(mean)) / np.asarray(std)
    return np.ascontiguousarray(a.transpose(2, 0, 1), dtype=np.float32)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_p: float = 0.5
    crop_scale: tuple[float, float] = (0.6, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    jitter: float = 0.2
    crop: bool = True

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(enabled=False)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def _random_resized_crop(img: np.ndarray, rng: np.random.Generator, scale, ratio) -> np.ndarray:
    h, w = img.shape[:2]
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            crop = img[y0 : y0 + ch, x0 : x0 + cw]
            return resize_bilinear(crop, h, w)
    return img.astype(np.float64)


def _color_jitter(img: np.ndarray, rng: np.random.Generator, amount: float) -> np.ndarray:
    b, c, s = rng.uniform(1 - amount, 1 + amount, size=3)
    out = img * b
    gray = out @ np.array([0.299, 0.587, 0.114])
    out = (out - gray.mean()) * c + gray.mean()
    gray = out @ np.array([0.299, 0.587, 0.114])
    return (out - gray[..., None]) * s + gray[..., None]


def augment(img: np.ndarray, seed: int, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Seeded crop / flip / colour jitter; identical seeds give identical bytes."""
    if not cfg.enabled:
        return img
    rng = np.random.default_rng(seed)
    out = np.asarray(img, dtype=np.float64)
    if cfg.crop:
        out = _random_resized_crop(out, rng, cfg.crop_scale, cfg.crop_ratio)
    if rng.random() < cfg.flip_p:
        out = out[:, ::-1]
    if cfg.jitter > 0:
        out = _color_jitter(out, rng, cfg.jitter)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
