"""Grad-CAM at the final normalization layer, heatmap overlays and
localization scoring against ground-truth boxes."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data.preprocess import resize_bilinear, save_png
from .exceptions import ContractError, ValidationError
from .tensor import Tape, Tensor

# blue -> cyan -> green -> yellow -> red
_RAMP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_RAMP_COLORS = np.array([[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=np.float64)


@dataclass(frozen=True)
class CamMap:
    grid: np.ndarray  # (h, w), nonnegative, max 1 unless zero
    class_index: int
    source: object = None

    @property
    def is_zero(self) -> bool:
        return not np.any(self.grid > 0)

    @property
    def peak(self) -> tuple[int, int]:
        r, c = np.unravel_index(int(np.argmax(self.grid)), self.grid.shape)
        return int(r), int(c)


@dataclass(frozen=True)
class LocalizationScore:
    peak_inside: bool
    mass_fraction: float
    peak_xy: tuple[float, float] | None
    zero_map: bool = False

    def to_dict(self) -> dict:
        return {"peak_inside": self.peak_inside, "mass_fraction": self.mass_fraction,
                "peak_xy": list(self.peak_xy) if self.peak_xy else None, "zero_map": self.zero_map}


def cam_from_features(features: np.ndarray, score_fn: Callable[[Tensor], Tensor], class_index: int = 1,
                      source=None) -> CamMap:
    """Grad-CAM of ``score_fn`` with respect to a ``(h, w, C)`` feature grid.

    ``score_fn`` maps a ``(1, h, w, C)`` tensor to a scalar class score.
    """
    f = np.asarray(features)
    if f.ndim != 3:
        raise ValidationError(f"features must be (h, w, C), got {f.shape}")
    leaf = Tensor(f[None], requires_grad=True)
    with Tape() as tape:
        score = score_fn(leaf)
    if score.size != 1:
        raise ContractError(f"class score must be a scalar, got shape {score.shape}")
    tape.backward(score)
    if leaf.grad is None:
        raise ContractError("no gradient reached the feature grid; the score does not depend on it")
    grads = leaf.grad[0].astype(np.float64)
    weights = grads.mean(axis=(0, 1))
    cam = np.maximum((f.astype(np.float64) * weights).sum(axis=-1), 0.0)
    top = cam.max()
    if top > 0:
        cam = cam / top
    return CamMap(cam, class_index, source)


def grad_cam(model, img: np.ndarray, class_index: int = 1, source=None, score_scale: float = 1.0) -> CamMap:
    """Grad-CAM of the target-class logit for one normalized ``(C, H, W)`` frame.

    Gradients are captured at the output tokens of the final normalization
    layer; the backbone runs without a tape, only the head is differentiated.
    """
    for hook in ("final_features", "head_from_features"):
        if not hasattr(model, hook):
            raise ContractError(f"{type(model).__name__} does not expose {hook}() for gradient capture")
    if class_index not in (0, 1):
        raise ValidationError(f"class index must be 0 (X) or 1 (Y), got {class_index}")
    x = np.asarray(img, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValidationError("grad_cam works on one frame at a time")
    model.eval()
    feats = model.final_features(Tensor(x)).data[0]
    if feats.ndim != 3:
        raise ContractError(f"expected a 2-D token grid at the hook point, got {feats.shape}")
    try:
        cam = cam_from_features(
            feats, lambda t: model.head_from_features(t)[0, class_index] * score_scale, class_index, source
        )
    finally:
        model.zero_grad()
    return cam


def upsample_cam(cam: CamMap | np.ndarray, height: int, width: int) -> np.ndarray:
    grid = cam.grid if isinstance(cam, CamMap) else np.asarray(cam, dtype=np.float64)
    return resize_bilinear(grid, height, width)


def color_ramp(values: np.ndarray) -> np.ndarray:
    v = np.clip(values, 0, 1)
    return np.stack([np.interp(v, _RAMP_STOPS, _RAMP_COLORS[:, c]) for c in range(3)], axis=-1)


def overlay(cam: CamMap, img: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the colour-ramped CAM over an RGB frame; per-pixel opacity is ``alpha * value``."""
    base = np.asarray(img)
    if base.ndim != 3 or base.shape[2] != 3:
        raise ValidationError(f"expected an (H, W, 3) frame, got {base.shape}")
    up = np.clip(upsample_cam(cam, base.shape[0], base.shape[1]), 0, 1)
    a = (alpha * up)[..., None]
    out = base.astype(np.float64) * (1 - a) + color_ramp(up) * a
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def upsample_overlay(cam: CamMap, img: np.ndarray, path, alpha: float = 0.5) -> np.ndarray:
    """Write the overlay as PNG and return the blended pixels."""
    out = overlay(cam, img, alpha)
    save_png(path, out)
    return out


def localization_score(cam: CamMap, box, height: int, width: int) -> LocalizationScore:
    """Score a CAM against ``box = [x0, y0, x1, y1)`` in frame pixels.

    The peak is the centroid of the maximal plateau of the upsampled map
    (bilinear upsampling can produce ties), measured at pixel centres.
    """
    if box is None or len(box) != 4:
        raise ValidationError(f"box must be [x0, y0, x1, y1], got {box!r}")
    x0, y0, x1, y1 = (float(b) for b in box)
    if not (x1 > x0 and y1 > y0):
        raise ValidationError(f"empty box {box!r}")
    if cam.is_zero:
        return LocalizationScore(False, 0.0, None, True)
    up = upsample_cam(cam, height, width)
    ys, xs = np.nonzero(up >= up.max() - 1e-12)
    px, py = float(xs.mean()) + 0.5, float(ys.mean()) + 0.5
    inside = x0 <= px <= x1 and y0 <= py <= y1
    ix0, iy0 = max(int(np.floor(x0)), 0), max(int(np.floor(y0)), 0)
    ix1, iy1 = min(int(np.ceil(x1)), width), min(int(np.ceil(y1)), height)
    total = up.sum()
    mass = float(up[iy0:iy1, ix0:ix1].sum() / total) if total > 0 else 0.0
    return LocalizationScore(bool(inside), min(max(mass, 0.0), 1.0), (px, py))


def write_localization_report(rows: list[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
