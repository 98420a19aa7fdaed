"""Input checks shared by the estimator wrappers and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import DTypeError, ShapeError, ValidationError


def check_images(X, size: int | None = None) -> np.ndarray:
    """Validate a stack of RGB frames ``(N, S, S, 3)`` and return it as uint8.

    Float input must already hold 0-255 pixel values.
    """
    a = np.asarray(X)
    if a.ndim != 4 or a.shape[-1] != 3:
        raise ShapeError(f"expected frames shaped (N, H, W, 3), got {a.shape}")
    if a.shape[1] != a.shape[2]:
        raise ShapeError(f"frames must be square, got {a.shape[1]}x{a.shape[2]}")
    if size is not None and a.shape[1] != size:
        raise ShapeError(f"frames must be {size}x{size}, got {a.shape[1]}x{a.shape[2]}")
    if len(a) == 0:
        raise ValidationError("no frames given")
    return _as_uint8(a)


def check_clips(X, num_frames: int | None = None, size: int | None = None) -> np.ndarray:
    """Validate clips ``(N, T, S, S, 3)`` and return them as uint8."""
    a = np.asarray(X)
    if a.ndim != 5 or a.shape[-1] != 3:
        raise ShapeError(f"expected clips shaped (N, T, H, W, 3), got {a.shape}")
    if num_frames is not None and a.shape[1] != num_frames:
        raise ShapeError(f"clips must hold exactly {num_frames} frames, got {a.shape[1]}")
    if a.shape[2] != a.shape[3] or (size is not None and a.shape[2] != size):
        raise ShapeError(f"clip frames must be square{f' {size}px' if size else ''}, got {a.shape[2]}x{a.shape[3]}")
    if len(a) == 0:
        raise ValidationError("no clips given")
    return _as_uint8(a)


def _as_uint8(a: np.ndarray) -> np.ndarray:
    if a.dtype == np.uint8:
        return a
    if a.dtype.kind not in "iuf":
        raise DTypeError(f"pixel data must be numeric, got {a.dtype}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("pixel data contains NaN or infinity")
    if a.min() < 0 or a.max() > 255:
        raise ValidationError("pixel values must lie in [0, 255]")
    return np.rint(a).astype(np.uint8)


def check_binary_labels(y, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Encode labels as 0/1 and return ``(encoded, classes)``.

    ``classes`` is sorted; the second class is the positive one, so
    ``["X", "Y"]`` and ``[0, 1]`` both map Type-Y to 1.
    """
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {y.shape}")
    if n is not None and len(y) != n:
        raise ValidationError(f"{len(y)} labels for {n} samples")
    classes = np.unique(y)
    if len(classes) > 2:
        raise ValidationError(f"binary labels expected, got classes {classes.tolist()}")
    if len(classes) == 1:
        if classes[0] in ("X", 0):
            classes = np.array(["X", "Y"] if classes[0] == "X" else [0, 1])
        elif classes[0] in ("Y", 1):
            classes = np.array(["X", "Y"] if classes[0] == "Y" else [0, 1])
        else:
            raise ValidationError(f"cannot infer the positive class from a single label {classes[0]!r}")
    return (y == classes[1]).astype(np.int64), classes
