"""Windowed self-attention building blocks (2D and 3D).

Token grids are channels-last: ``(B, H, W, C)`` for images and
``(B, T, H, W, C)`` for clips. Window helpers are written once for any number
of grid axes; the 2D/3D names are thin wrappers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ParameterError, ShapeError
from .nn import LayerNorm, Linear, Mlp, Module, Parameter, trunc_normal
from .tensor import Tensor

MASK_VALUE = -1e4


@dataclass(frozen=True)
class WindowSpec2D:
    size: int
    shift: int = 0

    def __post_init__(self):
        if not 0 <= self.shift < self.size:
            raise ParameterError(f"shift {self.shift} outside [0, {self.size})")


@dataclass(frozen=True)
class WindowSpec3D:
    size: tuple[int, int, int]
    shift: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        for s, m in zip(self.shift, self.size):
            if not 0 <= s < m:
                raise ParameterError(f"shift {self.shift} outside window {self.size}")


@dataclass(frozen=True)
class BlockConfig:
    dim: int
    heads: int
    window: WindowSpec2D | WindowSpec3D
    mlp_ratio: float = 4.0
    drop_path: float = 0.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def mlp_hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @property
    def window_size(self) -> tuple[int, ...]:
        s = self.window.size
        return (s, s) if isinstance(s, int) else tuple(s)

    @property
    def shift_size(self) -> tuple[int, ...]:
        s = self.window.shift
        return (s, s) if isinstance(s, int) else tuple(s)


def _wrap_np(fn):
    # lets the layout helpers accept plain arrays as well as tensors
    def inner(x, *args, **kwargs):
        if isinstance(x, np.ndarray):
            return fn(Tensor(x), *args, **kwargs).data
        return fn(x, *args, **kwargs)

    inner.__name__ = fn.__name__
    inner.__doc__ = fn.__doc__
    return inner


@_wrap_np
def partition_windows(x: Tensor, window: Sequence[int]) -> Tensor:
    """``(B, *grid, C)`` -> ``(B * nW, prod(window), C)``, windows in row-major order."""
    window = tuple(window)
    n = len(window)
    b, grid, c = x.shape[0], x.shape[1:-1], x.shape[-1]
    if len(grid) != n:
        raise ShapeError(f"grid {grid} has {len(grid)} axes, window {window} has {n}")
    if any(g % w for g, w in zip(grid, window)):
        raise ShapeError(f"grid {grid} is not a multiple of window {window}; pad first")
    split = [b]
    for g, w in zip(grid, window):
        split += [g // w, w]
    x = x.reshape(split + [c])
    order = [0] + [1 + 2 * i for i in range(n)] + [2 + 2 * i for i in range(n)] + [2 * n + 1]
    return x.permute(order).reshape(-1, int(np.prod(window)), c)


@_wrap_np
def reverse_windows(windows: Tensor, window: Sequence[int], grid: Sequence[int]) -> Tensor:
    """Inverse of :func:`partition_windows`."""
    window, grid = tuple(window), tuple(grid)
    n = len(window)
    counts = [g // w for g, w in zip(grid, window)]
    nw = int(np.prod(counts))
    if any(g % w for g, w in zip(grid, window)) or windows.shape[0] % nw or windows.shape[1] != np.prod(window):
        raise ShapeError(f"{windows.shape[0]} windows of {windows.shape[1]} tokens do not tile grid {grid}")
    b, c = windows.shape[0] // nw, windows.shape[-1]
    x = windows.reshape([b] + counts + list(window) + [c])
    order = [0]
    for i in range(n):
        order += [1 + i, 1 + n + i]
    order.append(2 * n + 1)
    return x.permute(order).reshape([b] + list(grid) + [c])


def window_partition(x, M: int):
    """Split a ``(B, H, W, C)`` (or ``(H, W, C)``) grid into ``M x M`` windows."""
    if x.ndim == 3:
        return partition_windows(x[None] if isinstance(x, np.ndarray) else x.reshape((1,) + x.shape), (M, M))
    return partition_windows(x, (M, M))


def window_reverse(windows, M: int, H: int, W: int):
    return reverse_windows(windows, (M, M), (H, W))


def window_partition_3d(x, window: Sequence[int]):
    return partition_windows(x, window)


def window_reverse_3d(windows, window: Sequence[int], grid: Sequence[int]):
    return reverse_windows(windows, window, grid)


def cyclic_shift(x, shift: Sequence[int], axes: Sequence[int] | None = None):
    """Roll the grid by ``-shift`` along the spatial axes (toroidally)."""
    shift = tuple(shift)
    if axes is None:
        axes = tuple(range(1, 1 + len(shift)))
    neg = tuple(-s for s in shift)
    if isinstance(x, np.ndarray):
        return np.roll(x, neg, axes) if any(shift) else x
    return T.roll(x, neg, axes)


def cyclic_unshift(x, shift: Sequence[int], axes: Sequence[int] | None = None):
    return cyclic_shift(x, tuple(-s for s in shift), axes)


def relative_position_index(window: Sequence[int], table_window: Sequence[int] | None = None) -> np.ndarray:
    """Map each token pair of a window to its row in the relative-bias table.

    ``table_window`` is the window the table was sized for; a smaller actual
    window (used when the grid is smaller than the window) indexes into the
    same table.
    """
    window = tuple(window)
    table_window = tuple(table_window or window)
    coords = np.stack(np.meshgrid(*[np.arange(w) for w in window], indexing="ij")).reshape(len(window), -1)
    rel = coords[:, :, None] - coords[:, None, :]
    index = np.zeros(rel.shape[1:], dtype=np.int64)
    for axis, m in enumerate(table_window):
        index = index * (2 * m - 1) + rel[axis] + (m - 1)
    return index


def table_size(window: Sequence[int]) -> int:
    return int(np.prod([2 * m - 1 for m in window]))


def region_labels(grid: Sequence[int], window: Sequence[int], shift: Sequence[int]) -> np.ndarray:
    """Label each position of the shifted grid by its pre-shift region."""
    labels = np.zeros(tuple(grid), dtype=np.int64)
    for axis, (g, w, s) in enumerate(zip(grid, window, shift)):
        lab = np.zeros(g, dtype=np.int64)
        if s > 0:
            lab[g - w : g - s] = 1
            lab[g - s :] = 2
        shape = [1] * len(grid)
        shape[axis] = g
        labels = labels * 3 + lab.reshape(shape)
    return labels


def shift_mask(grid: Sequence[int], window: Sequence[int], shift: Sequence[int]) -> np.ndarray:
    """Additive attention mask ``(nW, N, N)``: 0 within a region, ``MASK_VALUE`` across."""
    labels = region_labels(grid, window, shift)
    win = partition_windows(labels[None, ..., None].astype(np.float64), window)[..., 0]
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, MASK_VALUE, 0.0).astype(np.float32)


def build_attn_mask(H: int, W: int, M: int, s: int) -> np.ndarray:
    """Mask for shifted 2D windows; ``s`` must be 0 or ``M // 2``."""
    if s not in (0, M // 2):
        raise ParameterError(f"shift must be 0 or {M // 2} for window {M}, got {s}")
    if H % M or W % M:
        raise ShapeError(f"grid {H}x{W} is not a multiple of window {M}")
    return shift_mask((H, W), (M, M), (s, s))


def build_attn_mask_3d(grid: Sequence[int], window: Sequence[int], shift: Sequence[int]) -> np.ndarray:
    if any(g % w for g, w in zip(grid, window)):
        raise ShapeError(f"grid {tuple(grid)} is not a multiple of window {tuple(window)}")
    for s, w in zip(shift, window):
        if not 0 <= s < w:
            raise ParameterError(f"shift {tuple(shift)} outside window {tuple(window)}")
    return shift_mask(grid, window, shift)


def effective_window(grid: Sequence[int], window: Sequence[int], shift: Sequence[int]):
    """Clamp the window to the grid on axes where the grid is not larger; no shift there."""
    win, sh = [], []
    for g, w, s in zip(grid, window, shift):
        if g <= w:
            win.append(g)
            sh.append(0)
        else:
            win.append(w)
            sh.append(s)
    return tuple(win), tuple(sh)


class WindowAttention(Module):
    """Multi-head self-attention inside windows with a learned relative position bias."""

    def __init__(self, dim: int, heads: int, window: Sequence[int], rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.window = tuple(window)
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.relative_position_bias_table = Parameter(trunc_normal(rng, (table_size(self.window), heads)))
        self._index_cache: dict[tuple, np.ndarray] = {}

    def bias_index(self, window: Sequence[int]) -> np.ndarray:
        key = tuple(window)
        if key not in self._index_cache:
            self._index_cache[key] = relative_position_index(key, self.window)
        return self._index_cache[key]

    def relative_bias(self, window: Sequence[int] | None = None) -> Tensor:
        """Per-head bias ``(heads, N, N)`` for the given (possibly clamped) window."""
        index = self.bias_index(window or self.window)
        bias = T.take_rows(self.relative_position_bias_table, index)  # N, N, heads
        return bias.permute(2, 0, 1)

    def forward(self, x: Tensor, mask: np.ndarray | None = None, window=None, return_attn: bool = False):
        bw, n, c = x.shape
        h, d = self.heads, c // self.heads
        qkv = self.qkv(x).reshape(bw, n, 3, h, d).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q * self.scale, k.transpose(-2, -1))
        scores = scores + self.relative_bias(window)
        if mask is not None:
            nw = mask.shape[0]
            scores = scores.reshape(bw // nw, nw, h, n, n) + mask[None, :, None].astype(x.dtype)
            scores = scores.reshape(bw, h, n, n)
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v).permute(0, 2, 1, 3).reshape(bw, n, c)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class SwinBlock(Module):
    """Pre-norm residual block: (shifted) window attention, then an MLP.

    Works for any number of grid axes; ``cfg.window`` decides 2D vs 3D.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.window = cfg.window_size
        self.shift = cfg.shift_size
        for s, w in zip(self.shift, self.window):
            if not 0 <= s < w:
                raise ParameterError(f"shift {self.shift} outside window {self.window}")
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = WindowAttention(cfg.dim, cfg.heads, self.window, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp = Mlp(cfg.dim, cfg.mlp_hidden, rng)
        self.drop_path = cfg.drop_path
        self.rng = np.random.default_rng(int(rng.integers(2**31)))
        self._mask_cache: dict[tuple, np.ndarray | None] = {}

    def _mask(self, grid, window, shift):
        key = (grid, window, shift)
        if key not in self._mask_cache:
            self._mask_cache[key] = shift_mask(grid, window, shift) if any(shift) else None
        return self._mask_cache[key]

    def _residual(self, x: Tensor) -> Tensor:
        if self.training and self.drop_path > 0:
            return T.drop_path(x, self.drop_path, self.rng)
        return x

    def attention_branch(self, x: Tensor) -> Tensor:
        grid = tuple(x.shape[1:-1])
        if len(grid) != len(self.window):
            raise ShapeError(f"block expects {len(self.window)} grid axes, got input {x.shape}")
        if x.shape[-1] != self.cfg.dim:
            raise ShapeError(f"block dim {self.cfg.dim} does not match input {x.shape}")
        window, shift = effective_window(grid, self.window, self.shift)
        pads = [(0, (-g) % w) for g, w in zip(grid, window)]
        h = T.pad(self.norm1(x), [(0, 0)] + pads + [(0, 0)])
        padded = tuple(h.shape[1:-1])
        axes = tuple(range(1, 1 + len(grid)))
        if any(shift):
            h = cyclic_shift(h, shift, axes)
        windows = partition_windows(h, window)
        windows = self.attn(windows, mask=self._mask(padded, window, shift), window=window)
        h = reverse_windows(windows, window, padded)
        if any(shift):
            h = cyclic_unshift(h, shift, axes)
        if any(p for _, p in pads):
            h = h[(slice(None),) + tuple(slice(0, g) for g in grid)]
        return h

    def forward(self, x: Tensor) -> Tensor:
        x = x + self._residual(self.attention_branch(x))
        return x + self._residual(self.mlp(self.norm2(x)))


def swin_block(x: Tensor, block: SwinBlock) -> Tensor:
    return block(x)


class PatchEmbed(Module):
    """Non-overlapping patch projection followed by LayerNorm.

    Input is channels-first ``(B, C, *extent)``; output is channels-last
    ``(B, *grid, dim)``. The flattened patch order is (channel, *patch axes),
    the same layout as a convolution kernel reshaped to ``(dim, -1)``.
    """

    def __init__(self, patch: Sequence[int], in_chans: int, dim: int, rng: np.random.Generator):
        self.patch = tuple(patch)
        self.in_chans = in_chans
        self.proj = Linear(in_chans * int(np.prod(self.patch)), dim, rng)
        self.norm = LayerNorm(dim)

    def grid(self, extent: Sequence[int]) -> tuple[int, ...]:
        return tuple(e // p for e, p in zip(extent, self.patch))

    def forward(self, x: Tensor) -> Tensor:
        n = len(self.patch)
        b, c, extent = x.shape[0], x.shape[1], x.shape[2:]
        if c != self.in_chans or len(extent) != n:
            raise ShapeError(f"patch embed expects (B, {self.in_chans}, {n} axes), got {x.shape}")
        if any(e % p for e, p in zip(extent, self.patch)):
            raise ShapeError(f"input extent {extent} not divisible by patch {self.patch}")
        split = [b, c]
        for e, p in zip(extent, self.patch):
            split += [e // p, p]
        order = [0] + [2 + 2 * i for i in range(n)] + [1] + [3 + 2 * i for i in range(n)]
        x = x.reshape(split).permute(order)
        x = x.reshape([b] + list(self.grid(extent)) + [-1])
        return self.norm(self.proj(x))


class PatchMerging(Module):
    """Concatenate 2x2 spatial neighbourhoods (TL, BL, TR, BR), norm, project 4C -> 2C.

    Acts on the last two grid axes, so a leading temporal axis is kept.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-3], x.shape[-2]
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even spatial extents, got {h}x{w}")
        e = Ellipsis
        parts = [
            x[e, 0::2, 0::2, :],
            x[e, 1::2, 0::2, :],
            x[e, 0::2, 1::2, :],
            x[e, 1::2, 1::2, :],
        ]
        return self.reduction(self.norm(T.concat(parts, axis=-1)))


def patch_embed(img: Tensor, module: PatchEmbed) -> Tensor:
    return module(img)


def patch_merge(tokens: Tensor, module: PatchMerging) -> Tensor:
    return module(tokens)
