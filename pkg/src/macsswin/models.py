"""Frame-level (MacsSwin) and clip-level (VidMacsSwin) classifiers."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ParameterError, ShapeError
from .nn import LayerNorm, Linear, Module
from .swin import BlockConfig, PatchEmbed, PatchMerging, SwinBlock, WindowSpec2D, WindowSpec3D
from .tensor import Tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LABELS = ("X", "Y")
NUM_CLASSES = 2


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _config_from_dict(cls, d: dict):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cls(**{k: _tuplify(v) for k, v in d.items()})


@dataclass(frozen=True)
class MacsSwinConfig:
    img_size: int = 224
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    heads: tuple = (3, 6, 12, 24)
    window: int = 7
    mlp_ratio: float = 4.0
    drop_path: float = 0.0
    num_classes: int = NUM_CLASSES
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        if self.num_classes != NUM_CLASSES:
            raise ConfigError("the classifier is binary (Type-X vs Type-Y); num_classes must be 2")
        if len(self.depths) != len(self.heads):
            raise ConfigError("depths and heads need one entry per stage")
        if self.img_size % self.patch_size:
            raise ConfigError(f"img_size {self.img_size} not divisible by patch {self.patch_size}")
        for d, h in zip(self.dims, self.heads):
            if d % h:
                raise ConfigError(f"stage dim {d} not divisible by {h} heads")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.embed_dim * 2**i for i in range(len(self.depths)))

    @property
    def num_features(self) -> int:
        return self.dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MacsSwinConfig":
        return _config_from_dict(cls, d)


@dataclass(frozen=True)
class VidMacsSwinConfig:
    img_size: int = 224
    num_frames: int = 32
    patch_size: tuple = (2, 4, 4)
    in_chans: int = 3
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    heads: tuple = (3, 6, 12, 24)
    window: tuple = (8, 7, 7)
    mlp_ratio: float = 4.0
    drop_path: float = 0.0
    head_dropout: float = 0.0
    num_classes: int = NUM_CLASSES
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        if self.num_classes != NUM_CLASSES:
            raise ConfigError("the classifier is binary (Type-X vs Type-Y); num_classes must be 2")
        if len(self.depths) != len(self.heads):
            raise ConfigError("depths and heads need one entry per stage")
        if self.num_frames % self.patch_size[0] or self.img_size % self.patch_size[1] or self.img_size % self.patch_size[2]:
            raise ConfigError(f"input {self.num_frames}x{self.img_size}^2 not divisible by patch {self.patch_size}")
        for d, h in zip(self.dims, self.heads):
            if d % h:
                raise ConfigError(f"stage dim {d} not divisible by {h} heads")

    dims = MacsSwinConfig.dims
    num_features = MacsSwinConfig.num_features
    to_dict = MacsSwinConfig.to_dict

    @classmethod
    def from_dict(cls, d: dict) -> "VidMacsSwinConfig":
        return _config_from_dict(cls, d)


PRESETS = {
    "swin_t": MacsSwinConfig(),
    "tiny": MacsSwinConfig(img_size=64, patch_size=2, embed_dim=24, depths=(1, 1, 2, 1), heads=(1, 2, 4, 8), window=4),
}

VIDEO_PRESETS = {
    "swin_t": VidMacsSwinConfig(),
    "tiny": VidMacsSwinConfig(
        img_size=64, num_frames=8, patch_size=(2, 4, 4), embed_dim=24,
        depths=(1, 1, 2, 1), heads=(1, 2, 4, 8), window=(2, 4, 4),
    ),
}


def get_config(preset: str | MacsSwinConfig | VidMacsSwinConfig, video: bool = False, **overrides):
    if isinstance(preset, (MacsSwinConfig, VidMacsSwinConfig)):
        cfg = preset
    else:
        table = VIDEO_PRESETS if video else PRESETS
        if preset not in table:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(table)}")
        cfg = table[preset]
    return replace(cfg, **{k: _tuplify(v) for k, v in overrides.items()}) if overrides else cfg


class Stage(Module):
    def __init__(self, blocks: list[SwinBlock], downsample: PatchMerging | None):
        self.blocks = blocks
        self.downsample = downsample


class ClassifierHead(Module):
    """Linear map from the pooled feature to the two class logits."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc = Linear(dim, NUM_CLASSES, rng)

    def forward(self, pooled: Tensor) -> Tensor:
        return self.fc(pooled)


class I3DHead(Module):
    """Spatiotemporal average pool, dropout, linear to two logits."""

    def __init__(self, dim: int, rng: np.random.Generator, dropout: float = 0.0):
        self.fc = Linear(dim, NUM_CLASSES, rng)
        self.dropout = dropout
        self.rng = np.random.default_rng(int(rng.integers(2**31)))

    def pool(self, tokens: Tensor) -> Tensor:
        return T.mean(tokens, axis=tuple(range(1, tokens.ndim - 1)))

    def forward(self, tokens: Tensor) -> Tensor:
        x = self.pool(tokens)
        if self.training and self.dropout > 0:
            x = T.dropout(x, self.dropout, self.rng)
        return self.fc(x)


def _build_stages(cfg, windows: list, rng) -> list[Stage]:
    stages = []
    dpr = np.linspace(0, cfg.drop_path, sum(cfg.depths)) if sum(cfg.depths) else []
    k = 0
    for i, (depth, heads, dim) in enumerate(zip(cfg.depths, cfg.heads, cfg.dims)):
        blocks = []
        for j in range(depth):
            window = windows[j % 2]
            blocks.append(SwinBlock(BlockConfig(dim, heads, window, cfg.mlp_ratio, float(dpr[k])), rng))
            k += 1
        down = PatchMerging(dim, rng) if i < len(cfg.depths) - 1 else None
        stages.append(Stage(blocks, down))
    return stages


class _Backbone(Module):
    kind = ""

    def _input_check(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def forward_stages(self, x: Tensor) -> list[Tensor]:
        """Block outputs of every stage (before patch merging)."""
        x = self.patch_embed(self._input_check(x))
        outs = []
        for stage in self.stages:
            for blk in stage.blocks:
                x = blk(x)
            outs.append(x)
            if stage.downsample is not None:
                x = stage.downsample(x)
        return outs

    def final_features(self, x: Tensor) -> Tensor:
        """Token grid after the final normalization layer (Grad-CAM hook point)."""
        return self.norm(self.forward_stages(x)[-1])

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == self._unbatched_ndim
        if squeeze:
            x = x.reshape((1,) + x.shape)
        logits = self.head_from_features(self.final_features(x))
        return logits.reshape(logits.shape[1:]) if squeeze else logits

    def stage_modules(self, i: int) -> list[Module]:
        mods: list[Module] = [self.stages[i]]
        if i == 0:
            mods.insert(0, self.patch_embed)
        return mods


class MacsSwin(_Backbone):
    """Hierarchical shifted-window classifier for single frames."""

    kind = "image"
    _unbatched_ndim = 3

    def __init__(self, cfg: MacsSwinConfig | str = "swin_t", seed: int = 0):
        cfg = get_config(cfg)
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.patch_embed = PatchEmbed((cfg.patch_size, cfg.patch_size), cfg.in_chans, cfg.embed_dim, rng)
        windows = [WindowSpec2D(cfg.window, 0), WindowSpec2D(cfg.window, cfg.window // 2)]
        self.stages = _build_stages(cfg, windows, rng)
        self.norm = LayerNorm(cfg.num_features)
        self.head = ClassifierHead(cfg.num_features, rng)

    def _input_check(self, x: Tensor) -> Tensor:
        c = self.cfg
        if x.ndim != 4 or x.shape[1:] != (c.in_chans, c.img_size, c.img_size):
            raise ShapeError(f"expected input (B, {c.in_chans}, {c.img_size}, {c.img_size}), got {x.shape}")
        return x

    def pool(self, grid: Tensor) -> Tensor:
        return T.mean(grid, axis=(1, 2))

    def features(self, x: Tensor) -> Tensor:
        """Global-average-pooled final features, ``(B, num_features)``."""
        return self.pool(self.final_features(x))

    def head_from_features(self, grid: Tensor) -> Tensor:
        return self.head(self.pool(grid))

    def forward_image(self, img: Tensor) -> Tensor:
        return self.forward(img)


class VidMacsSwin(_Backbone):
    """3D shifted-window classifier; its output is the prediction for the clip's center frame."""

    kind = "video"
    _unbatched_ndim = 4

    def __init__(self, cfg: VidMacsSwinConfig | str = "swin_t", seed: int = 0):
        cfg = get_config(cfg, video=True)
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_chans, cfg.embed_dim, rng)
        w = tuple(cfg.window)
        windows = [WindowSpec3D(w, (0, 0, 0)), WindowSpec3D(w, tuple(m // 2 for m in w))]
        self.stages = _build_stages(cfg, windows, rng)
        self.norm = LayerNorm(cfg.num_features)
        self.head = I3DHead(cfg.num_features, rng, cfg.head_dropout)

    def _input_check(self, x: Tensor) -> Tensor:
        c = self.cfg
        want = (c.in_chans, c.num_frames, c.img_size, c.img_size)
        if x.ndim != 5 or x.shape[1:] != want:
            raise ShapeError(f"expected clip (B, {', '.join(map(str, want))}), got {x.shape}")
        return x

    def features(self, x: Tensor) -> Tensor:
        return self.head.pool(self.final_features(x))

    def head_from_features(self, grid: Tensor) -> Tensor:
        return self.head(grid)

    def forward_video(self, clip: Tensor) -> Tensor:
        return self.forward(clip)


def build_model(kind: str, cfg, seed: int = 0):
    if kind == "image":
        return MacsSwin(MacsSwinConfig.from_dict(cfg) if isinstance(cfg, dict) else cfg, seed)
    if kind == "video":
        return VidMacsSwin(VidMacsSwinConfig.from_dict(cfg) if isinstance(cfg, dict) else cfg, seed)
    raise ConfigError(f"unknown model kind {kind!r}")


def softmax_scores(logits) -> np.ndarray:
    """Probability of Type-Y for logits of shape ``(2,)`` or ``(N, 2)``."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p[..., 1]


def predict(logits, dt: float = 0.5):
    """Threshold the Type-Y softmax score; ties (``score == dt``) go to Y.

    Returns ``(labels, scores)`` with label 1 meaning Type-Y.
    """
    if not 0.0 < dt < 1.0:
        raise ParameterError(f"decision threshold must lie in (0, 1), got {dt}")
    scores = softmax_scores(logits)
    return (scores >= dt).astype(np.int64), scores


def freeze_stages(model: _Backbone, n: int) -> _Backbone:
    """Exclude the patch embedding and the first ``n`` stages from training.

    A stage includes the patch merging that follows it, so ``n=4`` leaves only
    the final norm and the head trainable.
    """
    if not 0 <= n <= len(model.stages):
        raise ParameterError(f"can freeze 0..{len(model.stages)} stages, got {n}")
    for p in model.parameters():
        p.requires_grad = True
    if n > 0:
        for p in model.patch_embed.parameters():
            p.requires_grad = False
    for stage in model.stages[:n]:
        for p in stage.parameters():
            p.requires_grad = False
    model.frozen_stages = n
    return model


def backbone_and_head(model: _Backbone) -> tuple[list, list]:
    head = {id(p) for p in model.head.parameters()}
    params = model.parameters()
    return [p for p in params if id(p) not in head], [p for p in params if id(p) in head]
