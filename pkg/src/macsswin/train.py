"""Weighted cross-entropy, AdamW, epoch-based learning-rate schedules and the
training loops for the frame and clip classifiers."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file
from .data.clips import ClipSample
from .data.manifest import ClassCounts, class_weights
from .data.preprocess import AugmentConfig, augment, derive_seed, normalize_resize
from .exceptions import ConfigError, ParameterError, TrainingError, ValidationError
from .metrics import metrics_from_labels
from .models import IMAGENET_MEAN, IMAGENET_STD, MacsSwin, VidMacsSwin, backbone_and_head, build_model, freeze_stages, get_config, predict
from .nn import Module, Parameter
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class LossWeights:
    w_x: float = 0.5
    w_y: float = 0.5

    def __post_init__(self):
        if self.w_x < 0 or self.w_y < 0:
            raise ParameterError(f"loss weights must be nonnegative, got ({self.w_x}, {self.w_y})")
        if abs(self.w_x + self.w_y - 1.0) > 1e-12:
            raise ParameterError(f"loss weights must sum to 1, got {self.w_x} + {self.w_y}")

    @classmethod
    def from_counts(cls, counts: ClassCounts) -> "LossWeights":
        return cls(*class_weights(counts))


def weighted_ce(logits: Tensor, labels, weights: LossWeights = LossWeights(), eps: float = 1e-7) -> Tensor:
    """Mean of ``-(w_Y y log p + w_X (1 - y) log(1 - p))`` with ``p`` the clamped Y softmax score."""
    y = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValidationError(f"logits must be (N, 2), got {logits.shape}")
    n = logits.shape[0]
    if n == 0:
        raise ValidationError("weighted_ce needs a nonempty batch")
    if y.shape != (n,):
        raise ValidationError(f"{y.shape} labels for {n} logits")
    p = T.clip(T.softmax(logits, axis=-1)[:, 1], eps, 1.0 - eps)
    yf = y.astype(logits.dtype)
    terms = (weights.w_y * yf) * T.log(p) + (weights.w_x * (1.0 - yf)) * T.log(1.0 - p)
    return -T.sum_(terms) / float(n)


def no_weight_decay(name: str, p: Parameter) -> bool:
    """Norm scales/shifts, biases and relative-position tables are not decayed."""
    return p.ndim <= 1 or name.endswith("relative_position_bias_table")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.05


def adamw_step(params: Sequence[tuple[str, Parameter]], state: AdamWState, hp: AdamWHyper,
               lrs: dict[str, float] | None = None) -> AdamWState:
    """One in-place AdamW update.

    ``lrs`` optionally maps parameter names to their own learning rate. Frozen
    parameters (``requires_grad`` false) and those without a gradient are left
    untouched, and their moments are not advanced.
    """
    b1, b2 = hp.betas
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params:
        if not p.requires_grad or p.grad is None:
            continue
        lr = hp.lr if lrs is None else lrs[name]
        if lr < 0:
            raise ParameterError(f"learning rate must be nonnegative, got {lr} for {name!r}")
        if lr == 0:
            continue
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        data = p.data.astype(np.float64)
        if hp.weight_decay and not no_weight_decay(name, p):
            data -= lr * hp.weight_decay * data
        data -= lr * (m / c1) / (np.sqrt(v / c2) + hp.eps)
        p.data = data.astype(p.dtype)
    return state


class AdamW:
    """AdamW over named parameter groups, each with its own learning rate."""

    def __init__(self, groups: dict[str, list[tuple[str, Parameter]]], hp: AdamWHyper = AdamWHyper()):
        self.groups = groups
        self.hp = hp
        self.state = AdamWState()

    @property
    def named_params(self) -> list[tuple[str, Parameter]]:
        return [item for g in self.groups.values() for item in g]

    def step(self, group_lrs: dict[str, float]) -> None:
        lrs = {name: group_lrs[g] for g, items in self.groups.items() for name, _ in items}
        adamw_step(self.named_params, self.state, self.hp, lrs)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, a in self.state.m.items():
            out[f"m.{k}"] = a
            out[f"v.{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        names = {n for n, _ in self.named_params}
        self.state = AdamWState(t=t)
        for k, a in arrays.items():
            kind, name = k.split(".", 1)
            if name not in names:
                raise ConfigError(f"optimizer state for unknown parameter {name!r}")
            (self.state.m if kind == "m" else self.state.v)[name] = np.array(a, dtype=np.float64)


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "warmup_hold"
    base_lr: float = 5e-4
    warmup_lr: float = 5e-7
    warmup_epochs: int = 20
    total_epochs: int = 300
    decay_epochs: int = 0  # warmup_hold only: multiply by decay_rate every decay_epochs
    decay_rate: float = 1.0

    def __post_init__(self):
        if self.kind not in ("warmup_hold", "warmup_cosine"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}/{self.total_epochs}")
        if self.base_lr < 0 or self.warmup_lr < 0:
            raise ConfigError("learning rates must be nonnegative")


def lr_at(s: ScheduleSpec, epoch: float) -> float:
    if not 0 <= epoch < s.total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.warmup_epochs:
        return s.warmup_lr + (s.base_lr - s.warmup_lr) * epoch / s.warmup_epochs
    after = epoch - s.warmup_epochs
    if s.kind == "warmup_cosine":
        return 0.5 * s.base_lr * (1.0 + math.cos(math.pi * after / (s.total_epochs - s.warmup_epochs)))
    if s.decay_epochs > 0:
        return s.base_lr * s.decay_rate ** int(after // s.decay_epochs)
    return s.base_lr


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "image"
    model: str = "tiny"
    epochs: int = 30
    batch_size: int = 32
    schedule: str = "warmup_hold"
    base_lr: float = 1e-3
    warmup_lr: float = 1e-5
    warmup_epochs: int = 2
    decay_epochs: int = 0
    decay_rate: float = 1.0
    backbone_lr: float | None = None
    head_lr: float | None = None
    weights: tuple[float, float] | None = None
    freeze_stages: int = 0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    augment: bool = True
    seed: int = 0
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("image", "video"):
            raise ConfigError(f"kind must be image or video, got {self.kind!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        for name in ("base_lr", "backbone_lr", "head_lr"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be nonnegative, got {v}")
        if (self.backbone_lr is None) != (self.head_lr is None):
            raise ConfigError("set both backbone_lr and head_lr, or neither")

    def schedule_spec(self, base_lr: float | None = None) -> ScheduleSpec:
        base = self.base_lr if base_lr is None else base_lr
        ratio = self.warmup_lr / self.base_lr if self.base_lr else 0.0
        return ScheduleSpec(self.schedule, base, base * ratio, self.warmup_epochs, self.epochs,
                            self.decay_epochs, self.decay_rate)

    def group_schedules(self) -> dict[str, ScheduleSpec]:
        if self.backbone_lr is None:
            return {"all": self.schedule_spec()}
        return {"backbone": self.schedule_spec(self.backbone_lr), "head": self.schedule_spec(self.head_lr)}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("weights", "betas"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


TRAIN_PRESETS = {
    # full-scale recipes (ImageNet-pretrained backbones assumed)
    "full_image": TrainConfig(kind="image", model="swin_t", epochs=300, batch_size=128, base_lr=5e-4,
                               warmup_lr=5e-7, warmup_epochs=20, freeze_stages=3),
    "full_video": TrainConfig(kind="video", model="swin_t", epochs=30, batch_size=64, schedule="warmup_cosine",
                               base_lr=3e-4, warmup_lr=3e-5, warmup_epochs=3, backbone_lr=3e-5, head_lr=3e-4),
    # desk-scale recipes trained from scratch
    "tiny_image": TrainConfig(kind="image", model="tiny", epochs=30, batch_size=32, base_lr=1e-3,
                              warmup_lr=1e-5, warmup_epochs=2),
    "tiny_video": TrainConfig(kind="video", model="tiny", epochs=20, batch_size=16, schedule="warmup_cosine",
                              base_lr=1e-3, warmup_lr=1e-4, warmup_epochs=2),
}


def get_train_config(preset: str, **overrides) -> TrainConfig:
    if preset not in TRAIN_PRESETS:
        raise ConfigError(f"unknown train preset {preset!r}; choose from {sorted(TRAIN_PRESETS)}")
    return replace(TRAIN_PRESETS[preset], **overrides)


# ---------------------------------------------------------------- datasets


class FrameDataset:
    """Frames held as uint8 ``(N, S, S, 3)`` at the model resolution."""

    def __init__(self, images: np.ndarray, labels, keys: Sequence[tuple[str, int]] | None = None,
                 mean=IMAGENET_MEAN, std=IMAGENET_STD):
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[-1] != 3 or images.shape[1] != images.shape[2]:
            raise ValidationError(f"expected square RGB frames (N, S, S, 3), got {images.shape}")
        self.images = images.astype(np.uint8, copy=False)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.labels) != len(images):
            raise ValidationError(f"{len(self.labels)} labels for {len(images)} frames")
        self.keys = list(keys) if keys is not None else [("", i) for i in range(len(images))]
        self.mean, self.std = mean, std

    def __len__(self):
        return len(self.labels)

    @property
    def size(self) -> int:
        return self.images.shape[1]

    def counts(self) -> ClassCounts:
        return ClassCounts.from_labels(self.labels)

    def subset(self, idx) -> "FrameDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return FrameDataset(self.images[idx], self.labels[idx], [self.keys[i] for i in idx], self.mean, self.std)

    def batch(self, idx, aug: AugmentConfig | None = None, seed: int = 0, epoch: int = 0) -> np.ndarray:
        out = np.empty((len(idx), 3, self.size, self.size), dtype=np.float32)
        for j, i in enumerate(idx):
            img = self.images[i]
            if aug is not None and aug.enabled:
                img = augment(img, derive_seed(seed, *self.keys[i], epoch), aug)
            out[j] = normalize_resize(img, self.size, self.mean, self.std)
        return out

    @classmethod
    def from_manifest(cls, manifest, size: int, mean=IMAGENET_MEAN, std=IMAGENET_STD, videos=None) -> "FrameDataset":
        from .data.preprocess import load_image, resize_bilinear

        recs = [r for r in manifest.xy if videos is None or r.video_id in videos]
        if not recs:
            raise ValidationError("no Type-X/Type-Y frames selected")
        imgs = np.empty((len(recs), size, size, 3), dtype=np.uint8)
        for i, r in enumerate(recs):
            img = load_image(manifest.resolve(r))
            if img.shape[:2] != (size, size):
                img = np.clip(np.rint(resize_bilinear(img, size, size)), 0, 255).astype(np.uint8)
            imgs[i] = img
        return cls(imgs, [r.y for r in recs], [r.key for r in recs], mean, std)


class ClipDataset:
    """Clips referencing frames of in-memory videos (``video_id -> (T, S, S, 3)``)."""

    def __init__(self, videos: dict[str, np.ndarray], clips: Sequence[ClipSample],
                 mean=IMAGENET_MEAN, std=IMAGENET_STD):
        if not clips:
            raise ValidationError("clip sampler produced no clips")
        self.videos = videos
        self.clips = list(clips)
        self.labels = np.asarray([c.label if c.label is not None else -1 for c in self.clips], dtype=np.int64)
        self.mean, self.std = mean, std
        self.size = next(iter(videos.values())).shape[1]

    def __len__(self):
        return len(self.clips)

    def counts(self) -> ClassCounts:
        return ClassCounts.from_labels(self.labels[self.labels >= 0])

    def subset(self, idx) -> "ClipDataset":
        return ClipDataset(self.videos, [self.clips[i] for i in idx], self.mean, self.std)

    def clip_array(self, clip: ClipSample, aug: AugmentConfig | None = None, seed: int = 0, epoch: int = 0) -> np.ndarray:
        frames = self.videos[clip.video_id][list(clip.frame_indices)]
        out = np.empty((3, len(frames), self.size, self.size), dtype=np.float32)
        aseed = derive_seed(seed, clip.video_id, clip.frame_indices[0], epoch)
        for t, img in enumerate(frames):
            if aug is not None and aug.enabled:
                img = augment(img, aseed, aug)  # one draw per clip keeps frames consistent
            out[:, t] = normalize_resize(img, self.size, self.mean, self.std)
        return out

    def batch(self, idx, aug: AugmentConfig | None = None, seed: int = 0, epoch: int = 0) -> np.ndarray:
        return np.stack([self.clip_array(self.clips[i], aug, seed, epoch) for i in idx])


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: Module
    log: list[dict]
    best_epoch: int
    best_f1: float
    best_state: dict
    optimizer: AdamW
    weights: LossWeights

    def best_model(self) -> Module:
        self.model.load_state_dict(self.best_state)
        return self.model


def _normalization(model) -> tuple:
    # constants travel with the model config and its checkpoint header
    return tuple(model.cfg.mean), tuple(model.cfg.std)


def predict_scores(model: Module, ds, batch_size: int = 64) -> np.ndarray:
    """Type-Y softmax scores for every item, in eval mode and without a tape."""
    model.eval()
    out = []
    for start in range(0, len(ds), batch_size):
        idx = list(range(start, min(start + batch_size, len(ds))))
        logits = model(Tensor(ds.batch(idx)))
        out.append(predict(logits)[1])
    return np.concatenate(out) if out else np.zeros(0)


def _epoch_row(epoch: int, split: str, loss: float, y, pred, lr: float) -> dict:
    m = metrics_from_labels(y, pred)
    return {"epoch": epoch, "split": split, "loss": round(float(loss), 8), "acc": m.accuracy,
            "prec": m.precision, "rec": m.recall, "f1": m.f1, "lr": lr}


def _param_groups(model, cfg: TrainConfig) -> dict[str, list]:
    named = list(model.named_parameters())
    if cfg.backbone_lr is None:
        return {"all": named}
    _, head = backbone_and_head(model)
    head_ids = {id(p) for p in head}
    return {"backbone": [(n, p) for n, p in named if id(p) not in head_ids],
            "head": [(n, p) for n, p in named if id(p) in head_ids]}


def fit(model: Module, train_ds, val_ds, cfg: TrainConfig, out_dir=None, resume: bool = False,
        weights: LossWeights | None = None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Generic epoch loop shared by the frame and clip trainers.

    Batch order, augmentation and initialization are all derived from
    ``cfg.seed``, so two runs with equal inputs produce identical logs.
    """
    if len(train_ds) == 0:
        raise ValidationError("empty training split")
    for ds in (train_ds, val_ds):
        if ds is not None:
            _check_resolution(model, ds)
    if weights is None:
        weights = LossWeights(*cfg.weights) if cfg.weights else LossWeights.from_counts(train_ds.counts())
    freeze_stages(model, cfg.freeze_stages)
    groups = _param_groups(model, cfg)
    opt = AdamW(groups, AdamWHyper(cfg.base_lr, cfg.betas, cfg.eps, cfg.weight_decay))
    schedules = cfg.group_schedules()
    aug = AugmentConfig() if cfg.augment else AugmentConfig.off()
    out = Path(out_dir) if out_dir is not None else None
    log: list[dict] = []
    start_epoch, best_f1, best_epoch = 0, -1.0, -1
    best_state = model.state_dict()

    if out is not None and not resume:
        (out / "train_log.jsonl").unlink(missing_ok=True)
    if resume:
        if out is None:
            raise ConfigError("resume needs an output directory")
        start_epoch, best_f1, best_epoch, log = _load_resume(out, model, opt)
        best_path = out / "best.ckpt"
        best_state = (load_checkpoint(best_path, build_model(model.kind, model.cfg)).state_dict()
                      if best_path.exists() else model.state_dict())

    for epoch in range(start_epoch, cfg.epochs):
        lrs = {g: lr_at(s, epoch) for g, s in schedules.items()}
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_ds))
        total, ys, preds = 0.0, [], []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            x = Tensor(train_ds.batch(idx, aug, cfg.seed, epoch))
            y = train_ds.labels[idx]
            model.zero_grad()
            with Tape() as tape:
                logits = model(x)
                loss = weighted_ce(logits, y, weights)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss diverged to {loss.item()} at epoch {epoch}, batch {b // cfg.batch_size}")
            tape.backward(loss)
            opt.step(lrs)
            total += loss.item() * len(idx)
            ys.append(y)
            preds.append(predict(logits)[0])
        lr_log = lrs.get("all", lrs.get("head"))
        rows = [_epoch_row(epoch, "train", total / len(order), np.concatenate(ys), np.concatenate(preds), lr_log)]
        if val_ds is not None and len(val_ds):
            scores = predict_scores(model, val_ds, max(cfg.batch_size, 32))
            vloss = weighted_ce(Tensor(np.log(np.stack([1 - scores, scores], 1).clip(1e-12))), val_ds.labels, weights).item()
            rows.append(_epoch_row(epoch, "val", vloss, val_ds.labels, (scores >= 0.5).astype(int), lr_log))
        log.extend(rows)
        f1 = rows[-1]["f1"]
        if f1 > best_f1:
            best_f1, best_epoch, best_state = f1, epoch, model.state_dict()
            if out is not None:
                save_checkpoint(model, out / "best.ckpt", {"epoch": epoch, "f1": f1})
        if out is not None:
            _write_progress(out, model, opt, epoch, best_f1, best_epoch, rows)
        if on_epoch is not None:
            for r in rows:
                on_epoch(r)
    return TrainResult(model, log, best_epoch, best_f1, best_state, opt, weights)


def _write_progress(out: Path, model, opt: AdamW, epoch: int, best_f1: float, best_epoch: int, rows) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    save_checkpoint(model, out / "last.ckpt", {"epoch": epoch})
    write_tensor_file(out / "last.optim", opt.state_arrays(),
                      {"epoch": epoch, "t": opt.state.t, "best_f1": best_f1, "best_epoch": best_epoch})


def _load_resume(out: Path, model, opt: AdamW):
    load_checkpoint(out / "last.ckpt", model)
    header, arrays = read_tensor_file(out / "last.optim")
    opt.load_state_arrays(arrays, int(header["t"]))
    log = []
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    return int(header["epoch"]) + 1, float(header["best_f1"]), int(header["best_epoch"]), log


def _model_for(cfg: TrainConfig, model=None, init=None):
    if model is not None:
        return model
    mcfg = get_config(cfg.model, video=cfg.kind == "video", **cfg.model_overrides)
    model = MacsSwin(mcfg, cfg.seed) if cfg.kind == "image" else VidMacsSwin(mcfg, cfg.seed)
    if init is not None:
        load_checkpoint(init, model, partial=True)
    return model


def train_image(cfg: TrainConfig, train_ds: FrameDataset, val_ds: FrameDataset | None = None,
                out_dir=None, resume: bool = False, model: MacsSwin | None = None, init=None, **kw) -> TrainResult:
    if cfg.kind != "image":
        raise ConfigError("train_image needs an image TrainConfig")
    model = _model_for(cfg, model, init)
    return fit(model, train_ds, val_ds, cfg, out_dir, resume, **kw)


def train_video(cfg: TrainConfig, train_ds: ClipDataset, val_ds: ClipDataset | None = None,
                out_dir=None, resume: bool = False, model: VidMacsSwin | None = None, init=None, **kw) -> TrainResult:
    if cfg.kind != "video":
        raise ConfigError("train_video needs a video TrainConfig")
    model = _model_for(cfg, model, init)
    n = len(train_ds.clips[0].frame_indices)
    if n != model.cfg.num_frames:
        raise ConfigError(f"clips hold {n} frames but the model takes {model.cfg.num_frames}")
    return fit(model, train_ds, val_ds, cfg, out_dir, resume, **kw)


def _check_resolution(model, ds) -> None:
    if ds.size != model.cfg.img_size:
        raise ConfigError(f"dataset frames are {ds.size}px but the model expects {model.cfg.img_size}px")
    ds.mean, ds.std = _normalization(model)
