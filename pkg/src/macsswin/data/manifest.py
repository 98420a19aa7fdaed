"""Frame manifests (JSON lines) and class statistics."""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ..exceptions import ManifestParseError, ValidationError

LABEL_VALUES = ("X", "Y", "Z")
FIELDS = ("video_id", "frame_index", "frame_path", "label")


@dataclass(frozen=True)
class ManifestRecord:
    video_id: str
    frame_index: int
    frame_path: str
    label: str

    @property
    def key(self) -> tuple[str, int]:
        return self.video_id, self.frame_index

    @property
    def y(self) -> int:
        """1 for Type-Y, 0 for Type-X."""
        return 1 if self.label == "Y" else 0


@dataclass(frozen=True)
class ClassCounts:
    n_x: int
    n_y: int

    @property
    def total(self) -> int:
        return self.n_x + self.n_y

    @property
    def ratio(self) -> float:
        """X:Y ratio (infinite when there are no Y frames)."""
        return self.n_x / self.n_y if self.n_y else float("inf")

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.n_x + other.n_x, self.n_y + other.n_y)

    @classmethod
    def from_labels(cls, labels: Iterable) -> "ClassCounts":
        nx = ny = 0
        for lab in labels:
            if lab in ("Y", 1, True):
                ny += 1
            elif lab in ("X", 0, False):
                nx += 1
        return cls(nx, ny)


class Manifest:
    """All records of a manifest plus the Type-Z-free view used for learning."""

    def __init__(self, records: Sequence[ManifestRecord], path: str | Path | None = None):
        self.records = list(records)
        self.path = Path(path) if path is not None else None
        self.xy = [r for r in self.records if r.label != "Z"]

    @property
    def root(self) -> Path:
        return self.path.parent if self.path is not None else Path(".")

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.frame_path)
        return p if p.is_absolute() else self.root / p

    def videos(self) -> list[str]:
        return list(OrderedDict.fromkeys(r.video_id for r in self.records))

    def timeline(self, video_id: str) -> list[ManifestRecord]:
        """X/Y records of one video in frame order."""
        return sorted((r for r in self.xy if r.video_id == video_id), key=lambda r: r.frame_index)

    def counts(self) -> ClassCounts:
        return ClassCounts.from_labels(r.label for r in self.xy)

    def counts_per_video(self) -> "OrderedDict[str, ClassCounts]":
        out: OrderedDict[str, ClassCounts] = OrderedDict((v, ClassCounts(0, 0)) for v in self.videos())
        for r in self.xy:
            out[r.video_id] = out[r.video_id] + ClassCounts.from_labels([r.label])
        return out

    def subset(self, video_ids: Iterable[str]) -> "Manifest":
        keep = set(video_ids)
        m = Manifest([r for r in self.records if r.video_id in keep], self.path)
        return m

    def __len__(self):
        return len(self.records)


def _parse_record(obj, path, lineno) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestParseError(path, lineno, "record is not a JSON object")
    if set(obj) != set(FIELDS):
        raise ManifestParseError(path, lineno, f"fields must be exactly {FIELDS}, got {sorted(obj)}")
    vid, idx, fpath, label = (obj[f] for f in FIELDS)
    if not isinstance(vid, str) or not vid:
        raise ManifestParseError(path, lineno, "video_id must be a non-empty string")
    if isinstance(idx, bool) or not isinstance(idx, int) or idx < 0:
        raise ManifestParseError(path, lineno, f"frame_index must be a non-negative integer, got {idx!r}")
    if not isinstance(fpath, str) or not fpath:
        raise ManifestParseError(path, lineno, "frame_path must be a non-empty string")
    if label not in LABEL_VALUES:
        raise ManifestParseError(path, lineno, f"label must be one of X/Y/Z, got {label!r}")
    return ManifestRecord(vid, idx, fpath, label)


def load_manifest(path, require_xy: bool = True) -> Manifest:
    """Read a JSON-lines manifest.

    Raises ManifestParseError (with line number) on malformed lines and
    ValidationError on duplicate (video_id, frame_index) keys or, when
    ``require_xy`` is set, when no X/Y frames remain after dropping Type-Z.
    """
    path = Path(path)
    records, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestParseError(path, lineno, f"invalid JSON ({e.msg})") from e
            rec = _parse_record(obj, path, lineno)
            if rec.key in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate frame {rec.key} (first on line {seen[rec.key]})")
            seen[rec.key] = lineno
            records.append(rec)
    manifest = Manifest(records, path)
    if require_xy and not manifest.xy:
        raise ValidationError(f"{path}: no Type-X/Type-Y frames left after excluding Type-Z")
    return manifest


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({f: getattr(r, f) for f in FIELDS}) + "\n")


def class_weights(counts: ClassCounts) -> tuple[float, float]:
    """Loss weights ``(w_X, w_Y)``: each class is weighted by the other's share."""
    if counts.total <= 0:
        raise ValidationError("class weights need at least one X or Y sample")
    return counts.n_y / counts.total, counts.n_x / counts.total


def as_dict(record: ManifestRecord) -> dict:
    return asdict(record)
