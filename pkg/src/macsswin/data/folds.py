"""Video-level k-fold splits with balanced X:Y ratios."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..exceptions import ConfigError
from .manifest import ClassCounts


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_videos: tuple[str, ...]
    val_videos: tuple[str, ...]
    train_counts: ClassCounts
    val_counts: ClassCounts

    @property
    def train_ratio(self) -> float:
        return self.train_counts.ratio

    @property
    def val_ratio(self) -> float:
        return self.val_counts.ratio

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "train_videos": list(self.train_videos),
            "val_videos": list(self.val_videos),
            "train_counts": [self.train_counts.n_x, self.train_counts.n_y],
            "val_counts": [self.val_counts.n_x, self.val_counts.n_y],
            "train_ratio": self.train_ratio,
            "val_ratio": self.val_ratio,
        }


@dataclass
class FoldResult:
    folds: list[FoldSplit]
    global_ratio: float
    deviation: float
    method: str
    warning: bool = False
    notes: list[str] = field(default_factory=list)

    def ratio_range(self) -> tuple[float, float]:
        r = [f.train_ratio for f in self.folds] + [f.val_ratio for f in self.folds]
        return min(r), max(r)


def _as_counts(c) -> ClassCounts:
    return c if isinstance(c, ClassCounts) else ClassCounts(int(c[0]), int(c[1]))


def _ratio(nx: float, ny: float) -> float:
    return nx / ny if ny else math.inf


def _score(groups: np.ndarray, cx: np.ndarray, cy: np.ndarray, k: int, g: float) -> tuple[float, float]:
    """(max deviation, summed deviation) of train/val ratios from the global ratio."""
    tx, ty = cx.sum(), cy.sum()
    worst, total = 0.0, 0.0
    for f in range(k):
        m = groups == f
        vx, vy = cx[m].sum(), cy[m].sum()
        for r in (_ratio(vx, vy), _ratio(tx - vx, ty - vy)):
            d = abs(r - g)
            worst = max(worst, d)
            total += d
    return worst, total


def _count_partitions(n: int, k: int) -> int:
    size = n // k
    total = math.factorial(n) // (math.factorial(size) ** k * math.factorial(k))
    return total


def _exhaustive(n: int, k: int):
    """Yield group assignments for every partition into k equal-size unlabeled groups."""
    size = n // k
    assign = -np.ones(n, dtype=np.int64)
    fill = [0] * k

    def rec(i):
        if i == n:
            yield assign.copy()
            return
        opened = max(assign[:i].max() + 1, 0) if i else 0
        for gidx in range(min(opened + 1, k)):
            if fill[gidx] < size:
                assign[i] = gidx
                fill[gidx] += 1
                yield from rec(i + 1)
                fill[gidx] -= 1
                assign[i] = -1

    yield from rec(0)


def _local_search(cx, cy, k, g, rng, restarts: int):
    n = len(cx)
    size = n // k
    best, best_key = None, None
    for _ in range(restarts):
        groups = np.repeat(np.arange(k), size)
        rng.shuffle(groups)
        key = _score(groups, cx, cy, k, g)
        improved = True
        while improved:
            improved = False
            for i in range(n):
                for j in range(i + 1, n):
                    if groups[i] == groups[j]:
                        continue
                    groups[i], groups[j] = groups[j], groups[i]
                    cand = _score(groups, cx, cy, k, g)
                    if cand < key:
                        key, improved = cand, True
                    else:
                        groups[i], groups[j] = groups[j], groups[i]
        if best_key is None or key < best_key:
            best, best_key = groups.copy(), key
    return best, best_key


def make_folds(
    per_video_counts: Mapping[str, ClassCounts | Sequence[int]],
    k: int = 4,
    seed: int = 0,
    max_deviation: float | None = None,
    exhaustive_limit: int = 20000,
    restarts: int = 20,
) -> FoldResult:
    """Partition videos into ``k`` validation groups with near-global X:Y ratios.

    The objective is the largest absolute deviation of any fold's train or
    validation X:Y ratio from the dataset ratio (ties broken by the summed
    deviation). Small instances are solved exhaustively, larger ones by
    seeded swap-based local search with restarts. When ``max_deviation`` is
    given and not met, the best split is still returned with ``warning`` set.
    """
    videos = list(per_video_counts)
    n = len(videos)
    if k < 2 or n % k:
        raise ConfigError(f"k={k} must be >= 2 and divide the number of videos ({n})")
    counts = [_as_counts(per_video_counts[v]) for v in videos]
    cx = np.array([c.n_x for c in counts], dtype=np.float64)
    cy = np.array([c.n_y for c in counts], dtype=np.float64)
    g = _ratio(cx.sum(), cy.sum())
    if _count_partitions(n, k) <= exhaustive_limit:
        method = "exhaustive"
        best, best_key = None, None
        for groups in _exhaustive(n, k):
            key = _score(groups, cx, cy, k, g)
            if best_key is None or key < best_key:
                best, best_key = groups, key
    else:
        method = "local-search"
        best, best_key = _local_search(cx, cy, k, g, np.random.default_rng(seed), restarts)

    # order folds by their first video so output is stable
    order = sorted(range(k), key=lambda f: int(np.flatnonzero(best == f)[0]))
    folds = []
    for fid, f in enumerate(order):
        val = tuple(v for v, gr in zip(videos, best) if gr == f)
        train = tuple(v for v, gr in zip(videos, best) if gr != f)
        vc = ClassCounts(int(cx[best == f].sum()), int(cy[best == f].sum()))
        tc = ClassCounts(int(cx[best != f].sum()), int(cy[best != f].sum()))
        folds.append(FoldSplit(fid, train, val, tc, vc))
    result = FoldResult(folds, g, float(best_key[0]), method)
    if max_deviation is not None and result.deviation > max_deviation:
        result.warning = True
        msg = f"best split deviates {result.deviation:.3f} from the global ratio (allowed {max_deviation})"
        result.notes.append(msg)
        warnings.warn(msg)
    return result
