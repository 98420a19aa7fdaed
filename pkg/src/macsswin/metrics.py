"""Binary classification metrics, decision-threshold sweeps, fold means and
inter-rater agreement (Fleiss kappa, Matthews correlation).

Type-Y is the positive class throughout. Percentages are formatted to one
decimal with half-up rounding, computed from exact fractions so that values
such as 80.775 round up as printed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .exceptions import ContractError, ValidationError

DEFAULT_THRESHOLDS = (0.5, 0.4, 0.3)
METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


def round_half_up(value, digits: int = 1) -> float:
    """Round half away from zero at ``digits`` decimals.

    Floats are taken at their shortest repr (``80.775`` stays ``80.775``).
    """
    if isinstance(value, Fraction):
        value = Decimal(value.numerator) / Decimal(value.denominator)
    elif not isinstance(value, Decimal):
        value = Decimal(repr(float(value)))
    q = Decimal(1).scaleb(-digits)
    return float(value.quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for k in ("tp", "fp", "tn", "fn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValidationError(f"confusion count {k} must be a nonnegative integer, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def predicted_positive(self) -> int:
        return self.tp + self.fp

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionMatrix":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        if t.shape != p.shape:
            raise ValidationError(f"label vectors differ in shape: {t.shape} vs {p.shape}")
        return cls(int((t & p).sum()), int((~t & p).sum()), int((~t & ~p).sum()), int((t & ~p).sum()))

    def scaled(self, k: int) -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp * k, self.fp * k, self.tn * k, self.fn * k)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class Metrics:
    """Metric values as fractions in [0, 1] plus zero-denominator flags."""

    cm: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    flags: tuple[str, ...] = ()

    def exact(self) -> dict[str, Fraction]:
        c = self.cm
        return {
            "accuracy": Fraction(c.tp + c.tn, c.total) if c.total else Fraction(0),
            "precision": Fraction(c.tp, c.tp + c.fp) if c.tp + c.fp else Fraction(0),
            "recall": Fraction(c.tp, c.tp + c.fn) if c.tp + c.fn else Fraction(0),
            "f1": Fraction(2 * c.tp, 2 * c.tp + c.fp + c.fn) if c.tp else Fraction(0),
        }

    def percent(self) -> dict[str, float]:
        return {k: round_half_up(v * 100) for k, v in self.exact().items()}

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in METRIC_NAMES}
        d["flags"] = list(self.flags)
        return d


def metrics(cm: ConfusionMatrix) -> Metrics:
    flags = []
    if cm.total == 0:
        flags.append("empty")
    if cm.tp + cm.fp == 0:
        flags.append("precision_undefined")
    if cm.tp + cm.fn == 0:
        flags.append("recall_undefined")
    tmp = Metrics(cm, 0.0, 0.0, 0.0, 0.0)
    ex = tmp.exact()
    return Metrics(cm, *(float(ex[k]) for k in METRIC_NAMES), flags=tuple(flags))


def metrics_from_labels(y_true, y_pred) -> Metrics:
    return metrics(ConfusionMatrix.from_labels(y_true, y_pred))


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    cm: ConfusionMatrix
    metrics: Metrics
    predictions: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class SweepResult:
    thresholds: tuple[float, ...]
    rows: tuple[SweepRow, ...]

    def row(self, dt: float) -> SweepRow:
        for r in self.rows:
            if r.threshold == dt:
                return r
        raise KeyError(dt)


def _check_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValidationError(f"scores must be a 1-D vector, got shape {s.shape}")
    bad = ~((s > 0) & (s < 1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"scores must lie in (0, 1); item {i} is {s[i]!r}")
    return s


def threshold_sweep(scores, labels, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> SweepResult:
    """Confusion matrix and metrics at each decision threshold (score >= DT is Y)."""
    s = _check_scores(scores)
    y = np.asarray(labels).astype(bool)
    if y.shape != s.shape:
        raise ValidationError(f"{len(y)} labels for {len(s)} scores")
    rows = []
    for dt in thresholds:
        if not 0 < dt < 1:
            raise ValidationError(f"thresholds must lie in (0, 1), got {dt}")
        pred = s >= dt
        cm = ConfusionMatrix.from_labels(y, pred)
        rows.append(SweepRow(float(dt), cm, metrics(cm), pred))
    ordered = sorted(rows, key=lambda r: -r.threshold)
    for hi, lo in zip(ordered, ordered[1:]):
        if (hi.predictions & ~lo.predictions).any() or lo.cm.tp < hi.cm.tp or lo.cm.fp < hi.cm.fp:
            raise ContractError(f"threshold monotonicity violated between {hi.threshold} and {lo.threshold}")
    return SweepResult(tuple(float(t) for t in thresholds), tuple(rows))


def fold_aggregate(per_fold: Sequence, digits: int = 1):
    """Arithmetic mean across folds, rounded half-up.

    ``per_fold`` is a sequence of numbers (one metric) or of mappings from
    metric name to value; the result has the same shape as one element.
    """
    if not per_fold:
        raise ValidationError("need at least one fold")

    def mean(values: Iterable) -> float:
        vals = [Decimal(repr(float(v))) for v in values]
        return round_half_up(sum(vals) / len(vals), digits)

    first = per_fold[0]
    if isinstance(first, Mapping):
        return {k: mean(f[k] for f in per_fold) for k in first}
    return mean(per_fold)


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    p_value: float
    z: float
    se: float
    p_bar: float
    p_e: float
    n_items: int
    n_raters: int
    categories: tuple
    degenerate: bool = False


def _rating_array(ratings) -> np.ndarray:
    r = np.asarray(ratings, dtype=object)
    if r.ndim != 2:
        raise ValidationError(f"ratings must be items x raters, got shape {r.shape}")
    for (i, j), v in np.ndenumerate(r):
        if v is None or v == "" or (isinstance(v, float) and math.isnan(v)):
            raise ValidationError(f"missing rating at item {i}, rater {j}")
    return r


def fleiss_kappa(ratings) -> KappaResult:
    """Fleiss kappa for an items x raters matrix of category labels.

    The p-value is two-sided, from the large-sample normal approximation of
    kappa under the null of chance agreement.
    """
    r = _rating_array(ratings)
    n_items, n_raters = r.shape
    if n_items < 2 or n_raters < 2:
        raise ValidationError(f"need at least 2 items and 2 raters, got {n_items}x{n_raters}")
    cats = tuple(sorted({v for v in r.ravel()}, key=str))
    counts = np.stack([(r == c).sum(axis=1) for c in cats], axis=1).astype(np.float64)
    n = float(n_raters)
    p_i = ((counts * (counts - 1)).sum(axis=1)) / (n * (n - 1))
    p_bar = float(p_i.mean())
    p_j = counts.sum(axis=0) / (n_items * n)
    p_e = float((p_j**2).sum())
    if p_e >= 1.0 - 1e-15:
        return KappaResult(1.0, float("nan"), float("nan"), float("nan"), p_bar, p_e, n_items, n_raters, cats, True)
    kappa = (p_bar - p_e) / (1.0 - p_e)
    pq = p_j * (1 - p_j)
    spq = pq.sum()
    se = math.sqrt(2.0 / (n_items * n * (n - 1))) * math.sqrt(max(spq**2 - (pq * (1 - 2 * p_j)).sum(), 0.0)) / spq
    z = kappa / se if se > 0 else math.copysign(math.inf, kappa)
    p_value = float(2 * norm.sf(abs(z)))
    return KappaResult(float(kappa), p_value, float(z), float(se), p_bar, p_e, n_items, n_raters, cats)


@dataclass(frozen=True)
class MccResult:
    value: float
    degenerate: bool
    cm: ConfusionMatrix

    def __float__(self):
        return self.value


def mcc(pred_a, pred_b) -> MccResult:
    """Matthews correlation of two binary vectors (``pred_a`` plays "truth")."""
    a, b = np.asarray(pred_a), np.asarray(pred_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"mcc needs equal-length vectors, got {a.shape} and {b.shape}")
    cm = ConfusionMatrix.from_labels(a, b)
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return MccResult(0.0, True, cm)
    return MccResult((tp * tn - fp * fn) / math.sqrt(denom), False, cm)


def mcc_matrix(columns: Mapping[str, Sequence]) -> dict[str, dict[str, float]]:
    names = list(columns)
    return {a: {b: mcc(columns[a], columns[b]).value for b in names} for a in names}


def as_binary(labels, positive="Y") -> np.ndarray:
    """Map ``X``/``Y`` strings (or 0/1 values) to a 0/1 integer vector."""
    out = []
    for i, v in enumerate(labels):
        if v in (positive, 1):
            out.append(1)
        elif v in ("X", 0):
            out.append(0)
        else:
            raise ValidationError(f"label {i} is {v!r}; expected X or Y")
    return np.asarray(out, dtype=np.int64)


def _cell(value: Fraction, num: int, den: int, with_counts: bool) -> str:
    s = f"{round_half_up(value * 100):.1f}"
    return f"{s}({num}/{den})" if with_counts else s


def table_row(name: str, m: Metrics) -> dict[str, str]:
    """One row in the ``86.7(13/15)`` style; F1 carries no counts."""
    c, ex = m.cm, m.exact()
    return {
        "method": name,
        "accuracy": _cell(ex["accuracy"], c.tp + c.tn, c.total, True),
        "precision": _cell(ex["precision"], c.tp, c.tp + c.fp, True),
        "recall": _cell(ex["recall"], c.tp, c.tp + c.fn, True),
        "f1": _cell(ex["f1"], 0, 0, False),
    }


def build_report(sweep: SweepResult, name: str = "model", kappa: KappaResult | None = None,
                 mcc_table: Mapping | None = None, extra: Mapping | None = None) -> dict:
    rows = []
    for r in sweep.rows:
        rows.append({
            "threshold": r.threshold,
            "confusion": r.cm.to_dict(),
            "metrics": r.metrics.to_dict(),
            "percent": r.metrics.percent(),
            "row": table_row(f"{name}({r.threshold:g})", r.metrics),
        })
    report = {"thresholds": list(sweep.thresholds), "rows": rows}
    if kappa is not None:
        report["kappa"] = {
            "kappa": kappa.kappa, "p_value": kappa.p_value, "z": kappa.z, "se": kappa.se,
            "n_items": kappa.n_items, "n_raters": kappa.n_raters, "degenerate": kappa.degenerate,
        }
    if mcc_table is not None:
        report["mcc"] = {a: dict(v) for a, v in mcc_table.items()}
    if extra:
        report.update(extra)
    return report


def write_report(report: dict, json_path, csv_path=None) -> None:
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    Path(json_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if csv_path is not None and report.get("rows"):
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "accuracy", "precision", "recall", "f1"])
            w.writeheader()
            for r in report["rows"]:
                w.writerow(r["row"])
