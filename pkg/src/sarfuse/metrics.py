"""Confusion counts and IoU/CSI, F1, OA, aggregated at dataset level."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValueError(f"confusion count {name} must be a nonnegative integer, got {value}")
            object.__setattr__(self, name, int(value))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.tp, self.fp, self.fn, self.tn)


def _binary(name: str, mask) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} mask has values outside {{0, 1}}")
    return arr.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _binary("prediction", pred), _binary("truth", truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} extents differ")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def accumulate(counts: ConfusionCounts | None, pred, truth) -> ConfusionCounts:
    """``counts`` plus the pixelwise counts of one prediction/truth pair."""
    new = confusion(pred, truth)
    return new if counts is None else counts + new


def iou(counts: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); 1.0 when nothing is flooded or predicted flooded."""
    denom = counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else counts.tp / denom


def csi(counts: ConfusionCounts) -> float:
    # critical success index is the same ratio
    return iou(counts)


def f1(counts: ConfusionCounts) -> float:
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else 2 * counts.tp / denom


def oa(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        raise ValueError("overall accuracy of zero evaluated pixels")
    return (counts.tp + counts.tn) / counts.total


@dataclass(frozen=True)
class MetricRow:
    method: str
    counts: ConfusionCounts
    iou_std: float | None = None
    f1_std: float | None = None
    iou_mean: float | None = None   # seed-averaged values override the pooled ones
    f1_mean: float | None = None
    oa_mean: float | None = None

    @property
    def iou(self) -> float:
        return iou(self.counts) if self.iou_mean is None else self.iou_mean

    @property
    def csi(self) -> float:
        return self.iou

    @property
    def f1(self) -> float:
        return f1(self.counts) if self.f1_mean is None else self.f1_mean

    @property
    def oa(self) -> float:
        return oa(self.counts) if self.oa_mean is None else self.oa_mean


def _pct(x: float) -> str:
    return f"{100.0 * x:.1f}"


def report(rows: Sequence[MetricRow] | Mapping[str, ConfusionCounts]) -> tuple[str, str]:
    """Return (csv_text, aligned_text_table).  Values are percent, one decimal."""
    if isinstance(rows, Mapping):
        rows = [MetricRow(name, c) for name, c in rows.items()]
    with_std = any(r.iou_std is not None for r in rows)
    header = ["method", "iou", "csi", "f1", "oa", "tp", "fp", "fn", "tn"]
    if with_std:
        header += ["iou_std", "f1_std"]
    table = []
    for r in rows:
        line = [r.method, _pct(r.iou), _pct(r.csi), _pct(r.f1), _pct(r.oa), *map(str, r.counts.as_tuple())]
        if with_std:
            line += [_pct(r.iou_std or 0.0), _pct(r.f1_std or 0.0)]
        table.append(line)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(table)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *table)]
    text_lines = []
    for i, line in enumerate([header] + table):
        cells = [line[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(line[1:], widths[1:])]
        text_lines.append("  ".join(cells).rstrip())
        if i == 0:
            text_lines.append("  ".join("-" * w for w in widths))
    return buf.getvalue(), "\n".join(text_lines) + "\n"
