"""Confusion matrices, per-class IoU and mIoU, and comparison tables."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LabelRangeError
from .tensor_io import LabelArray

CHUNK = 1 << 20


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns predictions.

    ``void`` counts points with valid ground truth but an ignore prediction;
    they are false negatives for their ground-truth class.
    """

    counts: np.ndarray  # (K, K) uint64
    void: np.ndarray  # (K,) uint64

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.void.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts, self.void + other.void)


def _block(gt, pred, K, ignore_id):
    keep = gt != ignore_id
    gt, pred = gt[keep].astype(np.int64), pred[keep]
    void = pred == ignore_id
    v = np.bincount(gt[void], minlength=K).astype(np.uint64)
    g, p = gt[~void], pred[~void].astype(np.int64)
    c = np.bincount(g * K + p, minlength=K * K).reshape(K, K).astype(np.uint64)
    return ConfusionMatrix(c, v)


def confusion(gt: LabelArray, pred: LabelArray, num_classes: int, threads: int = 1) -> ConfusionMatrix:
    """Accumulate the confusion matrix, skipping points whose GT is ignore.

    The ground truth's ignore id applies to both arrays.
    """
    if len(gt) != len(pred):
        raise DimensionError(f"ground truth has {len(gt)} labels, prediction {len(pred)}")
    ignore_id = gt.ignore_id
    g, p = gt.labels, pred.labels
    if pred.ignore_id != ignore_id:
        p = np.where(p == pred.ignore_id, np.uint32(ignore_id), p)
    for name, arr in (("ground truth", g), ("prediction", p)):
        bad = (arr != ignore_id) & (arr >= num_classes)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise LabelRangeError(f"{name} label {int(arr[i])} at index {i} not < {num_classes}")
    bounds = [(s, min(s + CHUNK, len(g))) for s in range(0, len(g), CHUNK)] or [(0, 0)]
    work = lambda b: _block(g[b[0] : b[1]], p[b[0] : b[1]], num_classes, ignore_id)  # noqa: E731
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(work, bounds))
    else:
        blocks = [work(b) for b in bounds]
    out = blocks[0]
    for b in blocks[1:]:
        out = out + b
    return out


@dataclass(frozen=True)
class IoUReport:
    class_names: tuple[str, ...]
    per_class: tuple[float | None, ...]  # None where undefined

    @property
    def miou(self) -> float:
        vals = [v for v in self.per_class if v is not None]
        return math.fsum(vals) / len(vals)


def iou(conf: ConfusionMatrix, class_names=None) -> IoUReport:
    """Per-class ``TP / (TP + FP + FN)``; classes with a zero denominator are
    undefined and left out of the mean."""
    K = conf.num_classes
    if K < 1:
        raise ValueError("need at least one class")
    c = conf.counts.astype(np.int64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp + conf.void.astype(np.int64)
    denom = tp + fp + fn
    per = tuple(float(tp[k]) / float(denom[k]) if denom[k] > 0 else None for k in range(K))
    if all(v is None for v in per):
        raise ValueError("every class is undefined (no ground truth and no prediction)")
    names = tuple(class_names) if class_names is not None else tuple(str(k) for k in range(K))
    if len(names) != K:
        raise DimensionError(f"{len(names)} class names for {K} classes")
    return IoUReport(names, per)


def compare(reports, fmt: str = "text") -> str:
    """Render named reports side by side.

    Args:
        reports: sequence of ``(name, IoUReport)`` pairs.
        fmt: ``"text"`` for an aligned table in percent, ``"csv"`` for
            full-precision fractions (undefined cells are empty).
    """
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to compare")
    names = reports[0][1].class_names
    for label, r in reports[1:]:
        if r.class_names != names:
            raise DimensionError(f"report {label!r} has a different class list")
    rows = [[cls] + [r.per_class[k] for _, r in reports] for k, cls in enumerate(names)]
    rows.append(["mIoU"] + [r.miou for _, r in reports])
    header = ["class"] + [label for label, _ in reports]

    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + ["" if v is None else repr(v) for v in row[1:]])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    cells = [header] + [[row[0]] + ["-" if v is None else f"{100 * v:.1f}" for v in row[1:]] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for i, r in enumerate(cells):
        lines.append("  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> dict[str, dict[str, float | None]]:
    """Inverse of ``compare(..., fmt="csv")``: ``{report: {row: value}}``."""
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    return {
        name: {row[0]: (float(row[j]) if row[j] else None) for row in body}
        for j, name in enumerate(header[1:], start=1)
    }
