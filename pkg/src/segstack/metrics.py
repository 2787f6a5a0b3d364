"""Segmentation quality metrics: Dice overlap and average Hausdorff distance.

Dice is computed from streamed integer counts pooled over all pixels of a
dataset (per class). The contour distance is the maximum of the two mean
directed point-set distances between the prediction and ground-truth
boundaries; boundaries are 4-connectivity contours in pixel units.

Empty-set conventions: Dice of two empty regions is 1.0 (and counted);
Hausdorff of two empty contours is 0.0, and of exactly one empty contour
is undefined — reported as such with a count rather than as a misleading
0.0 (the legacy_empty_zero switch restores the 0.0 convention).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from segstack import _ext
from segstack.errors import DataError
from segstack.imagery import LabelImage


@dataclass
class DiceCounts:
    """Streamable integer counts behind a Dice score."""

    intersection: int = 0
    pred: int = 0
    truth: int = 0

    def add(self, pred_mask: np.ndarray, truth_mask: np.ndarray) -> "DiceCounts":
        self.intersection += int(np.count_nonzero(pred_mask & truth_mask))
        self.pred += int(np.count_nonzero(pred_mask))
        self.truth += int(np.count_nonzero(truth_mask))
        return self

    def merge(self, other: "DiceCounts") -> "DiceCounts":
        self.intersection += other.intersection
        self.pred += other.pred
        self.truth += other.truth
        return self

    def score(self) -> float:
        if self.pred == 0 and self.truth == 0:
            return 1.0
        return 2.0 * self.intersection / (self.pred + self.truth)


def _as_image_list(obj):
    if isinstance(obj, LabelImage):
        return [obj]
    return list(obj)


def dice(preds, truths, class_index: int) -> float:
    """Dice coefficient for one class, pooled over a stream of images."""
    preds = _as_image_list(preds)
    truths = _as_image_list(truths)
    if len(preds) != len(truths):
        raise DataError(f"misaligned streams: {len(preds)} predictions, {len(truths)} truths")
    counts = DiceCounts()
    for p, t in zip(preds, truths):
        if p.labels.shape != t.labels.shape:
            raise DataError(
                f"dimension mismatch: prediction {p.labels.shape} vs truth {t.labels.shape}"
            )
        counts.add(p.labels == class_index, t.labels == class_index)
    return counts.score()


def extract_contour(mask: LabelImage, class_index: int) -> np.ndarray:
    """Boundary pixels of one class: inside the class and 4-adjacent to
    another class or to the image border. Returns (n, 2) int64 (row, col)
    coordinates in row-major order."""
    inside = mask.labels == class_index
    padded = np.pad(inside, 1, constant_values=False)
    boundary = inside & ~(
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    coords = np.argwhere(boundary)
    return coords.astype(np.int64)


def avg_hausdorff(contour_a: np.ndarray, contour_b: np.ndarray) -> float | None:
    """Symmetrized mean directed distance between two contours.

    Returns 0.0 when both contours are empty and None (undefined) when
    exactly one is empty.
    """
    na, nb = len(contour_a), len(contour_b)
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return None
    a = np.ascontiguousarray(contour_a, dtype=np.float64)
    b = np.ascontiguousarray(contour_b, dtype=np.float64)
    return max(_ext.directed_avg_distance(a, b), _ext.directed_avg_distance(b, a))


@dataclass
class ClassReport:
    """Per-class metric aggregates over a dataset."""

    class_index: int
    dice_pooled: float
    dice_image_mean: float
    dice_both_empty_images: int
    hausdorff_mean: float | None
    hausdorff_defined: int
    hausdorff_undefined: int


@dataclass
class MetricReport:
    """Dataset-level evaluation for one method."""

    method: str
    class_count: int
    image_count: int
    per_class: list[ClassReport] = field(default_factory=list)
    foreground_dice_pooled: float = 0.0
    legacy_empty_zero: bool = False

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "class_count": self.class_count,
            "image_count": self.image_count,
            "foreground_dice_pooled": self.foreground_dice_pooled,
            "legacy_empty_zero": self.legacy_empty_zero,
            "per_class": [
                {
                    "class_index": c.class_index,
                    "dice_pooled": c.dice_pooled,
                    "dice_image_mean": c.dice_image_mean,
                    "dice_both_empty_images": c.dice_both_empty_images,
                    "hausdorff_mean": c.hausdorff_mean,
                    "hausdorff_defined": c.hausdorff_defined,
                    "hausdorff_undefined": c.hausdorff_undefined,
                }
                for c in self.per_class
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json_dict(cls, blob: dict) -> "MetricReport":
        report = cls(
            method=blob["method"],
            class_count=int(blob["class_count"]),
            image_count=int(blob["image_count"]),
            foreground_dice_pooled=float(blob["foreground_dice_pooled"]),
            legacy_empty_zero=bool(blob.get("legacy_empty_zero", False)),
        )
        for c in blob["per_class"]:
            report.per_class.append(ClassReport(
                class_index=int(c["class_index"]),
                dice_pooled=float(c["dice_pooled"]),
                dice_image_mean=float(c["dice_image_mean"]),
                dice_both_empty_images=int(c["dice_both_empty_images"]),
                hausdorff_mean=None if c["hausdorff_mean"] is None else float(c["hausdorff_mean"]),
                hausdorff_defined=int(c["hausdorff_defined"]),
                hausdorff_undefined=int(c["hausdorff_undefined"]),
            ))
        return report


def evaluate(preds, truths, class_count: int, method: str = "model",
             legacy_empty_zero: bool = False) -> MetricReport:
    """Per-class pooled Dice and mean Hausdorff over aligned image lists."""
    preds = _as_image_list(preds)
    truths = _as_image_list(truths)
    if len(preds) != len(truths):
        raise DataError(f"misaligned lists: {len(preds)} predictions, {len(truths)} truths")
    if not preds:
        raise DataError("cannot evaluate an empty image list")

    pooled = [DiceCounts() for _ in range(class_count)]
    per_image_dice = [[] for _ in range(class_count)]
    both_empty = [0] * class_count
    hd_values = [[] for _ in range(class_count)]
    hd_undefined = [0] * class_count

    for p, t in zip(preds, truths):
        if p.labels.shape != t.labels.shape:
            raise DataError(
                f"dimension mismatch: prediction {p.labels.shape} vs truth {t.labels.shape}"
            )
        for m in range(class_count):
            pm = p.labels == m
            tm = t.labels == m
            image_counts = DiceCounts().add(pm, tm)
            pooled[m].merge(image_counts)
            per_image_dice[m].append(image_counts.score())
            if image_counts.pred == 0 and image_counts.truth == 0:
                both_empty[m] += 1
            hd = avg_hausdorff(extract_contour(p, m), extract_contour(t, m))
            if hd is None:
                if legacy_empty_zero:
                    hd_values[m].append(0.0)
                else:
                    hd_undefined[m] += 1
            else:
                hd_values[m].append(hd)

    report = MetricReport(method=method, class_count=class_count, image_count=len(preds),
                          legacy_empty_zero=legacy_empty_zero)
    for m in range(class_count):
        report.per_class.append(ClassReport(
            class_index=m,
            dice_pooled=pooled[m].score(),
            dice_image_mean=float(np.mean(per_image_dice[m])),
            dice_both_empty_images=both_empty[m],
            hausdorff_mean=float(np.mean(hd_values[m])) if hd_values[m] else None,
            hausdorff_defined=len(hd_values[m]),
            hausdorff_undefined=hd_undefined[m],
        ))
    fg = DiceCounts()
    for m in range(1, class_count):
        fg.merge(pooled[m])
    report.foreground_dice_pooled = fg.score() if class_count > 1 else pooled[0].score()
    return report


def comparison_table(reports) -> str:
    """Aligned text table: one row per method, Dice/Hausdorff per class."""
    reports = list(reports)
    if not reports:
        raise DataError("no reports to tabulate")
    class_count = reports[0].class_count
    for r in reports:
        if r.class_count != class_count:
            raise DataError("reports disagree on class count")

    headers = ["method"]
    for m in range(class_count):
        headers += [f"dice[{m}]", f"hausdorff[{m}]"]
    rows = []
    for r in reports:
        row = [r.method]
        for c in r.per_class:
            row.append(f"{c.dice_pooled:.4f}")
            if c.hausdorff_mean is None:
                cell = "undef"
            else:
                cell = f"{c.hausdorff_mean:.3f}"
            if c.hausdorff_undefined:
                cell += f" ({c.hausdorff_undefined} undef)"
            row.append(cell)
        rows.append(row)

    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    def fmt(row):
        return "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines += [fmt(row) for row in rows]
    return "\n".join(lines) + "\n"
