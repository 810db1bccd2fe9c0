"""Hard Dice per label, averaged only over images that contain the label."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from echoseg.dataset import N_FOREGROUND, TAXONOMY, ValidationError, presence


@dataclass(frozen=True)
class LabelStats:
    mean: float  # percent
    std: float  # percent
    n_images: int


@dataclass
class MetricsReport:
    per_label: dict  # label id -> LabelStats, only labels with n_images >= 1
    overall_mean: float
    false_positive_pixels: dict = field(default_factory=dict)
    dice_values: dict = field(default_factory=dict)

    def absent_labels(self, labels=None) -> list[int]:
        labels = TAXONOMY.ids if labels is None else labels
        return [l for l in labels if l not in self.per_label]


def hard_dice(pred_map, gt_map, label: int) -> float:
    pred_map = np.asarray(pred_map)
    gt_map = np.asarray(gt_map)
    if pred_map.shape != gt_map.shape:
        raise ValidationError(f"prediction {pred_map.shape} and ground truth {gt_map.shape} differ")
    p = pred_map == label
    g = gt_map == label
    denom = int(p.sum()) + int(g.sum())
    if not p.any() or denom == 0:
        return 0.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def _gt_map(item):
    return item.label_map if hasattr(item, "label_map") else np.asarray(item)


def evaluate(predictions: Sequence, ground_truths: Sequence, labels=None, ddof: int = 0) -> MetricsReport:
    """Per-label mean and std (percent) of hard Dice.

    An image contributes to label ``l`` only when ``l`` is present in its
    ground truth. ``ground_truths`` may hold ``Sample`` objects or plain maps.
    ``ddof=0`` gives the population standard deviation.
    """
    if len(predictions) != len(ground_truths):
        raise ValidationError(f"{len(predictions)} predictions for {len(ground_truths)} ground truths")
    labels = list(range(1, N_FOREGROUND + 1)) if labels is None else [int(l) for l in labels]
    values = {l: [] for l in labels}
    false_pos = {l: 0 for l in labels}
    for pred, gt in zip(predictions, ground_truths):
        gt = _gt_map(gt)
        pred = np.asarray(pred)
        if pred.shape != gt.shape:
            raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        present = presence(gt)
        for l in labels:
            if present[l - 1]:
                values[l].append(hard_dice(pred, gt, l))
            else:
                false_pos[l] += int((pred == l).sum())
    per_label = {}
    for l in labels:
        v = 100.0 * np.asarray(values[l], dtype=np.float64)
        if v.size:
            std = float(v.std(ddof=ddof)) if v.size > ddof else 0.0
            per_label[l] = LabelStats(float(v.mean()), std, int(v.size))
    overall = float(np.mean([s.mean for s in per_label.values()])) if per_label else float("nan")
    return MetricsReport(per_label, overall, false_pos, {l: values[l] for l in labels})


def write_report_csv(report: MetricsReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "name", "mean", "std", "n", "false_positive_pixels"])
        for l, s in sorted(report.per_label.items()):
            writer.writerow([l, TAXONOMY.name(l), f"{s.mean:.4f}", f"{s.std:.4f}", s.n_images, report.false_positive_pixels.get(l, 0)])
    return path


def format_table(report: MetricsReport, title: str = "model") -> str:
    """Two-row text table (labels 1-7 and 8-14) with ``mean±std`` or ``---``."""
    def cell(l):
        s = report.per_label.get(l)
        return "---" if s is None else f"{s.mean:.0f}±{s.std:.0f}"

    lines = [title]
    for row in (range(1, 8), range(8, 15)):
        lines.append("  ".join(f"{l:>2}. {cell(l):>7}" for l in row))
    lines.append(f"overall mean Dice: {report.overall_mean:.2f}%")
    return "\n".join(lines) + "\n"
