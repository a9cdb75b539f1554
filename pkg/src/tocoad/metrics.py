"""Image- and pixel-level AUROC."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic,
    P(s_pos > s_neg) + 0.5 P(tie), using midranks over tied scores."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    # midrank of each tie group (ranks start at 1)
    boundaries = np.flatnonzero(np.diff(ss)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [ss.size]))
    ranks = np.empty(ss.size)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalResult:
    category: str
    image_auroc: float
    pixel_auroc: Optional[float]
    n_images: int
    n_anomalous: int


def evaluate_maps(category: str, samples: Sequence, score_maps: Sequence) -> EvalResult:
    """Image AUROC over (image_score, label); pixel AUROC pooled over all pixels."""
    labels = np.array([s.label for s in samples])
    image_scores = np.array([m.image_score for m in score_maps])
    image = auroc(image_scores, labels)
    masks = [s.mask for s in samples]
    pixel = None
    if all(m is not None for m in masks) and any(m.any() for m in masks):
        gt = np.concatenate([m.ravel() for m in masks])
        pred = np.concatenate([m.pixel_map.ravel() for m in score_maps])
        pixel = auroc(pred, gt)
    else:
        log.warning("%s: no anomalous pixels in the test split; pixel AUROC omitted", category)
    return EvalResult(category, image, pixel, len(samples), int(labels.sum()))


def evaluate_category(test, bank, extractor, cfg, levels=(2, 3), neighborhood: int = 3) -> EvalResult:
    from .memory_bank import score_images

    maps = score_images(test.samples, bank, extractor, cfg, levels, neighborhood)
    return evaluate_maps(test.category, test.samples, maps)


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6f}"


def write_results_csv(path, results: List[EvalResult]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "image_auroc", "pixel_auroc"])
        for r in results:
            w.writerow([r.category, _fmt(r.image_auroc), _fmt(r.pixel_auroc)])


def read_results_csv(path) -> List[EvalResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            px = row["pixel_auroc"]
            out.append(EvalResult(row["category"], float(row["image_auroc"]),
                                  float(px) if px else None, 0, 0))
    return out


def results_table(results: List[EvalResult]) -> str:
    """Per-category rows plus a ``Total avg.`` row, values in percent."""
    lines = [f"{'category':<16} {'image':>8} {'pixel':>8}"]
    for r in results:
        px = "-" if r.pixel_auroc is None else f"{100 * r.pixel_auroc:.2f}"
        lines.append(f"{r.category:<16} {100 * r.image_auroc:>8.2f} {px:>8}")
    img = np.mean([r.image_auroc for r in results])
    pxs = [r.pixel_auroc for r in results if r.pixel_auroc is not None]
    px = f"{100 * np.mean(pxs):.2f}" if pxs else "-"
    lines.append(f"{'Total avg.':<16} {100 * img:>8.2f} {px:>8}")
    return "\n".join(lines)
