"""Proxy metrics for subject consistency, layout diversity and mask quality."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from subjsync.linalg import cosine

METRIC_NAMES = ("subject_consistency", "layout_diversity", "background_drift", "mask_iou_vs_planted")


@dataclass
class MetricReport:
    subject_consistency: float
    layout_diversity: float
    background_drift: float
    mask_iou_vs_planted: float
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def pooled(embeddings, weights) -> np.ndarray | None:
    """Mask-weighted mean of patch rows; None for an empty mask."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total == 0:
        return None
    return (w[:, None] * np.asarray(embeddings, dtype=np.float64)).sum(axis=0) / total


def _mean_pairwise_cosine(vectors: list) -> tuple[float, int]:
    vals, skipped = [], 0
    for a, b in combinations(vectors, 2):
        if a is None or b is None or not np.any(a) or not np.any(b):
            skipped += 1
            continue
        vals.append(cosine(a, b))
    return (math.fsum(vals) / len(vals) if vals else math.nan), skipped


def subject_consistency(embeddings, masks) -> tuple[float, int]:
    """Mean pairwise cosine of subject-pooled embeddings and the number of skipped pairs."""
    return _mean_pairwise_cosine([pooled(e, m) for e, m in zip(embeddings, masks)])


def background_drift(embeddings, masks) -> tuple[float, int]:
    return _mean_pairwise_cosine([pooled(e, ~np.asarray(m, dtype=bool)) for e, m in zip(embeddings, masks)])


def layout_diversity(masks) -> float:
    vals = [1.0 - mask_iou(a, b) for a, b in combinations(masks, 2)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def mask_iou_vs_planted(masks, planted) -> float:
    vals = [mask_iou(m, g) for m, g in zip(masks, planted)]
    return math.fsum(vals) / len(vals)


def compute_metrics(embeddings, masks, planted) -> MetricReport:
    masks = np.asarray(masks, dtype=bool)
    sc, sc_skip = subject_consistency(embeddings, masks)
    bd, bd_skip = background_drift(embeddings, masks)
    flags = []
    if math.isnan(sc):
        flags.append("subject_consistency_undefined")
    elif sc_skip:
        flags.append(f"subject_consistency_skipped_pairs={sc_skip}")
    if math.isnan(bd):
        flags.append("background_drift_undefined")
    elif bd_skip:
        flags.append(f"background_drift_skipped_pairs={bd_skip}")
    return MetricReport(sc, layout_diversity(masks), bd, mask_iou_vs_planted(masks, planted), flags)
