"""Regional feature harmonization.

Each subject patch of a source image finds its most compatible foreground
patch in the other images and is pulled toward it.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from subjsync.errors import ConfigError, ShapeError
from subjsync.linalg import masked_row_softmax, unit_normalize_rows
from subjsync.masking import histogram_bins, min_max_rescale, otsu_threshold
from subjsync.rng import SplitMix64

CSV_FIELDS = ("source_image", "source_patch", "target_image", "target_patch", "score", "harmonized")


@dataclass(frozen=True)
class Match:
    source_image: int
    source_patch: int
    target_image: int
    target_patch: int
    score: float
    harmonized: bool


@dataclass
class CorrespondenceTable:
    matches: list[Match] = field(default_factory=list)

    def __len__(self):
        return len(self.matches)

    def __iter__(self):
        return iter(self.matches)

    def for_source(self, i: int) -> list[Match]:
        return [m for m in self.matches if m.source_image == i]

    def write_csv(self, fh, extra: dict | None = None, header: bool = True):
        extra = extra or {}
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(list(extra) + list(CSV_FIELDS))
        for m in self.matches:
            w.writerow(list(extra.values()) + [m.source_image, m.source_patch, m.target_image,
                                               m.target_patch, repr(float(m.score)), int(m.harmonized)])


def compatibility(ri_row, rj, omega_j: Sequence[int], tau: float):
    """Softmax over ``omega_j`` of cosine(R_i(r), R_j(w)) / tau.

    Returns None when ``omega_j`` is empty (no correspondence possible).
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    omega = np.asarray(omega_j, dtype=np.int64)
    if omega.size == 0:
        return None
    src = unit_normalize_rows(np.atleast_2d(np.asarray(ri_row, dtype=np.float64)))
    tgt = unit_normalize_rows(np.asarray(rj, dtype=np.float64)[omega])
    return masked_row_softmax((src @ tgt.T) / tau)[0]


def _quality_gate(scores: np.ndarray) -> np.ndarray:
    """Otsu split of correspondence scores; only the upper class harmonizes."""
    if scores.size == 0:
        return np.zeros(0, dtype=bool)
    rescaled = min_max_rescale(scores)
    t = otsu_threshold(rescaled) if scores.max() > scores.min() else None
    if t is None:
        return np.ones(scores.size, dtype=bool)
    return histogram_bins(rescaled) >= t


def correspond(regions: Sequence[np.ndarray], masks, tau: float,
               sources: Iterable[int] | None = None,
               targets: Sequence[int] | None = None) -> CorrespondenceTable:
    """Best foreground correspondent for every subject patch of every source.

    Ties go to the smallest target patch, then the smallest target image.
    ``targets`` restricts the images searched (reference subset mode).
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    masks = np.asarray(masks, dtype=bool)
    n = len(regions)
    if masks.shape[0] != n:
        raise ShapeError(f"{masks.shape[0]} masks for {n} region sets")
    normed = [unit_normalize_rows(r) for r in regions]
    omegas = [np.flatnonzero(m) for m in masks]
    pool = range(n) if targets is None else sorted(set(targets))
    table = CorrespondenceTable()
    for i in (range(n) if sources is None else sources):
        src = omegas[i]
        if src.size == 0:
            continue
        best_score = np.full(src.size, -np.inf)
        best_img = np.full(src.size, -1, dtype=np.int64)
        best_patch = np.full(src.size, -1, dtype=np.int64)
        for j in pool:
            if j == i or omegas[j].size == 0:
                continue
            h = masked_row_softmax((normed[i][src] @ normed[j][omegas[j]].T) / tau)
            arg = np.argmax(h, axis=1)
            val = h[np.arange(src.size), arg]
            better = val > best_score
            best_score[better] = val[better]
            best_img[better] = j
            best_patch[better] = omegas[j][arg[better]]
        found = best_img >= 0
        if not found.any():
            continue
        flags = _quality_gate(best_score[found])
        for r, j, w, s, f in zip(src[found], best_img[found], best_patch[found], best_score[found], flags):
            table.matches.append(Match(i, int(r), int(j), int(w), float(s), bool(f)))
    return table


def harmonize(ri, matches: Sequence[Match], regions: Sequence[np.ndarray], gamma: float,
              mask_i, dropout_rate: float = 0.0, stream: SplitMix64 | None = None):
    """Move flagged subject rows of ``ri`` a fraction ``gamma`` toward their match.

    Returns the new rows and the list of matches actually applied. Rows
    outside ``mask_i`` are returned untouched.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must be in [0, 1], got {gamma}")
    ri = np.asarray(ri, dtype=np.float64)
    mask_i = np.asarray(mask_i, dtype=bool)
    if mask_i.shape != (ri.shape[0],):
        raise ShapeError(f"mask length {mask_i.shape} does not match {ri.shape[0]} regions")
    dropped = np.zeros(ri.shape[0], dtype=bool)
    if dropout_rate > 0.0 and stream is not None:
        if dropout_rate >= 1.0:
            raise ConfigError("RFH dropout rate must be < 1")
        dropped = stream.uniform(ri.shape[0]) < dropout_rate
    out = ri.copy()
    applied = []
    if gamma == 0.0:
        return out, applied
    for m in matches:
        r = m.source_patch
        if not m.harmonized or dropped[r] or not mask_i[r]:
            continue
        target = regions[m.target_image][m.target_patch]
        out[r] = target if gamma == 1.0 else ri[r] + gamma * (target - ri[r])
        applied.append(m)
    return out, applied
