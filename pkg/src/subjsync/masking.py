"""Subject masks from cross-attention maps, propagation masks and mask dropout."""
from __future__ import annotations

from fractions import Fraction
from typing import Sequence

import numpy as np

from subjsync.errors import ConfigError, ShapeError
from subjsync.rng import SplitMix64

THRESHOLD_METHODS = ("otsu", "niblack", "sauvola", "adaptive_mean")
OTSU_BINS = 256
LOCAL_WINDOW = 3
NIBLACK_K = -0.2
SAUVOLA_K = 0.2
SAUVOLA_R = 0.5


def upsample_nearest(values, src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a flattened patch map between grid sizes."""
    sh, sw = src_hw
    dh, dw = dst_hw
    grid = np.asarray(values, dtype=np.float64).reshape(sh, sw)
    rows = (np.arange(dh) * sh) // dh
    cols = (np.arange(dw) * sw) // dw
    return grid[np.ix_(rows, cols)].ravel()


def min_max_rescale(values) -> np.ndarray:
    """Rescale to [0, 1]; a constant input maps to all ones."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def aggregate_subject_maps(per_layer_maps, rescale: bool = True) -> np.ndarray:
    """Average each subject's map over layers, then sum over subjects.

    ``per_layer_maps`` is indexed ``[layer][subject]`` and each entry is a
    length-P vector of non-negative scores.
    """
    maps = np.asarray(per_layer_maps, dtype=np.float64)
    if maps.size == 0 or maps.ndim != 3 or maps.shape[0] == 0 or maps.shape[1] == 0:
        raise ConfigError("aggregate_subject_maps needs at least one layer and one subject")
    if np.any(maps < 0) or not np.all(np.isfinite(maps)):
        raise ShapeError("attention maps must be finite and non-negative")
    agg = maps.mean(axis=0).sum(axis=0)
    return min_max_rescale(agg) if rescale else agg


def histogram_bins(values, bins: int = OTSU_BINS) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.minimum(np.floor(v * bins), bins - 1).astype(np.int64)


def otsu_threshold(values, bins: int = OTSU_BINS) -> int | None:
    """Bin index t maximizing between-class variance of [0, t) vs [t, bins).

    Values must lie in [0, 1]. Scores are compared exactly as rationals so
    ties resolve to the lowest t. Returns None when every value falls in
    one bin.
    """
    b = histogram_bins(values, bins)
    counts = np.bincount(b, minlength=bins)
    levels = np.arange(bins)
    n = int(counts.sum())
    total = int((counts * levels).sum())
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * levels)[:-1]
    n1 = n - n0
    valid = (n0 > 0) & (n1 > 0)
    if not valid.any():
        return None
    # float screen, then exact rational comparison among near-maximal candidates
    num = (s0 * n1 - (total - s0) * n0).astype(np.float64) ** 2
    approx = np.where(valid, num / np.where(valid, n0 * n1, 1), -1.0)
    cand = np.flatnonzero(approx >= approx.max() * (1.0 - 1e-9))
    best, best_t = None, None
    for c in cand.tolist():
        a0, c0 = int(n0[c]), int(s0[c])
        a1 = n - a0
        score = Fraction((c0 * a1 - (total - c0) * a0) ** 2, a0 * a1)
        if best is None or score > best:
            best, best_t = score, c + 1
    return best_t


def _local_stats(grid: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    r = window // 2
    padded = np.pad(grid, r, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    return win.mean(axis=(-2, -1)), win.std(axis=(-2, -1))


def binarize(values, method: str = "otsu", grid_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Binary subject mask from a map rescaled to [0, 1].

    Constant maps give an all-ones mask under every method.
    """
    if method not in THRESHOLD_METHODS:
        raise ConfigError(f"unknown threshold method {method!r}")
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ShapeError("empty attention map")
    if v.max() == v.min():
        return np.ones(v.size, dtype=bool)
    if method == "otsu":
        t = otsu_threshold(v)
        if t is None:
            return np.ones(v.size, dtype=bool)
        return histogram_bins(v) >= t

    if grid_hw is None:
        side = int(round(np.sqrt(v.size)))
        if side * side != v.size:
            raise ShapeError("local thresholding needs the patch grid shape")
        grid_hw = (side, side)
    grid = v.reshape(grid_hw)
    mean, std = _local_stats(grid, LOCAL_WINDOW)
    if method == "niblack":
        thresh = mean + NIBLACK_K * std
    elif method == "sauvola":
        thresh = mean * (1.0 + SAUVOLA_K * (std / SAUVOLA_R - 1.0))
    else:
        thresh = mean
    return (grid > thresh).ravel()


def build_propagation_mask(i: int, masks) -> np.ndarray:
    """Visibility over the N*P stacked keys for queries of image ``i``.

    Own-image keys are always visible; other images contribute their
    subject masks.
    """
    m = np.asarray(masks, dtype=bool)
    if m.ndim != 2:
        raise ShapeError(f"masks must be (N, P), got {m.shape}")
    n, p = m.shape
    if not 0 <= i < n:
        raise ShapeError(f"image index {i} out of range for N={n}")
    gamma = m.copy()
    gamma[i] = True
    return gamma.reshape(n * p)


def dropout_mask(mask, rate: float, stream: SplitMix64) -> np.ndarray:
    """Zero each set entry with probability ``rate``.

    One uniform is drawn per entry whatever the mask content, so stream
    consumption only depends on the mask length.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    m = np.asarray(mask, dtype=bool)
    u = stream.uniform(m.shape) if m.ndim else stream.uniform(1)
    return m & ~(u < rate)


def mask_dropout_batch(masks, rate: float, stream: SplitMix64) -> np.ndarray:
    return np.stack([dropout_mask(m, rate, stream) for m in np.asarray(masks, dtype=bool)])


def masks_from_maps(maps: Sequence[np.ndarray], method: str, grid_hw) -> np.ndarray:
    return np.stack([binarize(m, method, grid_hw) for m in maps])
