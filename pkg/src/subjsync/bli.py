"""Base layout interpolation: cache vanilla-pass embeddings, blend them back in."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from subjsync.errors import ConfigError, DuplicateEntryError, MissingEntryError, ShapeError
from subjsync.tensorio import load_tensor, save_tensor


def default_window(total_steps: int, fraction: float = 0.4) -> tuple[int, ...]:
    """First ceil(fraction * total_steps) timesteps."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"BLI window fraction must be in [0, 1], got {fraction}")
    return tuple(range(min(total_steps, math.ceil(fraction * total_steps))))


@dataclass(frozen=True)
class BliSchedule:
    lam: float
    window: tuple[int, ...]
    layers: tuple[int, ...]

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")

    def applies(self, t: int, layer: int) -> bool:
        return t in self.window and layer in self.layers


class EmbeddingCache:
    """Vanilla-pass patch embeddings keyed by (timestep, layer, image)."""

    def __init__(self):
        self._data: dict[tuple[int, int, int], np.ndarray] = {}

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def keys(self):
        return sorted(self._data)

    def record(self, t: int, layer: int, image: int, x) -> None:
        key = (int(t), int(layer), int(image))
        if key in self._data:
            raise DuplicateEntryError(f"embedding already cached for t={t} layer={layer} image={image}")
        arr = np.array(x, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        self._data[key] = arr

    def fetch(self, t: int, layer: int, image: int) -> np.ndarray:
        try:
            return self._data[(t, layer, image)]
        except KeyError:
            raise MissingEntryError(f"no cached embedding for t={t} layer={layer} image={image}") from None

    def is_complete(self, window: Sequence[int], layers: Sequence[int], n_images: int) -> bool:
        return all((t, l, i) in self._data for t in window for l in layers for i in range(n_images))

    def save(self, path, window: Sequence[int], layers: Sequence[int], n_images: int) -> None:
        """Dump as one (|window|, |layers|, N, P, d) tensor in key order."""
        window, layers = sorted(window), sorted(layers)
        if not window or not layers:
            raise ConfigError("cannot save an empty cache window")
        blocks = [[[self.fetch(t, l, i) for i in range(n_images)] for l in layers] for t in window]
        save_tensor(path, np.asarray(blocks))

    @classmethod
    def load(cls, path, window: Sequence[int], layers: Sequence[int]) -> "EmbeddingCache":
        window, layers = sorted(window), sorted(layers)
        arr = load_tensor(path)
        if arr.ndim != 5 or arr.shape[:2] != (len(window), len(layers)):
            raise ShapeError(f"cache dump shape {arr.shape} does not match window/layers")
        cache = cls()
        for a, t in enumerate(window):
            for b, l in enumerate(layers):
                for i in range(arr.shape[2]):
                    cache.record(t, l, i, arr[a, b, i])
        return cache


def interpolate(x_consist, x_cached, lam: float) -> np.ndarray:
    """(1 - lam) * x_consist + lam * x_cached, exact at lam = 0 and lam = 1."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    a = np.asarray(x_consist, dtype=np.float64)
    b = np.asarray(x_cached, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot interpolate {a.shape} with {b.shape}")
    if lam == 0.0:
        return a.copy()
    if lam == 1.0:
        return b.copy()
    out = (1.0 - lam) * a + lam * b
    # rounding may step one ulp outside the segment
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))
