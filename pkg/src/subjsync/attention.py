"""QKV projection, self-attention and masked cross-image attention sharing."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from subjsync.errors import ConfigError, DegenerateError, ShapeError
from subjsync.linalg import matmul, softmax_apply
from subjsync.masking import dropout_mask
from subjsync.rng import SplitMix64


@dataclass
class ProjectionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    heads: int = 1

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1 or self.w_q.ndim != 2:
            raise ShapeError(f"W_Q, W_K, W_V must share one d x d_k shape, got {sorted(shapes)}")
        if self.heads < 1 or self.w_q.shape[1] % self.heads:
            raise ShapeError(f"d_k={self.w_q.shape[1]} not divisible by heads={self.heads}")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]


@dataclass
class BatchQKV:
    q: list[np.ndarray]
    k: list[np.ndarray]
    v: list[np.ndarray]
    heads: int = 1
    _stacked: dict = field(default_factory=dict, repr=False)

    @property
    def n_images(self) -> int:
        return len(self.q)

    @property
    def n_patches(self) -> int:
        return self.q[0].shape[0]

    @property
    def k_all(self) -> np.ndarray:
        if "k" not in self._stacked:
            self._stacked["k"] = np.concatenate(self.k, axis=0)
        return self._stacked["k"]

    @property
    def v_all(self) -> np.ndarray:
        if "v" not in self._stacked:
            self._stacked["v"] = np.concatenate(self.v, axis=0)
        return self._stacked["v"]

    @property
    def q_all(self) -> np.ndarray:
        return np.concatenate(self.q, axis=0)


@dataclass
class SubsetKV:
    """Stacked keys/values of the reference subset, in image order."""

    images: tuple[int, ...]
    k: np.ndarray
    v: np.ndarray


def project_qkv(x, w: ProjectionWeights):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.w_q.shape[0]:
        raise ShapeError(f"embeddings {x.shape} do not match projection input dim {w.w_q.shape[0]}")
    return matmul(x, w.w_q), matmul(x, w.w_k), matmul(x, w.w_v)


def project_batch(xs: Sequence[np.ndarray], w: ProjectionWeights) -> BatchQKV:
    qkv = [project_qkv(x, w) for x in xs]
    return BatchQKV([t[0] for t in qkv], [t[1] for t in qkv], [t[2] for t in qkv], heads=w.heads)


def attend(q, k, v, heads: int = 1, visible=None, return_weights: bool = False):
    """Multi-head scaled dot-product attention with an optional key mask.

    ``visible`` is one boolean per key, shared by every query row and every
    head. Blocked keys are dropped before the logits are formed, so they
    contribute exactly zero. Each head is scaled by 1/sqrt(head_dim). With
    ``return_weights`` the weights come back as an (H, queries, keys) array
    over the full key axis.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("q, k, v must be 2-D")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible attention shapes q{q.shape} k{k.shape} v{v.shape}")
    if heads < 1 or q.shape[1] % heads or v.shape[1] % heads:
        raise ShapeError(f"feature dims not divisible by heads={heads}")
    n_keys = k.shape[0]
    keep = None
    if visible is not None:
        vis = np.asarray(visible, dtype=bool)
        if vis.shape != (n_keys,):
            raise ShapeError(f"visibility has shape {vis.shape}, expected ({n_keys},)")
        if not vis.all():
            keep = np.flatnonzero(vis)
            if keep.size == 0:
                raise DegenerateError("every key is blocked for this query image")
            k, v = k[keep], v[keep]
    dh = q.shape[1] // heads
    dv = v.shape[1] // heads
    q3 = (q * (1.0 / np.sqrt(dh))).reshape(q.shape[0], heads, dh).transpose(1, 0, 2)
    k3 = k.reshape(k.shape[0], heads, dh).transpose(1, 0, 2)
    v3 = v.reshape(v.shape[0], heads, dv).transpose(1, 0, 2)
    res = softmax_apply(q3 @ k3.transpose(0, 2, 1), v3, return_weights)
    out, a = res if return_weights else (res, None)
    out = out.transpose(1, 0, 2).reshape(q.shape[0], heads * dv)
    if not return_weights:
        return out
    if keep is not None:
        full = np.zeros(a.shape[:2] + (n_keys,))
        full[:, :, keep] = a
        a = full
    return out, a


def self_attention(q, k, v, heads: int = 1) -> np.ndarray:
    return attend(q, k, v, heads)


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _drop_cross_segments(gamma: np.ndarray, own: int, n_patches: int, segments: Sequence[int],
                         rate: float, stream: SplitMix64 | None) -> np.ndarray:
    """Attention-sharing dropout over the other-image segments of one visibility vector."""
    if rate <= 0.0 or stream is None:
        return gamma
    out = gamma.copy()
    for j in segments:
        if j == own:
            continue
        sl = slice(j * n_patches, (j + 1) * n_patches)
        out[sl] = dropout_mask(out[sl], rate, stream)
    return out


def _check_gammas(batch: BatchQKV, gammas) -> list[np.ndarray]:
    n, p = batch.n_images, batch.n_patches
    if len(gammas) != n:
        raise ShapeError(f"need one propagation mask per image ({n}), got {len(gammas)}")
    out = []
    for g in gammas:
        g = np.asarray(g, dtype=bool)
        if g.shape != (n * p,):
            raise ShapeError(f"propagation mask must have length {n * p}, got {g.shape}")
        out.append(g)
    return out


def effective_gammas(batch: BatchQKV, gammas, dropout_rate: float = 0.0,
                     stream: SplitMix64 | None = None, images: Sequence[int] | None = None):
    """Propagation masks after attention-sharing dropout, drawn in image order."""
    gammas = _check_gammas(batch, gammas)
    n, p = batch.n_images, batch.n_patches
    segs = range(n) if images is None else images
    return [_drop_cross_segments(g, i, p, segs, dropout_rate, stream) for i, g in enumerate(gammas)]


def cross_image_attention(batch: BatchQKV, gammas, dropout_rate: float = 0.0,
                          stream: SplitMix64 | None = None, workers: int = 1,
                          return_weights: bool = False):
    """Each image's queries attend to the stacked keys/values of the batch.

    Visibility follows the per-image propagation masks; dropout only touches
    other-image segments, so every row keeps its own P keys.
    """
    gam = effective_gammas(batch, gammas, dropout_rate, stream)
    k_all, v_all = batch.k_all, batch.v_all

    def one(i):
        return attend(batch.q[i], k_all, v_all, batch.heads, gam[i], return_weights)

    res = _map(one, list(range(batch.n_images)), workers)
    if return_weights:
        return [r[0] for r in res], [r[1] for r in res]
    return res


def subset_kv(batch: BatchQKV, subset: Sequence[int]) -> SubsetKV:
    sub = tuple(sorted(set(subset)))
    return SubsetKV(sub, np.concatenate([batch.k[j] for j in sub]),
                    np.concatenate([batch.v[j] for j in sub]))


def subset_attention(batch: BatchQKV, subset: Sequence[int], gammas, dropout_rate: float = 0.0,
                     stream: SplitMix64 | None = None, cache: SubsetKV | None = None,
                     workers: int = 1, return_weights: bool = False):
    """Attention sharing restricted to a reference subset.

    Subset images share among themselves. Every other image attends to its
    own keys (always visible) plus the subset's keys gated by its
    propagation mask; ``cache`` may supply the subset keys/values. Returned
    weights are scattered onto the full N*P key axis.
    """
    n, p = batch.n_images, batch.n_patches
    sub = tuple(sorted(set(int(s) for s in subset)))
    if not sub:
        raise ConfigError("subset must be non-empty")
    if sub[0] < 0 or sub[-1] >= n:
        raise ConfigError(f"subset {sub} not within batch of {n} images")
    if cache is None:
        cache = subset_kv(batch, sub)
    elif tuple(cache.images) != sub:
        raise ConfigError(f"cached subset {cache.images} does not match requested {sub}")
    gammas = _check_gammas(batch, gammas)

    plans = []
    for i in range(n):
        if i in sub:
            order = sub
        else:
            order = tuple(sorted(sub + (i,)))
        g = _drop_cross_segments(gammas[i], i, p, order, dropout_rate, stream)
        plans.append((i, order, np.concatenate([g[j * p:(j + 1) * p] for j in order])))

    def one(plan):
        i, order, vis = plan
        if i in sub:
            keys = np.concatenate([batch.k[j] for j in order])
            vals = np.concatenate([batch.v[j] for j in order])
        else:
            pos = {j: t for t, j in enumerate(sub)}
            keys = np.concatenate([batch.k[i] if j == i else cache.k[pos[j] * p:(pos[j] + 1) * p] for j in order])
            vals = np.concatenate([batch.v[i] if j == i else cache.v[pos[j] * p:(pos[j] + 1) * p] for j in order])
        res = attend(batch.q[i], keys, vals, batch.heads, vis, return_weights)
        if not return_weights:
            return res
        out, w = res
        full = np.zeros(w.shape[:2] + (n * p,))
        for t, j in enumerate(order):
            full[:, :, j * p:(j + 1) * p] = w[:, :, t * p:(t + 1) * p]
        return out, full

    res = _map(one, plans, workers)
    if return_weights:
        return [r[0] for r in res], [r[1] for r in res]
    return res
