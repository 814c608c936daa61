"""Dense float64 matrix helpers and the masked softmax kernel.

Matrices are plain 2-D ``float64`` numpy arrays.
"""
from __future__ import annotations

import numpy as np

from subjsync.errors import DegenerateError, ShapeError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError(f"{name} has non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def masked_row_softmax(logits, visible=None) -> np.ndarray:
    """Softmax along the last axis where ``visible == False`` gets exactly zero.

    ``visible`` is None (all visible), a vector broadcast to every row, or a
    boolean array of the logits' shape. Blocked logits never enter the row
    max or the normalizer, so their values are irrelevant. Leading axes
    beyond the first are treated as more rows.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"logits must be at least 2-D, got {x.shape}")
    if x.shape[-1] == 0:
        raise DegenerateError("softmax over zero columns")
    if visible is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    vis = np.broadcast_to(np.asarray(visible, dtype=bool), x.shape)
    open_rows = vis.any(axis=-1)
    if not np.all(open_rows):
        bad = np.argwhere(~open_rows)
        raise DegenerateError(f"fully blocked softmax row(s): {bad[:8].tolist()}")
    z = np.where(vis, x, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_apply(logits, values, return_weights: bool = False):
    """softmax(logits) @ values along the last axis, consuming ``logits``.

    The normalizer is applied after the product, which touches fewer
    entries than normalizing the weights. ``logits`` is overwritten.
    """
    e = logits
    e -= e.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    norm = e.sum(axis=-1, keepdims=True)
    out = (e @ values) / norm
    if return_weights:
        return out, e / norm
    return out


def softmax(logits) -> np.ndarray:
    return masked_row_softmax(logits, None)


def unit_normalize_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected 2-D matrix, got {m.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(norms == 0.0):
        raise DegenerateError(f"zero row(s) cannot be normalized: {np.flatnonzero(norms == 0)[:8].tolist()}")
    return m / norms[:, None]


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cosine needs equal lengths, got {u.size} and {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateError("cosine of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))
