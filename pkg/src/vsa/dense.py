"""Reference softmax attention, forward and backward (numpy).

Processes query rows in chunks so the score matrix never exceeds a fixed
element budget; every chunk still sees complete rows, so softmax is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# elements of the score block materialized per chunk
SCORE_BUDGET = 1 << 23


@dataclass
class DenseSaved:
    row_max: np.ndarray  # [b, h, Lq]
    lse: np.ndarray  # [b, h, Lq]


def check_attn_tensor(name: str, x: np.ndarray) -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ValueError(f"{name} must be a rank-4 array [batch, heads, seq, head_dim]")
    if min(x.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {x.shape}")
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"{name} must be float32 or float64, got {x.dtype}")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def _check_qkv(q, k, v):
    for name, x in (("Q", q), ("K", k), ("V", v)):
        check_attn_tensor(name, x)
    if k.shape != v.shape:
        raise ValueError(f"K {k.shape} and V {v.shape} differ")
    if q.shape[:2] != k.shape[:2] or q.shape[3] != k.shape[3]:
        raise ValueError(f"Q {q.shape} incompatible with K {k.shape}")


def _prepare_mask(mask, q, k):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    target = q.shape[:2] + (q.shape[2], k.shape[2])
    try:
        mask = np.broadcast_to(mask, target)
    except ValueError:
        raise ValueError(f"mask shape {mask.shape} does not broadcast to {target}") from None
    if not mask.any(axis=-1).all():
        raise ValueError("mask has a fully masked query row")
    if mask.all():
        return None
    return mask


def _chunk_rows(q, k) -> int:
    b, h, lq, _ = q.shape
    return max(1, min(lq, SCORE_BUDGET // max(1, b * h * k.shape[2])))


def dense_forward(q, k, v, mask=None, return_probs: bool = False):
    """Return ``(O, saved)``; with ``return_probs`` also the attention matrix.

    ``mask`` is boolean (True = attend), broadcastable to ``[b, h, Lq, Lk]``.
    An all-true mask takes the unmasked path, so results match bitwise.
    """
    _check_qkv(q, k, v)
    mask = _prepare_mask(mask, q, k)
    scale = 1.0 / np.sqrt(q.shape[-1])
    lq = q.shape[2]
    o = np.empty_like(q)
    row_max = np.empty(q.shape[:3], dtype=q.dtype)
    lse = np.empty(q.shape[:3], dtype=q.dtype)
    probs = np.empty(q.shape[:3] + (k.shape[2],), dtype=q.dtype) if return_probs else None
    kt = k.swapaxes(-1, -2)
    step = _chunk_rows(q, k)
    for s in range(0, lq, step):
        e = min(lq, s + step)
        scores = (q[:, :, s:e] @ kt) * q.dtype.type(scale)
        if mask is not None:
            scores = np.where(mask[:, :, s:e], scores, -np.inf)
        m = scores.max(axis=-1, keepdims=True)
        p = np.exp(scores - m)
        denom = p.sum(axis=-1, keepdims=True)
        p /= denom
        o[:, :, s:e] = p @ v
        row_max[:, :, s:e] = m[..., 0]
        lse[:, :, s:e] = (m + np.log(denom))[..., 0]
        if probs is not None:
            probs[:, :, s:e] = p
    saved = DenseSaved(row_max, lse)
    if return_probs:
        return o, saved, probs
    return o, saved


def dense_backward(q, k, v, mask, do, saved: DenseSaved):
    """Gradients ``(dQ, dK, dV)`` given upstream ``dO``.

    Probabilities are recomputed from the saved log-sum-exp.
    """
    _check_qkv(q, k, v)
    if do.shape != q.shape[:3] + (v.shape[3],):
        raise ValueError(f"dO shape {do.shape} does not match output shape")
    if saved.lse.shape != q.shape[:3]:
        raise ValueError("saved statistics do not match Q")
    mask = _prepare_mask(mask, q, k)
    dt = q.dtype.type
    scale = dt(1.0 / np.sqrt(q.shape[-1]))
    lq = q.shape[2]
    dq = np.empty_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    kt = k.swapaxes(-1, -2)
    vt = v.swapaxes(-1, -2)
    step = _chunk_rows(q, k)
    for s in range(0, lq, step):
        e = min(lq, s + step)
        scores = (q[:, :, s:e] @ kt) * scale
        if mask is not None:
            scores = np.where(mask[:, :, s:e], scores, -np.inf)
        p = np.exp(scores - saved.lse[:, :, s:e, None])
        dv += p.swapaxes(-1, -2) @ do[:, :, s:e]
        dp = do[:, :, s:e] @ vt
        ds = p * (dp - (p * dp).sum(axis=-1, keepdims=True))
        dq[:, :, s:e] = (ds @ k) * scale
        dk += (ds.swapaxes(-1, -2) @ q[:, :, s:e]) * scale
    return dq, dk, dv
