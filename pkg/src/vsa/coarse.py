"""Cube-pooled attention and Top-K key-cube selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dense import DenseSaved, check_attn_tensor, dense_backward
from .tiling import TileLayout

POOL_MODES = ("mean", "max")


@dataclass
class BlockSelection:
    """Selected key cubes per ``(batch, head, query cube)``.

    ``indices`` has shape ``[b, h, num_query_cubes, k]`` and every row is
    strictly ascending.
    """

    indices: np.ndarray
    num_cubes: int

    @property
    def k(self) -> int:
        return self.indices.shape[-1]

    def validate(self, layout: TileLayout | None = None, shape: tuple | None = None) -> None:
        idx = self.indices
        if idx.ndim != 4:
            raise ValueError(f"selection must be [b, h, cubes, k], got shape {idx.shape}")
        if not np.issubdtype(idx.dtype, np.integer):
            raise TypeError("selection indices must be integers")
        if layout is not None:
            if self.num_cubes != layout.num_cubes or idx.shape[2] != layout.num_cubes:
                raise ValueError("selection does not match layout cube count")
        if not 1 <= self.k <= self.num_cubes:
            raise ValueError(f"k={self.k} outside [1, {self.num_cubes}]")
        if shape is not None and idx.shape[:2] != tuple(shape[:2]):
            raise ValueError(f"selection batch/heads {idx.shape[:2]} != tensor {shape[:2]}")
        if idx.min() < 0 or idx.max() >= self.num_cubes:
            raise ValueError("selection index out of range")
        if self.k > 1 and not (np.diff(idx, axis=-1) > 0).all():
            raise ValueError("selection rows must be strictly ascending (no duplicates)")

    def to_block_mask(self) -> np.ndarray:
        """Boolean ``[b, h, cubes, cubes]`` cube-level mask."""
        b, h, c, _ = self.indices.shape
        m = np.zeros((b, h, c, self.num_cubes), dtype=bool)
        np.put_along_axis(m, self.indices, True, axis=-1)
        return m

    def to_dense_mask(self, block: int) -> np.ndarray:
        """Token-level ``[b, h, L, L]`` mask; each selected entry becomes a ``block x block`` tile."""
        m = self.to_block_mask()
        return np.repeat(np.repeat(m, block, axis=2), block, axis=3)

    @classmethod
    def full(cls, batch: int, heads: int, num_cubes: int) -> "BlockSelection":
        idx = np.broadcast_to(np.arange(num_cubes), (batch, heads, num_cubes, num_cubes)).copy()
        return cls(idx, num_cubes)

    @classmethod
    def random(cls, batch: int, heads: int, num_cubes: int, k: int, rng: np.random.Generator):
        if not 1 <= k <= num_cubes:
            raise ValueError(f"k={k} outside [1, {num_cubes}]")
        keys = rng.random((batch, heads, num_cubes, num_cubes))
        idx = np.sort(np.argsort(keys, axis=-1)[..., :k], axis=-1)
        return cls(idx, num_cubes)


@dataclass
class CoarseArtifacts:
    qc: np.ndarray
    kc: np.ndarray
    vc: np.ndarray
    probs: np.ndarray  # [b, h, C, C]
    oc: np.ndarray  # token level [b, h, L, d]
    selection: BlockSelection
    saved: DenseSaved
    pool: str = "mean"
    argmax: tuple | None = None  # max pooling: per-tensor argmax within each cube


def _cubes(layout: TileLayout, x: np.ndarray) -> np.ndarray:
    if x.shape[2] != layout.l:
        raise ValueError(f"sequence length {x.shape[2]} != layout length {layout.l}")
    b, h, _, d = x.shape
    return x.reshape(b, h, layout.num_cubes, layout.b, d)


def pool_cubes(layout: TileLayout, x: np.ndarray, mode: str = "mean", return_argmax: bool = False):
    """Pool each cube's ``B`` tokens of a tile-ordered tensor to one vector.

    The input must already be tile-ordered; raster input pools the wrong
    tokens and cannot be detected here.
    """
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    xc = _cubes(layout, x)
    if mode == "mean":
        out = xc.mean(axis=3)
        return (out, None) if return_argmax else out
    arg = xc.argmax(axis=3)
    out = np.take_along_axis(xc, arg[:, :, :, None], axis=3)[:, :, :, 0]
    return (out, arg) if return_argmax else out


def pool_cubes_backward(layout: TileLayout, dpooled: np.ndarray, mode: str = "mean", argmax=None):
    """Token-level gradient of :func:`pool_cubes`.

    Mean pooling spreads ``1/B`` of the cube gradient over each token; max
    pooling routes it to the first argmax.
    """
    b, h, c, d = dpooled.shape
    if mode == "mean":
        dx = np.broadcast_to((dpooled / layout.b)[:, :, :, None], (b, h, c, layout.b, d))
        return dx.reshape(b, h, layout.l, d).copy()
    if mode != "max" or argmax is None:
        raise ValueError("max pooling backward needs the forward argmax")
    dx = np.zeros((b, h, c, layout.b, d), dtype=dpooled.dtype)
    np.put_along_axis(dx, argmax[:, :, :, None], dpooled[:, :, :, None], axis=3)
    return dx.reshape(b, h, layout.l, d)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Ascending indices of the ``k`` largest entries per row; ties go to the lower index."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if k == n:
        return np.broadcast_to(np.arange(n), scores.shape).copy()
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def coarse_forward_select(layout: TileLayout, q, k, v, topk: int, pool: str = "mean") -> CoarseArtifacts:
    """Pooled attention plus Top-K selection in a single pass over the cube scores.

    Selection ranks raw scores, which orders each row exactly as the
    softmax probabilities do.
    """
    for name, x in (("Q", q), ("K", k), ("V", v)):
        check_attn_tensor(name, x)
    if not 1 <= topk <= layout.num_cubes:
        raise ValueError(f"k={topk} outside [1, {layout.num_cubes}]")
    qc, qa = pool_cubes(layout, q, pool, return_argmax=True)
    kc, ka = pool_cubes(layout, k, pool, return_argmax=True)
    vc, va = pool_cubes(layout, v, pool, return_argmax=True)
    dt = q.dtype.type
    scores = (qc @ kc.swapaxes(-1, -2)) * dt(1.0 / np.sqrt(q.shape[-1]))
    m = scores.max(axis=-1, keepdims=True)
    p = np.exp(scores - m)
    denom = p.sum(axis=-1, keepdims=True)
    p /= denom
    sel = BlockSelection(topk_indices(scores, topk), layout.num_cubes)
    oc_cube = p @ vc
    oc = np.repeat(oc_cube, layout.b, axis=2)
    saved = DenseSaved(m[..., 0], (m + np.log(denom))[..., 0])
    return CoarseArtifacts(
        qc, kc, vc, p, oc, sel, saved, pool, (qa, ka, va) if pool == "max" else None
    )


def coarse_backward(art: CoarseArtifacts, layout: TileLayout, doc_token, q, k, v):
    """Token-level ``(dQ, dK, dV)`` of the coarse output alone; selection is constant."""
    if doc_token.shape != art.oc.shape:
        raise ValueError(f"dOc shape {doc_token.shape} != coarse output {art.oc.shape}")
    if q.shape != k.shape or k.shape != v.shape or q.shape[2] != layout.l:
        raise ValueError("Q/K/V shapes do not match the coarse artifacts")
    doc = _cubes(layout, doc_token).sum(axis=3)
    dqc, dkc, dvc = dense_backward(art.qc, art.kc, art.vc, None, doc, art.saved)
    am = art.argmax or (None, None, None)
    return (
        pool_cubes_backward(layout, dqc, art.pool, am[0]),
        pool_cubes_backward(layout, dkc, art.pool, am[1]),
        pool_cubes_backward(layout, dvc, art.pool, am[2]),
    )
