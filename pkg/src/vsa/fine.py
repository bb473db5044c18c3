"""Block-sparse token attention over the selected key cubes.

Query tiles and key tiles are both one cube (``B`` tokens). For every query
cube the forward streams over its ``k`` selected key tiles, keeping a running
row max, normalizer and rescaled accumulator, so no ``L x L`` score or mask
array is ever built. All query cubes of all heads advance together, one group
of slots at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coarse import BlockSelection
from .dense import check_attn_tensor
from .tiling import TileLayout

DEFAULT_TILES_PER_STEP = 4


@dataclass
class FineSaved:
    row_max: np.ndarray  # [b, h, L]
    lse: np.ndarray  # [b, h, L]
    out: np.ndarray  # [b, h, L, d]


@dataclass
class TileCounter:
    """Instrumentation hook: tiles visited and multiply-accumulates issued."""

    tiles: int = 0
    macs: int = 0

    def add(self, tiles: int, block: int, head_dim: int) -> None:
        self.tiles += tiles
        # QK^T and PV, each block*block*head_dim per tile
        self.macs += 2 * tiles * block * block * head_dim


def dense_macs(batch: int, heads: int, seq: int, head_dim: int) -> int:
    return 2 * batch * heads * seq * seq * head_dim


def _setup(layout, q, k, v, sel):
    for name, x in (("Q", q), ("K", k), ("V", v)):
        check_attn_tensor(name, x)
    if not (q.shape == k.shape == v.shape):
        raise ValueError("Q, K, V must share one shape")
    if q.shape[2] != layout.l:
        raise ValueError(f"sequence length {q.shape[2]} != layout length {layout.l}")
    sel.validate(layout, q.shape)
    b, h, _, d = q.shape
    shape = (b, h, layout.num_cubes, layout.b, d)
    bi = np.arange(b)[:, None, None, None]
    hi = np.arange(h)[None, :, None, None]
    return q.reshape(shape), k.reshape(shape), v.reshape(shape), bi, hi


def _slot_groups(k: int, visit_order, tiles_per_step: int):
    order = np.arange(k) if visit_order is None else np.asarray(visit_order)
    if sorted(order.tolist()) != list(range(k)):
        raise ValueError("visit_order must be a permutation of the selection slots")
    step = max(1, int(tiles_per_step))
    return [order[i : i + step] for i in range(0, k, step)]


def _gather(xb, bi, hi, ids):
    # xb [b,h,C,B,d], ids [b,h,C,g] -> [b,h,C,g*B,d]
    b, h, c, g = ids.shape
    out = xb[bi, hi, ids]
    return out.reshape(b, h, c, g * xb.shape[3], xb.shape[4])


def fine_forward(
    layout: TileLayout,
    q,
    k,
    v,
    sel: BlockSelection,
    visit_order=None,
    tiles_per_step: int = DEFAULT_TILES_PER_STEP,
    counter: TileCounter | None = None,
):
    """Return ``(Of, FineSaved)``: attention restricted to the selected tiles."""
    qb, kb, vb, bi, hi = _setup(layout, q, k, v, sel)
    dt = q.dtype.type
    scale = dt(1.0 / np.sqrt(q.shape[-1]))
    qs = qb * scale
    m = np.full(qb.shape[:4] + (1,), -np.inf, dtype=q.dtype)
    denom = np.zeros_like(m)
    acc = np.zeros_like(qb)
    for slots in _slot_groups(sel.k, visit_order, tiles_per_step):
        ids = sel.indices[..., slots]
        kt = _gather(kb, bi, hi, ids)
        vt = _gather(vb, bi, hi, ids)
        s = qs @ kt.swapaxes(-1, -2)
        m_new = np.maximum(m, s.max(axis=-1, keepdims=True))
        alpha = np.exp(m - m_new)
        p = np.exp(s - m_new)
        denom = denom * alpha + p.sum(axis=-1, keepdims=True)
        acc = acc * alpha + p @ vt
        m = m_new
        if counter is not None:
            counter.add(ids.size, layout.b, q.shape[-1])
    out = (acc / denom).reshape(q.shape)
    lse = (m + np.log(denom)).reshape(q.shape[:3])
    return out, FineSaved(m.reshape(q.shape[:3]), lse, out)


def fine_backward(
    layout: TileLayout,
    q,
    k,
    v,
    sel: BlockSelection,
    dof,
    saved: FineSaved,
    visit_order=None,
    tiles_per_step: int = DEFAULT_TILES_PER_STEP,
    counter: TileCounter | None = None,
):
    """Gradients ``(dQ, dK, dV)`` of the block-sparse attention.

    Per-tile key/value contributions are kept per (query cube, slot) and then
    scattered with ``np.add.at`` in query-cube-major order, so each key cube
    accumulates its contributions in ascending query-cube order whatever the
    visit order was.
    """
    qb, kb, vb, bi, hi = _setup(layout, q, k, v, sel)
    if dof.shape != q.shape or saved.lse.shape != q.shape[:3]:
        raise ValueError("dOf or saved statistics do not match Q")
    dt = q.dtype.type
    scale = dt(1.0 / np.sqrt(q.shape[-1]))
    b, h, c, bs, d = qb.shape
    dob = dof.reshape(qb.shape)
    lse = saved.lse.reshape(b, h, c, bs, 1)
    delta = (dob * saved.out.reshape(qb.shape)).sum(axis=-1, keepdims=True)
    qs = qb * scale
    dq = np.zeros_like(qb)
    dk_parts = np.zeros((b, h, c, sel.k, bs, d), dtype=q.dtype)
    dv_parts = np.zeros_like(dk_parts)
    for slots in _slot_groups(sel.k, visit_order, tiles_per_step):
        g = len(slots)
        ids = sel.indices[..., slots]
        kt = _gather(kb, bi, hi, ids)
        vt = _gather(vb, bi, hi, ids)
        p = np.exp(qs @ kt.swapaxes(-1, -2) - lse)
        dv_parts[:, :, :, slots] = (p.swapaxes(-1, -2) @ dob).reshape(b, h, c, g, bs, d)
        dp = dob @ vt.swapaxes(-1, -2)
        ds = p * (dp - delta)
        dq += ds @ kt
        dk_parts[:, :, :, slots] = (ds.swapaxes(-1, -2) @ qs).reshape(b, h, c, g, bs, d)
        if counter is not None:
            counter.add(ids.size, layout.b, d)
    dk = np.zeros_like(kb)
    dv = np.zeros_like(vb)
    np.add.at(dk, (bi, hi, sel.indices), dk_parts)
    np.add.at(dv, (bi, hi, sel.indices), dv_parts)
    return (dq * scale).reshape(q.shape), dk.reshape(q.shape), dv.reshape(q.shape)
