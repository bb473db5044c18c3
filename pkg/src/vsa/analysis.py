"""Sparsity schedules, FLOP accounting, selection accuracy and fixed-pattern baselines."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .coarse import BlockSelection, pool_cubes
from .dense import dense_forward
from .tiling import TileLayout, tile, untile


@dataclass(frozen=True)
class SparsitySchedule:
    """Step-decay Top-K schedule: hold ``k_start`` for ``warmup_steps``, then
    drop by ``decrement`` every ``interval_steps`` until ``k_target``."""

    k_start: int
    k_target: int
    warmup_steps: int = 50
    interval_steps: int = 50
    decrement: int = 10

    def __post_init__(self):
        if not self.k_start >= self.k_target >= 1:
            raise ValueError("need k_start >= k_target >= 1")
        if self.decrement < 1 or self.interval_steps < 1 or self.warmup_steps < 0:
            raise ValueError("decrement and interval must be >= 1, warmup >= 0")

    @classmethod
    def parse(cls, text: str) -> "SparsitySchedule":
        """``"start:target:warmup:interval:dec"``; trailing fields may be omitted."""
        parts = [int(p) for p in text.split(":")]
        if not 2 <= len(parts) <= 5:
            raise ValueError(f"bad schedule {text!r}")
        return cls(*parts)

    @classmethod
    def constant(cls, k: int) -> "SparsitySchedule":
        return cls(k, k)

    def __call__(self, step: int) -> int:
        return schedule_k(self, step)

    def final_step(self) -> int:
        """First step at which ``k_target`` is in effect."""
        drops = -(-(self.k_start - self.k_target) // self.decrement)
        return self.warmup_steps + drops * self.interval_steps if drops else 0


def schedule_k(sched: SparsitySchedule, step: int) -> int:
    if step < sched.warmup_steps:
        return sched.k_start
    drops = (step - sched.warmup_steps) // sched.interval_steps
    return max(sched.k_target, sched.k_start - sched.decrement * drops)


def density(k: int, block: int, seq_len: int) -> float:
    """Fraction of attention tiles computed by the fine stage."""
    return k * block / seq_len


@dataclass(frozen=True)
class FlopsConfig:
    n_params: float
    n_tokens: float
    seq_len: float
    n_heads: int
    head_dim: int
    n_layers: int
    density: float = 1.0
    block: int = 64

    def __post_init__(self):
        for name in ("n_params", "n_tokens", "seq_len", "n_heads", "head_dim", "n_layers", "block"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.density <= 1:
            raise ValueError("density must be in (0, 1]")


@dataclass(frozen=True)
class FlopsReport:
    model_flops: float
    attention_flops: float
    coarse_flops: float
    total: float
    density: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def compute_flops(cfg: FlopsConfig, attention_mode: str = "full") -> FlopsReport:
    """``6ND`` for the weights plus ``4*D*S*A*H*3.5*layers`` of attention.

    For ``vsa`` the attention term is scaled by the density and the pooled
    cube attention (sequence shortened ``block``-fold on both sides) is
    reported as ``coarse_flops``.
    """
    model = 6.0 * cfg.n_params * cfg.n_tokens
    attn_full = 4.0 * cfg.n_tokens * cfg.seq_len * cfg.n_heads * cfg.head_dim * 3.5 * cfg.n_layers
    if attention_mode == "full":
        return FlopsReport(model, attn_full, 0.0, model + attn_full, 1.0)
    if attention_mode != "vsa":
        raise ValueError(f"unknown attention mode {attention_mode!r}")
    attn = attn_full * cfg.density
    coarse = attn_full / (cfg.block * cfg.block)
    return FlopsReport(model, attn, coarse, model + attn + coarse, cfg.density)


def selection_accuracy(dense_probs: np.ndarray, sel: BlockSelection, layout: TileLayout) -> np.ndarray:
    """Mean attention mass captured by the selected cubes, per ``(batch, head)``.

    ``dense_probs`` holds tile-ordered attention rows, either token level
    ``[b, h, L, L]`` or already summed per key cube ``[b, h, L, num_cubes]``.
    """
    c = layout.num_cubes
    if dense_probs.ndim != 4 or dense_probs.shape[2] != layout.l:
        raise ValueError(f"attention rows must be [b, h, {layout.l}, L or cubes]")
    if dense_probs.shape[3] == layout.l and layout.b > 1:
        mass = dense_probs.reshape(dense_probs.shape[:3] + (c, layout.b)).sum(axis=-1)
    elif dense_probs.shape[3] == c:
        mass = dense_probs
    else:
        raise ValueError(f"last axis must be {layout.l} or {c}")
    if sel.num_cubes != c or sel.indices.shape[2] != c or sel.indices.shape[:2] != mass.shape[:2]:
        raise ValueError("selection does not match layout or attention batch/heads")
    b, h = mass.shape[:2]
    m = mass.reshape(b, h, c, layout.b, c)
    picked = np.take_along_axis(m, sel.indices[:, :, :, None, :], axis=-1)
    return picked.sum(axis=-1).mean(axis=(2, 3))


def dense_cube_mass(layout: TileLayout, q, k) -> np.ndarray:
    """True (dense) attention mass per key cube for every query token."""
    _, _, probs = dense_forward(q, k, k, return_probs=True)
    return probs.reshape(probs.shape[:3] + (layout.num_cubes, layout.b)).sum(axis=-1)


# fixed-pattern baselines -------------------------------------------------------

PATTERNS = (
    "spatial",
    "temporal",
    "spatial_temporal",
    "strided_spatial",
    "strided_temporal",
    "strided_window",
    "local",
    "compress_kv",
)


def fixed_pattern_mask(
    layout: TileLayout,
    kind: str,
    ws: int = 8,
    wt: int = 2,
    window: tuple[int, int, int] = (3, 3, 3),
    pool: tuple[int, int, int] = (2, 2, 2),
) -> np.ndarray:
    """Token-level boolean ``[L, L]`` mask (tile order) for a fixed baseline.

    ``spatial``: same frame. ``temporal``: same (h, w) location.
    ``strided_spatial``: every token whose frame falls in the query's
    ``wt``-frame window. ``strided_temporal``: every token whose (h, w) falls in
    the query's ``ws x ws`` spatial window, any frame. ``spatial_temporal`` and
    ``strided_window`` are the unions of their two alternating halves, the
    connectivity a single layer sees. ``local``: key cubes within a
    ``window`` neighbourhood of the query cube. ``compress_kv``: queries attend
    to every pooled key, returned as ``[L, L / prod(pool)]``.
    """
    if kind not in PATTERNS:
        raise ValueError(f"unknown pattern {kind!r}; choose from {PATTERNS}")
    if kind == "compress_kv":
        pl = TileLayout(layout.t, layout.h, layout.w, *pool)
        return np.ones((layout.l, pl.num_cubes), dtype=bool)
    if kind in ("strided_spatial", "strided_window") and not 1 <= wt:
        raise ValueError("wt must be >= 1")
    if kind in ("strided_temporal", "strided_window") and not 1 <= ws:
        raise ValueError("ws must be >= 1")
    tc, hc, wc = (layout.tile_coords[:, i] for i in range(3))

    def eq(a, div=1):
        a = a // div
        return a[:, None] == a[None, :]

    if kind == "spatial":
        return eq(tc)
    if kind == "temporal":
        return eq(hc) & eq(wc)
    if kind == "spatial_temporal":
        return eq(tc) | (eq(hc) & eq(wc))
    if kind == "strided_spatial":
        return eq(tc, wt)
    if kind == "strided_temporal":
        return eq(hc, ws) & eq(wc, ws)
    if kind == "strided_window":
        return eq(tc, wt) | (eq(hc, ws) & eq(wc, ws))
    # local
    if any(x < 1 or x % 2 == 0 for x in window):
        raise ValueError("local window extents must be odd and positive")
    cc = layout.cube_coords
    radius = np.array(window) // 2
    near = (np.abs(cc[:, None, :] - cc[None, :, :]) <= radius).all(axis=-1)
    return np.repeat(np.repeat(near, layout.b, axis=0), layout.b, axis=1)


def block_coverage(mask: np.ndarray, layout: TileLayout) -> np.ndarray:
    """Cube-level ``[C, C]``: True where any query of cube i may see a key of cube j."""
    c, bs = layout.num_cubes, layout.b
    return mask.reshape(c, bs, c, bs).any(axis=(1, 3))


def compress_kv_attention(layout: TileLayout, q, k, v, pool: tuple[int, int, int] = (2, 2, 2)):
    """Full-resolution queries against average-pooled keys and values.

    Inputs and output are in ``layout`` tile order.
    """
    pl = TileLayout(layout.t, layout.h, layout.w, *pool)
    kc = pool_cubes(pl, tile(pl, untile(layout, k)), "mean")
    vc = pool_cubes(pl, tile(pl, untile(layout, v)), "mean")
    o, _ = dense_forward(q, kc, vc)
    return o
