"""Cube tiling of (T, H, W) video tokens.

Raster order is ``n = t*H*W + h*W + w``. Tile order groups the ``B = ct*ch*cw``
tokens of each cube into one contiguous span, cubes ranked in raster order of
their cube coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class TileLayout:
    t: int
    h: int
    w: int
    ct: int
    ch: int
    cw: int

    def __post_init__(self):
        for name in ("t", "h", "w", "ct", "ch", "cw"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        for dim, cube in (("t", "ct"), ("h", "ch"), ("w", "cw")):
            if getattr(self, dim) % getattr(self, cube):
                raise ValueError(
                    f"{dim}={getattr(self, dim)} is not divisible by {cube}={getattr(self, cube)}"
                )

    @classmethod
    def from_shapes(cls, video: tuple[int, int, int], cube: tuple[int, int, int]) -> "TileLayout":
        return cls(*video, *cube)

    @property
    def nt(self) -> int:
        return self.t // self.ct

    @property
    def nh(self) -> int:
        return self.h // self.ch

    @property
    def nw(self) -> int:
        return self.w // self.cw

    @property
    def b(self) -> int:
        return self.ct * self.ch * self.cw

    @property
    def l(self) -> int:  # noqa: E743
        return self.t * self.h * self.w

    @property
    def num_cubes(self) -> int:
        return self.nt * self.nh * self.nw

    @property
    def video_shape(self) -> tuple[int, int, int]:
        return (self.t, self.h, self.w)

    @property
    def cube_shape(self) -> tuple[int, int, int]:
        return (self.ct, self.ch, self.cw)

    def flatten_index(self, t: int, h: int, w: int) -> int:
        """Tile-order position of the token at ``(t, h, w)``."""
        for name, v, lim in (("t", t, self.t), ("h", h, self.h), ("w", w, self.w)):
            if not 0 <= v < lim:
                raise ValueError(f"coordinate {name}={v} out of range [0, {lim})")
        cube = (t // self.ct) * self.nh * self.nw + (h // self.ch) * self.nw + w // self.cw
        offset = (t % self.ct) * self.ch * self.cw + (h % self.ch) * self.cw + w % self.cw
        return int(cube * self.b + offset)

    @cached_property
    def tile_perm(self) -> np.ndarray:
        """``tile_perm[n]`` is the raster position of the token stored at tile position ``n``."""
        raster = np.arange(self.l).reshape(self.nt, self.ct, self.nh, self.ch, self.nw, self.cw)
        perm = raster.transpose(0, 2, 4, 1, 3, 5).reshape(-1)
        perm.setflags(write=False)
        return perm

    @cached_property
    def untile_perm(self) -> np.ndarray:
        """Inverse of :attr:`tile_perm`: tile position of each raster position."""
        inv = np.empty(self.l, dtype=np.intp)
        inv[self.tile_perm] = np.arange(self.l)
        inv.setflags(write=False)
        return inv

    @cached_property
    def tile_coords(self) -> np.ndarray:
        """``(L, 3)`` array of ``(t, h, w)`` for every tile-order position."""
        r = self.tile_perm
        hw = self.h * self.w
        coords = np.stack([r // hw, (r % hw) // self.w, r % self.w], axis=1)
        coords.setflags(write=False)
        return coords

    @cached_property
    def cube_coords(self) -> np.ndarray:
        """``(num_cubes, 3)`` cube-grid coordinates in cube-rank order."""
        c = np.arange(self.num_cubes)
        nhw = self.nh * self.nw
        coords = np.stack([c // nhw, (c % nhw) // self.nw, c % self.nw], axis=1)
        coords.setflags(write=False)
        return coords


def flatten_index(layout: TileLayout, t: int, h: int, w: int) -> int:
    return layout.flatten_index(t, h, w)


def _check_seq(layout: TileLayout, x: np.ndarray, axis: int) -> None:
    if x.ndim == 0 or x.shape[axis] != layout.l:
        raise ValueError(
            f"sequence axis {axis} has length {x.shape[axis] if x.ndim else None}, layout expects {layout.l}"
        )


def tile(layout: TileLayout, x: np.ndarray, axis: int = -2) -> np.ndarray:
    """Permute the sequence axis (``[batch, heads, seq, dim]`` by default) into tile order."""
    _check_seq(layout, x, axis)
    return np.take(x, layout.tile_perm, axis=axis)


def untile(layout: TileLayout, x: np.ndarray, axis: int = -2) -> np.ndarray:
    _check_seq(layout, x, axis)
    return np.take(x, layout.untile_perm, axis=axis)


def parse_dims(text: str) -> tuple[int, int, int]:
    """Parse ``"16x32x32"`` into a 3-tuple."""
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 3:
        raise ValueError(f"expected TxHxW, got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]
