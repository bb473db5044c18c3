"""Oracle-equivalence and gradient checks at arbitrary shapes (backs ``vsa verify``)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coarse import BlockSelection, coarse_forward_select
from .dense import dense_backward, dense_forward
from .fine import fine_backward, fine_forward
from .op import VsaParams, vsa_backward, vsa_forward
from .tiling import TileLayout

ORACLE_TOL = {np.float32: 1e-5, np.float64: 1e-10}
GRADCHECK_TOL = 1e-5
FD_STEP = 1e-5


@dataclass
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.tol)


def corrupt_selection(sel: BlockSelection) -> BlockSelection:
    """Swap one selected cube of the first row for an unselected one."""
    idx = sel.indices.copy()
    row = idx[0, 0, 0]
    free = np.setdiff1d(np.arange(sel.num_cubes), row)
    if free.size == 0:
        raise ValueError("cannot corrupt a full selection")
    row[-1] = free[0]
    idx[0, 0, 0] = np.sort(row)
    return BlockSelection(idx, sel.num_cubes)


def directional_gradcheck(f, arrays: dict, grads: dict, rng, eps: float = FD_STEP) -> float:
    """Worst relative error of ``<grad, u>`` against a central difference along random ``u``."""
    worst = 0.0
    for name, x in arrays.items():
        u = rng.standard_normal(x.shape)
        analytic = float((grads[name] * u).sum())
        orig = x.copy()
        x += eps * u
        fp = f()
        x[...] = orig - eps * u
        fm = f()
        x[...] = orig
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst


def run_checks(
    layout: TileLayout,
    k: int,
    heads: int = 2,
    head_dim: int = 16,
    batch: int = 1,
    dtype=np.float32,
    seed: int = 0,
    model_dim: int = 16,
    inject_fault: bool = False,
) -> list[Check]:
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype).type
    tol = ORACLE_TOL[dtype]
    shape = (batch, heads, layout.l, head_dim)
    q, kk, v = (rng.standard_normal(shape).astype(dtype) for _ in range(3))
    c = layout.num_cubes
    checks = []

    full = BlockSelection.full(batch, heads, c)
    o_ref, _ = dense_forward(q, kk, v)
    o_full, _ = fine_forward(layout, q, kk, v, full)
    checks.append(Check("fine_forward(all cubes) == dense", float(np.abs(o_full - o_ref).max()), tol))

    sel = BlockSelection.random(batch, heads, c, k, rng)
    used = corrupt_selection(sel) if inject_fault and k < c else sel
    mask = sel.to_dense_mask(layout.b)
    o_m, s_m = dense_forward(q, kk, v, mask)
    o_f, s_f = fine_forward(layout, q, kk, v, used)
    checks.append(Check("fine_forward(random sel) == masked dense", float(np.abs(o_f - o_m).max()), tol))

    do = rng.standard_normal(shape).astype(dtype)
    g_ref = dense_backward(q, kk, v, mask, do, s_m)
    g_fine = fine_backward(layout, q, kk, v, used, do, s_f)
    err = max(float(np.abs(a - b).max()) for a, b in zip(g_ref, g_fine))
    checks.append(Check("fine_backward == masked dense backward", err, tol))

    art = coarse_forward_select(layout, q, kk, v, k)
    checks.append(Check("coarse rows sum to 1", float(np.abs(art.probs.sum(-1) - 1).max()), 1e-6))

    # adaptation equivalence, in the working precision
    hid = rng.standard_normal((batch, layout.l, model_dim)).astype(dtype)
    pa = VsaParams.init(model_dim, heads, head_dim, c, dtype=dtype, adaptation=True)
    out = vsa_forward(layout, hid, q, kk, v, pa)
    checks.append(Check("adaptation forward == dense", float(np.abs(out.o - o_ref).max()), 1e-5))
    ga = vsa_backward(layout, out, q, kk, v, hid, pa, do)
    _, s_ref = dense_forward(q, kk, v)
    gd = dense_backward(q, kk, v, None, do, s_ref)
    err = max(float(np.abs(a - b).max()) for a, b in zip((ga.dq, ga.dk, ga.dv), gd))
    checks.append(Check("adaptation backward == dense", err, 1e-5))

    # gradient check always in double precision
    q64, k64, v64, h64 = (x.astype(np.float64) for x in (q, kk, v, hid))
    p64 = VsaParams.init(model_dim, heads, head_dim, k, rng)

    def loss():
        return 0.5 * float((vsa_forward(layout, h64, q64, k64, v64, p64).o ** 2).sum())

    out = vsa_forward(layout, h64, q64, k64, v64, p64)
    g = vsa_backward(layout, out, q64, k64, v64, h64, p64, out.o)
    arrays = {"Q": q64, "K": k64, "V": v64, "hidden": h64, "W_gate": p64.w_gate}
    grads = {"Q": g.dq, "K": g.dk, "V": g.dv, "hidden": g.dhidden, "W_gate": g.dw_gate}
    checks.append(Check("vsa gradcheck (f64, central diff)", directional_gradcheck(loss, arrays, grads, rng), GRADCHECK_TOL))
    return checks
