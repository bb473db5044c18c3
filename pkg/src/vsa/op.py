"""The gated two-stage sparse attention operator.

``O = Oc * Gc + Of * Gf`` where ``Gc, Gf`` come from one linear projection of
the hidden states, split in half along the feature axis. Top-K selection is a
constant index set for differentiation purposes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coarse import POOL_MODES, BlockSelection, CoarseArtifacts, coarse_backward, coarse_forward_select
from .fine import DEFAULT_TILES_PER_STEP, FineSaved, fine_backward, fine_forward
from .tiling import TileLayout

GATE_ACTIVATIONS = ("identity", "sigmoid")


@dataclass
class VsaParams:
    """Gate projection ``[model_dim, 2*heads*head_dim]`` plus operator configuration.

    In adaptation mode the fine gate is fixed to one and only the coarse half
    of the projection is used.
    """

    w_gate: np.ndarray
    b_gate: np.ndarray | None
    heads: int
    head_dim: int
    topk: int
    pool: str = "mean"
    gate_activation: str = "identity"
    adaptation: bool = False

    def __post_init__(self):
        if self.topk < 1:
            raise ValueError("topk must be at least 1")
        if self.pool not in POOL_MODES:
            raise ValueError(f"unknown pooling mode {self.pool!r}")
        if self.gate_activation not in GATE_ACTIVATIONS:
            raise ValueError(f"unknown gate activation {self.gate_activation!r}")
        out = 2 * self.heads * self.head_dim
        if self.w_gate.ndim != 2 or self.w_gate.shape[1] != out:
            raise ValueError(f"gate weights must be [model_dim, {out}], got {self.w_gate.shape}")
        if self.b_gate is not None and self.b_gate.shape != (out,):
            raise ValueError(f"gate bias must have shape ({out},)")

    @property
    def model_dim(self) -> int:
        return self.w_gate.shape[0]

    @classmethod
    def init(
        cls,
        model_dim: int,
        heads: int,
        head_dim: int,
        topk: int,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
        adaptation: bool = False,
        bias: bool = True,
        **config,
    ) -> "VsaParams":
        """Random gate weights, or the full-attention-equivalent start when ``adaptation``.

        Adaptation zeroes the coarse gate weights; combined with
        ``topk = num_cubes`` the operator then reproduces dense attention.
        """
        out = 2 * heads * head_dim
        if adaptation:
            w = np.zeros((model_dim, out), dtype=dtype)
        else:
            rng = rng or np.random.default_rng()
            w = (rng.standard_normal((model_dim, out)) / np.sqrt(model_dim)).astype(dtype)
        b = np.zeros(out, dtype=dtype) if bias else None
        return cls(w, b, heads, head_dim, topk, adaptation=adaptation, **config)


@dataclass
class VsaOutput:
    o: np.ndarray
    coarse: CoarseArtifacts | None
    fine: FineSaved | None
    gc: np.ndarray | None
    gf: np.ndarray | None
    gate_pre: np.ndarray | None  # [b, L, 2*H*d] before activation
    selection: BlockSelection | None
    extras: dict = field(default_factory=dict)

    @property
    def oc(self) -> np.ndarray:
        return self.coarse.oc

    @property
    def of(self) -> np.ndarray:
        return self.fine.out


@dataclass
class VsaGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dhidden: np.ndarray
    dw_gate: np.ndarray
    db_gate: np.ndarray | None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def compute_gates(hidden: np.ndarray, params: VsaParams):
    """Return ``(gc, gf, pre)``; gates shaped ``[b, heads, L, head_dim]``."""
    if hidden.ndim != 3 or hidden.shape[2] != params.model_dim:
        raise ValueError(f"hidden must be [batch, L, {params.model_dim}], got {hidden.shape}")
    pre = hidden @ params.w_gate
    if params.b_gate is not None:
        pre = pre + params.b_gate
    act = _sigmoid(pre) if params.gate_activation == "sigmoid" else pre
    b, l, _ = hidden.shape
    gates = act.reshape(b, l, 2, params.heads, params.head_dim).transpose(2, 0, 3, 1, 4)
    gc, gf = gates[0], gates[1]
    if params.adaptation:
        gf = np.ones_like(gf)
    return gc, gf, pre


def vsa_forward(
    layout: TileLayout,
    hidden,
    q,
    k,
    v,
    params: VsaParams,
    topk: int | None = None,
    selection: BlockSelection | None = None,
    tiles_per_step: int = DEFAULT_TILES_PER_STEP,
) -> VsaOutput:
    """Forward pass on tile-ordered inputs.

    ``topk`` overrides ``params.topk`` (used by sparsity schedules);
    ``selection`` replaces the learned Top-K with a fixed index set.
    """
    if q.shape[1] != params.heads or q.shape[3] != params.head_dim:
        raise ValueError(f"Q shape {q.shape} does not match {params.heads} heads x {params.head_dim}")
    if hidden.shape[:2] != (q.shape[0], q.shape[2]):
        raise ValueError("hidden batch/sequence does not match Q")
    kk = params.topk if topk is None else topk
    coarse = coarse_forward_select(layout, q, k, v, kk if selection is None else selection.k, params.pool)
    sel = coarse.selection if selection is None else selection
    of, fine = fine_forward(layout, q, k, v, sel, tiles_per_step=tiles_per_step)
    gc, gf, pre = compute_gates(hidden, params)
    o = coarse.oc * gc + of * gf
    if not np.isfinite(o).all():
        raise FloatingPointError("non-finite attention output")
    return VsaOutput(o, coarse, fine, gc, gf, pre, sel)


def vsa_backward(
    layout: TileLayout,
    out: VsaOutput,
    q,
    k,
    v,
    hidden,
    params: VsaParams,
    do,
    tiles_per_step: int = DEFAULT_TILES_PER_STEP,
) -> VsaGrads:
    if out is None or any(x is None for x in (out.coarse, out.fine, out.gc, out.gf, out.gate_pre, out.selection)):
        raise ValueError("forward artifacts missing; run vsa_forward first")
    if do.shape != out.o.shape:
        raise ValueError(f"dO shape {do.shape} != output shape {out.o.shape}")
    cq, ck, cv = coarse_backward(out.coarse, layout, do * out.gc, q, k, v)
    fq, fk, fv = fine_backward(layout, q, k, v, out.selection, do * out.gf, out.fine, tiles_per_step=tiles_per_step)
    dgc = do * out.oc
    dgf = np.zeros_like(dgc) if params.adaptation else do * out.of
    b, _, l, _ = do.shape
    dact = np.stack([dgc, dgf]).transpose(1, 3, 0, 2, 4).reshape(b, l, -1)
    if params.gate_activation == "sigmoid":
        s = _sigmoid(out.gate_pre)
        dpre = dact * s * (1.0 - s)
    else:
        dpre = dact
    dw = np.einsum("bln,blm->nm", hidden, dpre)
    db = dpre.sum(axis=(0, 1)) if params.b_gate is not None else None
    dhidden = dpre @ params.w_gate.T
    return VsaGrads(cq + fq, ck + fk, cv + fv, dhidden, dw, db)
