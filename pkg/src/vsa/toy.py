"""Planted-cube toy task: one sparse attention layer trained with manual gradients.

Every sample hides its own set of "planted" cubes. Tokens in them carry a
shared key signature in a few hidden dimensions; every query token must
output the mean content of all planted tokens plus its own content. A
residual path supplies the own-content term, so the attention has to find
the planted cubes to solve the task.

Hidden layout per token: ``[content (content_dim) | signature (sig_dim) | 1]``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import SparsitySchedule, block_coverage, fixed_pattern_mask
from .coarse import BlockSelection
from .dense import dense_backward, dense_forward
from .op import VsaParams, vsa_backward, vsa_forward
from .tiling import TileLayout

log = logging.getLogger(__name__)

MODES = ("vsa", "dense", "random", "spatial_temporal", "strided_window", "local")


@dataclass(frozen=True)
class PlantedTask:
    layout: TileLayout = field(default_factory=lambda: TileLayout(8, 8, 8, 2, 2, 2))
    n_planted: int = 4
    signal_scale: float = 1.0
    noise_scale: float = 0.1
    seed: int = 0
    content_dim: int = 8
    sig_dim: int = 4

    def __post_init__(self):
        if not 1 <= self.n_planted <= self.layout.num_cubes:
            raise ValueError("n_planted must be in [1, num_cubes]")
        if self.sig_dim > self.content_dim:
            raise ValueError("sig_dim must not exceed content_dim")

    @property
    def model_dim(self) -> int:
        return self.content_dim + self.sig_dim + 1

    @property
    def signature(self) -> np.ndarray:
        u = np.random.default_rng(self.seed).standard_normal(self.sig_dim)
        return u / np.linalg.norm(u)


@dataclass
class ToyBatch:
    hidden: np.ndarray  # [b, L, model_dim], tile order
    q: np.ndarray  # reference projections [b, 1, L, content_dim]
    k: np.ndarray
    v: np.ndarray
    target: np.ndarray  # [b, L, content_dim]
    planted: np.ndarray  # [b, n_planted] sorted cube indices


def reference_weights(task: PlantedTask, sharpness: float = 8.0) -> dict[str, np.ndarray]:
    """Projections that solve the task: queries and planted keys align on the signature."""
    d, s = task.content_dim, task.sig_dim
    wq = np.zeros((task.model_dim, d))
    wk = np.zeros((task.model_dim, d))
    wv = np.zeros((task.model_dim, d))
    wv[:d, :d] = np.eye(d)
    wk[d : d + s, :s] = np.eye(s) * sharpness
    wq[-1, :s] = task.signature * sharpness
    return {"wq": wq, "wk": wk, "wv": wv}


def planted_target(content: np.ndarray, planted: np.ndarray, layout: TileLayout) -> np.ndarray:
    """Mean content of all planted tokens, plus each token's own content."""
    b, _, d = content.shape
    cubes = content.reshape(b, layout.num_cubes, layout.b, d)
    picked = np.take_along_axis(cubes, planted[:, :, None, None], axis=1)
    return picked.reshape(b, -1, d).mean(axis=1)[:, None, :] + content


def generate_batch(task: PlantedTask, batch_size: int, seed: int) -> ToyBatch:
    rng = np.random.default_rng([task.seed, seed])
    lay = task.layout
    c = lay.num_cubes
    planted = np.sort(np.argsort(rng.random((batch_size, c)), axis=1)[:, : task.n_planted], axis=1)
    content = rng.standard_normal((batch_size, lay.l, task.content_dim))
    is_planted = np.zeros((batch_size, c), dtype=bool)
    np.put_along_axis(is_planted, planted, True, axis=1)
    tok_planted = np.repeat(is_planted, lay.b, axis=1)
    sig = tok_planted[:, :, None] * (task.signal_scale * task.signature)
    sig = sig + task.noise_scale * rng.standard_normal((batch_size, lay.l, task.sig_dim))
    hidden = np.concatenate([content, sig, np.ones((batch_size, lay.l, 1))], axis=2)
    ref = reference_weights(task)
    q, k, v = (_heads(hidden @ ref[n], 1) for n in ("wq", "wk", "wv"))
    target = planted_target(content, planted, lay)
    return ToyBatch(hidden, q, k, v, target, planted)


def _heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, l, f = x.shape
    return x.reshape(b, l, heads, f // heads).transpose(0, 2, 1, 3)


def _merge(x: np.ndarray) -> np.ndarray:
    b, h, l, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * d)


@dataclass
class TrainConfig:
    mode: str = "vsa"
    topk: int = 8
    schedule: SparsitySchedule | None = None
    steps: int = 5000
    batch_size: int = 4
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    heads: int = 1
    pool: str = "mean"
    gate_activation: str = "identity"
    adaptation: bool = True
    init_scale: float = 0.5
    seed: int = 0
    eval_batch: int = 16
    fixed_batch: bool = False
    log_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def resolved_schedule(self, task: PlantedTask) -> SparsitySchedule:
        if self.schedule is not None:
            return self.schedule
        if self.mode == "vsa":
            # anneal from full attention to the target
            c = task.layout.num_cubes
            return SparsitySchedule(c, self.topk, 50, 50, max(1, (c - self.topk) // 7))
        return SparsitySchedule.constant(self.topk)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = None if self.schedule is None else asdict(self.schedule)
        return d


class Adam:
    def __init__(self, params: dict, lr, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.wd:
                upd = upd + self.wd * params[k]
            params[k] -= self.lr * upd


class SGD:
    def __init__(self, params: dict, lr, weight_decay=0.0, **_):
        self.lr, self.wd = lr, weight_decay

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            params[k] -= self.lr * (g + self.wd * params[k])


def init_params(task: PlantedTask, cfg: TrainConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 7])
    dm = task.model_dim
    if task.content_dim % cfg.heads:
        raise ValueError("content_dim must be divisible by heads")
    hd = task.content_dim
    std = cfg.init_scale / np.sqrt(dm)
    p = {n: rng.standard_normal((dm, hd)) * std for n in ("wq", "wk", "wv")}
    if cfg.adaptation:
        p["wg"] = np.zeros((dm, 2 * hd))
    else:
        p["wg"] = rng.standard_normal((dm, 2 * hd)) * std
    p["bg"] = np.zeros(2 * hd)
    if not cfg.adaptation:
        p["bg"][hd:] = 1.0
    return p


class ToyModel:
    """Single attention layer: ``pred = Attn(XWq, XWk, XWv) + XWv``."""

    def __init__(self, task: PlantedTask, cfg: TrainConfig, params: dict | None = None):
        self.task, self.cfg = task, cfg
        self.layout = task.layout
        self.params = params if params is not None else init_params(task, cfg)
        self.fixed_selection = None
        self.fixed_mask = None
        if cfg.mode == "random":
            rng = np.random.default_rng([cfg.seed, 11])
            sel = BlockSelection.random(1, cfg.heads, self.layout.num_cubes, cfg.topk, rng)
            self.fixed_selection = sel
        elif cfg.mode in ("spatial_temporal", "strided_window", "local"):
            self.fixed_mask = fixed_pattern_mask(self.layout, cfg.mode)

    @property
    def head_dim(self) -> int:
        return self.task.content_dim // self.cfg.heads

    def vsa_params(self, topk: int) -> VsaParams:
        p = self.params
        return VsaParams(
            p["wg"], p["bg"], self.cfg.heads, self.head_dim, topk,
            pool=self.cfg.pool, gate_activation=self.cfg.gate_activation, adaptation=self.cfg.adaptation,
        )

    def _selection(self, batch: int):
        if self.fixed_selection is None:
            return None
        idx = np.broadcast_to(self.fixed_selection.indices, (batch,) + self.fixed_selection.indices.shape[1:])
        return BlockSelection(idx.copy(), self.layout.num_cubes)

    def forward(self, x: np.ndarray, topk: int):
        p, h = self.params, self.cfg.heads
        q, k, v = (_heads(x @ p[n], h) for n in ("wq", "wk", "wv"))
        cache = {"x": x, "q": q, "k": k, "v": v, "topk": topk}
        if self.cfg.mode == "dense" or self.fixed_mask is not None:
            o, saved = dense_forward(q, k, v, self.fixed_mask)
            cache["saved"] = saved
        else:
            vp = self.vsa_params(topk)
            out = vsa_forward(self.layout, x, q, k, v, vp, topk=topk, selection=self._selection(x.shape[0]))
            cache["out"], cache["vp"] = out, vp
            o = out.o
        pred = _merge(o) + x @ p["wv"]
        return pred, cache

    def backward(self, cache: dict, dpred: np.ndarray) -> dict[str, np.ndarray]:
        x, q, k, v = cache["x"], cache["q"], cache["k"], cache["v"]
        do = _heads(dpred, self.cfg.heads)
        grads = {}
        if "out" in cache:
            g = vsa_backward(self.layout, cache["out"], q, k, v, x, cache["vp"], do)
            dq, dk, dv = g.dq, g.dk, g.dv
            grads["wg"], grads["bg"] = g.dw_gate, g.db_gate
        else:
            dq, dk, dv = dense_backward(q, k, v, self.fixed_mask, do, cache["saved"])
            grads["wg"] = np.zeros_like(self.params["wg"])
            grads["bg"] = np.zeros_like(self.params["bg"])
        xt = x.reshape(-1, x.shape[-1]).T
        grads["wq"] = xt @ _merge(dq).reshape(-1, dq.shape[1] * dq.shape[3])
        grads["wk"] = xt @ _merge(dk).reshape(-1, dk.shape[1] * dk.shape[3])
        grads["wv"] = xt @ (_merge(dv) + dpred).reshape(-1, dpred.shape[-1])
        return grads

    def loss(self, batch: ToyBatch, topk: int):
        pred, cache = self.forward(batch.hidden, topk)
        diff = pred - batch.target
        return float(np.mean(diff**2)), diff, cache

    def recall(self, cache: dict, planted: np.ndarray) -> float:
        """Fraction of planted cubes among the attended key cubes, averaged over query cubes."""
        c = self.layout.num_cubes
        if "out" in cache:
            m = cache["out"].selection.to_block_mask()  # [b, h, C, C]
            hit = np.take_along_axis(m, planted[:, None, None, :], axis=-1)
            return float(hit.mean())
        if self.fixed_mask is not None:
            cov = block_coverage(self.fixed_mask, self.layout)
            return float(cov[:, planted].mean())
        return 1.0 if c else 0.0


@dataclass
class TrainReport:
    mode: str
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    k: list[int] = field(default_factory=list)
    diverged: bool = False
    eval_mse: float = float("nan")
    eval_recall: float = float("nan")
    snapshot_id: str = ""
    params: dict = field(default_factory=dict, repr=False)
    config: dict = field(default_factory=dict)

    @property
    def final_recall(self) -> float:
        return self.eval_recall

    def smoothed_loss(self, window: int = 50) -> np.ndarray:
        x = np.asarray(self.loss)
        if len(x) < window:
            return x.copy()
        return np.convolve(x, np.ones(window) / window, mode="valid")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "recall", "k"])
        for row in zip(self.steps, self.loss, self.recall, self.k):
            w.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "steps_run": len(self.steps),
            "diverged": self.diverged,
            "final_loss": self.loss[-1] if self.loss else None,
            "final_recall": self.recall[-1] if self.recall else None,
            "eval_mse": self.eval_mse,
            "eval_recall": self.eval_recall,
            "snapshot_id": self.snapshot_id,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2, default=str)


def snapshot_id(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()[:16]


def train_toy(task: PlantedTask, cfg: TrainConfig, steps: int | None = None) -> TrainReport:
    steps = cfg.steps if steps is None else steps
    sched = cfg.resolved_schedule(task)
    if sched.k_target < task.n_planted and cfg.mode == "vsa":
        log.warning("k_target=%d is below the planted cube count %d", sched.k_target, task.n_planted)
    model = ToyModel(task, cfg)
    opt_cls = Adam if cfg.optimizer == "adam" else SGD
    opt = opt_cls(model.params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    report = TrainReport(cfg.mode, config={"task": _task_dict(task), "train": cfg.to_dict()})
    for step in range(steps):
        kk = min(sched(step), task.layout.num_cubes)
        batch = generate_batch(task, cfg.batch_size, seed=1 if cfg.fixed_batch else step + 1)
        loss, diff, cache = model.loss(batch, kk)
        if not np.isfinite(loss):
            report.diverged = True
            log.error("loss became non-finite at step %d; aborting", step)
            break
        n_out = diff.size
        grads = model.backward(cache, 2.0 * diff / n_out)
        report.steps.append(step)
        report.loss.append(loss)
        report.recall.append(model.recall(cache, batch.planted))
        report.k.append(kk)
        opt.step(model.params, grads)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d k=%d loss=%.5f recall=%.3f", step, kk, loss, report.recall[-1])
    if not report.diverged:
        ev = generate_batch(task, cfg.eval_batch, seed=-1 % 2**31)
        kk = min(sched(steps), task.layout.num_cubes)
        mse, _, cache = model.loss(ev, kk)
        report.eval_mse = mse
        report.eval_recall = model.recall(cache, ev.planted)
    report.params = {k: v.copy() for k, v in model.params.items()}
    report.snapshot_id = snapshot_id(report.params)
    return report


def _task_dict(task: PlantedTask) -> dict:
    d = asdict(task)
    d["layout"] = {"video": list(task.layout.video_shape), "cube": list(task.layout.cube_shape)}
    return d
