"""``vsa`` command line: verify, bench, train-toy, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import io as vio
from .analysis import SparsitySchedule, dense_cube_mass, selection_accuracy
from .coarse import BlockSelection, coarse_forward_select
from .dense import dense_forward
from .fine import fine_forward
from .tiling import TileLayout, parse_dims
from .toy import PlantedTask, TrainConfig, generate_batch, train_toy

log = logging.getLogger("vsa")

PRECISIONS = {"f32": np.float32, "single": np.float32, "f64": np.float64, "double": np.float64}


@dataclass
class RunConfig:
    layout: tuple = (8, 8, 8)
    cube: tuple = (2, 2, 2)
    k: int = 8
    heads: int = 2
    head_dim: int = 16
    batch: int = 1
    precision: str = "f32"
    seed: int = 0
    threads: int = 1
    out: str = "runs"

    def __post_init__(self):
        self.layout = tuple(int(x) for x in self.layout)
        self.cube = tuple(int(x) for x in self.cube)
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        self.tile_layout()  # validates divisibility

    def tile_layout(self) -> TileLayout:
        return TileLayout.from_shapes(self.layout, self.cube)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


# per-command defaults, below the config file and the flags
COMMAND_DEFAULTS = {
    "verify": {},
    "bench": {"layout": (16, 32, 32), "cube": (4, 4, 4), "k": 32, "heads": 1, "head_dim": 64},
    "train-toy": {"heads": 1, "head_dim": 8},
    "inspect": {"heads": 2, "head_dim": 16},
}

CONFIG_FLAGS = ("layout", "cube", "k", "heads", "head_dim", "batch", "precision", "seed", "threads", "out")


def resolve_config(args) -> RunConfig:
    values = dict(COMMAND_DEFAULTS.get(args.command, {}))
    if args.config:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        known = {f.name for f in fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        values.update(data)
    for name in CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    for dims in ("layout", "cube"):
        if isinstance(values.get(dims), str):
            values[dims] = parse_dims(values[dims])
    return RunConfig(**values)


def _threads(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _out_dir(cfg: RunConfig, command: str) -> Path:
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    vio.write_json(d / f"{command}.config.json", asdict(cfg))
    return d


# commands ----------------------------------------------------------------------


def cmd_verify(cfg: RunConfig, args) -> int:
    from .verify import run_checks

    out = _out_dir(cfg, "verify")
    checks = run_checks(
        cfg.tile_layout(), cfg.k, cfg.heads, cfg.head_dim, cfg.batch, cfg.dtype, cfg.seed,
        inject_fault=args.inject_fault,
    )
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.value:.3e} < {c.tol:.0e}")
    rows = [[c.name, repr(c.value), repr(c.tol), int(c.passed)] for c in checks]
    vio.atomic_write(out / "verify.csv", vio.csv_text(["check", "value", "tol", "passed"], rows))
    ok = all(c.passed for c in checks)
    print("all checks passed" if ok else "verification FAILED")
    return 0 if ok else 1


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def bench_row(layout: TileLayout, k: int, heads: int, head_dim: int, batch: int, dtype, seed: int, repeats: int):
    rng = np.random.default_rng(seed)
    shape = (batch, heads, layout.l, head_dim)
    q, kk, v = (rng.standard_normal(shape).astype(dtype) for _ in range(3))
    dense_ms = _median_ms(lambda: dense_forward(q, kk, v), repeats)
    art = coarse_forward_select(layout, q, kk, v, k)
    coarse_ms = _median_ms(lambda: coarse_forward_select(layout, q, kk, v, k), repeats)
    fine_ms = _median_ms(lambda: fine_forward(layout, q, kk, v, art.selection), repeats)
    density = k * layout.b / layout.l
    return {
        "seq_len": layout.l,
        "density": density,
        "dense_ms": dense_ms,
        "coarse_ms": coarse_ms,
        "fine_ms": fine_ms,
        "speedup": dense_ms / (coarse_ms + fine_ms),
    }


BENCH_COLUMNS = ["seq_len", "density", "dense_ms", "coarse_ms", "fine_ms", "speedup"]


def cmd_bench(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "bench")
    layout = cfg.tile_layout()
    ks = [int(x) for x in args.sweep_k.split(",")] if args.sweep_k else [cfg.k]
    rows = []
    for k in ks:
        r = bench_row(layout, k, cfg.heads, cfg.head_dim, cfg.batch, cfg.dtype, cfg.seed, args.repeats)
        share = r["coarse_ms"] / (r["coarse_ms"] + r["fine_ms"])
        print(
            f"L={r['seq_len']} density={r['density']:.4f} dense={r['dense_ms']:.1f}ms "
            f"coarse={r['coarse_ms']:.1f}ms fine={r['fine_ms']:.1f}ms speedup={r['speedup']:.2f}x "
            f"coarse share={share:.1%}"
        )
        rows.append(r)
    text = vio.csv_text(BENCH_COLUMNS, [[repr(r[c]) if isinstance(r[c], float) else r[c] for c in BENCH_COLUMNS] for r in rows])
    vio.atomic_write(out / "bench.csv", text)
    return 0


PATTERN_MODES = {"vsa", "dense", "random", "spatial_temporal", "strided_window", "local"}


def cmd_train_toy(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "train-toy")
    task = PlantedTask(layout=cfg.tile_layout(), n_planted=args.planted, seed=cfg.seed, content_dim=cfg.heads * cfg.head_dim)
    mode = args.pattern or "vsa"
    if mode not in PATTERN_MODES:
        raise SystemExit(f"unknown --pattern {mode!r}; choose from {sorted(PATTERN_MODES)}")
    sched = SparsitySchedule.parse(args.schedule) if args.schedule else None
    tcfg = TrainConfig(
        mode=mode, topk=cfg.k, schedule=sched, steps=args.steps, batch_size=cfg.batch,
        lr=args.lr, heads=cfg.heads, seed=cfg.seed, log_every=args.log_every,
    )
    report = train_toy(task, tcfg)
    stem = f"train_{mode}"
    vio.atomic_write(out / f"{stem}.csv", report.to_csv())
    vio.atomic_write(out / f"{stem}.json", report.to_json() + "\n")
    meta = json.dumps(report.config, sort_keys=True, default=str)
    vio.write_npz(out / f"{stem}.npz", {**report.params, "config": np.array(meta)})
    print(
        f"{mode}: steps={len(report.steps)} eval_mse={report.eval_mse:.5f} "
        f"eval_recall={report.eval_recall:.3f} snapshot={report.snapshot_id}"
    )
    return 2 if report.diverged else 0


def load_checkpoint(path):
    """Rebuild ``(task, TrainConfig, params)`` from a ``train-toy`` checkpoint."""
    with np.load(path) as z:
        meta = json.loads(str(z["config"]))
        params = {k: z[k].copy() for k in z.files if k != "config"}
    t = dict(meta["task"])
    lay = t.pop("layout")
    task = PlantedTask(layout=TileLayout.from_shapes(tuple(lay["video"]), tuple(lay["cube"])), **t)
    tr = dict(meta["train"])
    if tr.get("schedule"):
        tr["schedule"] = SparsitySchedule(**tr["schedule"])
    tr["betas"] = tuple(tr["betas"])
    return task, TrainConfig(**tr), params


def cmd_inspect(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "inspect")
    if args.checkpoint:
        task, tcfg, params = load_checkpoint(args.checkpoint)
        layout = task.layout
        batch = generate_batch(task, 1, seed=cfg.seed + 10_000)
        x = batch.hidden
        q, k, _ = ((x @ params[n]).reshape(1, layout.l, tcfg.heads, -1).transpose(0, 2, 1, 3) for n in ("wq", "wk", "wv"))
        topk = args.k if args.k is not None else tcfg.topk
        extra = {"planted": batch.planted[0].tolist(), "checkpoint": str(args.checkpoint)}
    else:
        layout = cfg.tile_layout()
        rng = np.random.default_rng(cfg.seed)
        shape = (1, cfg.heads, layout.l, cfg.head_dim)
        q, k = (rng.standard_normal(shape) for _ in range(2))
        topk = cfg.k
        extra = {}
    art = coarse_forward_select(layout, q, k, k, topk)
    acc = selection_accuracy(dense_cube_mass(layout, q, k), art.selection, layout)[0]
    grids = art.selection.to_block_mask()[0]
    c = layout.num_cubes
    summary = {"k": topk, "num_cubes": c, "selection_accuracy": acc.tolist(), **extra}
    for h, grid in enumerate(grids):
        rows = [[i] + grid[i].astype(int).tolist() for i in range(c)]
        vio.atomic_write(out / f"selection_head{h}.csv", vio.csv_text(["query_cube"] + [str(j) for j in range(c)], rows))
        vio.atomic_write(out / f"selection_head{h}.svg", vio.heatmap_svg(grid, title=f"head {h}  k={topk}"))
        print(f"head {h}: fill={grid.mean():.4f} selection_accuracy={acc[h]:.4f}")
    vio.write_json(out / "inspect.json", summary)
    return 0


# parser --------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--precision", choices=sorted(PRECISIONS))
    p.add_argument("--out")
    p.add_argument("--k", type=int)
    p.add_argument("--layout", help="TxHxW")
    p.add_argument("--cube", help="CTxCHxCW")
    p.add_argument("--heads", type=int)
    p.add_argument("--head-dim", dest="head_dim", type=int)
    p.add_argument("--batch", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="oracle-equivalence and gradient checks")
    _add_common(p)
    p.add_argument("--inject-fault", action="store_true", help="corrupt the fine-stage selection")

    p = sub.add_parser("bench", help="time dense vs coarse+fine")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--sweep-k", help="comma-separated K values")

    p = sub.add_parser("train-toy", help="train the planted-cube toy")
    _add_common(p)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--planted", type=int, default=4)
    p.add_argument("--schedule", help="start:target:warmup:interval:dec")
    p.add_argument("--pattern", help="vsa | dense | random | spatial_temporal | strided_window | local")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("inspect", help="export block-selection maps")
    _add_common(p)
    p.add_argument("--checkpoint", help="train-toy .npz checkpoint (random Q/K if omitted)")
    return parser


COMMANDS = {"verify": cmd_verify, "bench": cmd_bench, "train-toy": cmd_train_toy, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    with _threads(cfg.threads):
        return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
