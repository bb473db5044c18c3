"""Dense vs coarse+fine wall time across sequence lengths and Top-K."""

import argparse

import numpy as np
from threadpoolctl import threadpool_limits

from vsa.cli import bench_row
from vsa.tiling import TileLayout

LAYOUTS = [(4, 16, 16), (8, 16, 32), (16, 32, 32)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--head-dim", type=int, default=64)
    args = ap.parse_args()

    print("seq_len,k,density,dense_ms,coarse_ms,fine_ms,speedup")
    with threadpool_limits(limits=args.threads):
        for video in LAYOUTS:
            lay = TileLayout.from_shapes(video, (4, 4, 4))
            for k in sorted({max(1, lay.num_cubes // 16), lay.num_cubes // 8, lay.num_cubes // 2}):
                r = bench_row(lay, k, heads=1, head_dim=args.head_dim, batch=1, dtype=np.float32, seed=0, repeats=args.repeats)
                print(f"{r['seq_len']},{k},{r['density']:.4f},{r['dense_ms']:.1f},{r['coarse_ms']:.1f},{r['fine_ms']:.1f},{r['speedup']:.2f}")


if __name__ == "__main__":
    main()
