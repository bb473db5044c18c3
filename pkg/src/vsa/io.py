"""Atomic file output and SVG heatmaps."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write(path, data: str | bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": ""})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    return str(x)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_npz(path, arrays: dict) -> Path:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return atomic_write(path, buf.getvalue())


def heatmap_svg(grid: np.ndarray, cell: int = 6, title: str = "") -> str:
    """Boolean ``[rows, cols]`` grid as SVG, selected cells filled."""
    rows, cols = grid.shape
    pad = 16 if title else 0
    w, h = cols * cell, rows * cell + pad
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="{pad}" width="{w}" height="{rows * cell}" fill="#ffffff" stroke="#999999"/>',
    ]
    if title:
        out.append(f'<text x="2" y="12" font-family="monospace" font-size="11">{title}</text>')
    for i, j in zip(*np.nonzero(grid)):
        out.append(f'<rect class="sel" x="{j * cell}" y="{pad + i * cell}" width="{cell}" height="{cell}" fill="#1f4e9c"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
