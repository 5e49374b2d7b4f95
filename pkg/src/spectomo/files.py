"""Run-directory artifacts: raw float arrays, previews, and CSV logs.

Binary arrays are raw little-endian float32 in row-major order; dimensions
live in the run's JSON metadata, never in the files.
"""

from __future__ import annotations

import csv
import os

import numpy as np

ITERATION_COLUMNS = [
    "outer_iter", "cost", "grad_norm", "rmse", "wall_time_s",
    "row_accesses", "cg_iters", "sum_block_scores", "lambda_ridge",
]


def write_raw(path, array):
    np.asarray(array, dtype="<f4").ravel().tofile(path)


def read_raw(path, shape=None):
    data = np.fromfile(path, dtype="<f4").astype(np.float64)
    return data if shape is None else data.reshape(shape)


def write_pgm(path, image, lo=None, hi=None):
    """8-bit binary PGM with an explicit display window; returns (lo, hi)."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("PGM preview expects a 2-D image")
    lo = float(image.min()) if lo is None else float(lo)
    hi = float(image.max()) if hi is None else float(hi)
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((image - lo) / span * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())
    return lo, hi


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_iterations_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ITERATION_COLUMNS)
        for r in records:
            writer.writerow([
                r.outer_iter, _fmt(r.cost), _fmt(r.grad_norm), _fmt(r.rmse),
                _fmt(r.wall_time_s), r.row_accesses, r.cg_iters,
                _fmt(r.sum_block_scores), _fmt(r.lambda_ridge),
            ])


def read_iterations_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            parsed = {}
            for key, value in row.items():
                if value == "" or value is None:
                    parsed[key] = None
                else:
                    parsed[key] = float(value)
            rows.append(parsed)
    return rows


def write_sampling_csv(path, records):
    """Per-iteration sketch log: draw count and the sampled-view histogram."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["outer_iter", "s_blocks", "view", "draws"])
        for r in records:
            if not r.sampled_views:
                continue
            for view in sorted(r.sampled_views):
                writer.writerow([r.outer_iter, r.s_blocks, view,
                                 r.sampled_views[view]])


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
