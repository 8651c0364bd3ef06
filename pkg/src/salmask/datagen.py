"""Synthetic desk-scale corpus: 10 classes of shapes on textured backgrounds.

Class k encodes shape k // 2 (disk, box, triangle, ring, cross) and colour
family k % 2 (0 = warm, red-dominant; 1 = cool, blue-dominant). Each image
places one anti-aliased foreground object on a near-gray background carrying
a gradient, block texture, and pixel noise, so frequency-based masking has
content to act on while the object still dominates colour statistics.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Dataset, ImageRecord, save_dataset
from .rng import Rng

SHAPES = ("disk", "box", "triangle", "ring", "cross")
CLASS_COUNT = 10


def _rot(y, x, theta):
    c, s = np.cos(theta), np.sin(theta)
    return c * y - s * x, s * y + c * x


def _box_sdf(y, x, hy, hx):
    qy = np.abs(y) - hy
    qx = np.abs(x) - hx
    outside = np.hypot(np.maximum(qy, 0.0), np.maximum(qx, 0.0))
    inside = np.minimum(np.maximum(qy, qx), 0.0)
    return outside + inside


def _shape_sdf(shape: str, y, x, r: float, theta: float):
    if shape == "disk":
        return np.hypot(y, x) - r
    y, x = _rot(y, x, theta)
    if shape == "box":
        return _box_sdf(y, x, 0.82 * r, 0.82 * r)
    if shape == "triangle":
        # equilateral, circumradius r: convex polygon sdf = max of edge planes
        verts = [(r * np.sin(2 * np.pi * k / 3), r * np.cos(2 * np.pi * k / 3))
                 for k in range(3)]
        d = None
        for k in range(3):
            ay, ax = verts[k]
            by, bx = verts[(k + 1) % 3]
            ny, nx = bx - ax, -(by - ay)
            norm = np.hypot(ny, nx)
            plane = ((y - ay) * ny + (x - ax) * nx) / norm
            d = plane if d is None else np.maximum(d, plane)
        return d
    if shape == "ring":
        return np.abs(np.hypot(y, x) - 0.78 * r) - 0.30 * r
    if shape == "cross":
        arm = _box_sdf(y, x, r, 0.32 * r)
        return np.minimum(arm, _box_sdf(x, y, r, 0.32 * r))
    raise ValueError(f"unknown shape {shape!r}")


def generate_image(rng: Rng, side: int, klass: int) -> np.ndarray:
    """Render one u8 side x side x 3 image of class ``klass``."""
    if not 0 <= klass < CLASS_COUNT:
        raise ValueError(f"class {klass} out of range")
    shape = SHAPES[klass // 2]
    warm = klass % 2 == 0

    yy, xx = np.meshgrid(np.arange(side, dtype=np.float64) + 0.5,
                         np.arange(side, dtype=np.float64) + 0.5, indexing="ij")
    u = yy / side - 0.5
    v = xx / side - 0.5

    # background: gray base, shared gradient and block texture, mild tint
    base = rng.uniform(0.28, 0.55)
    ang = rng.uniform(0.0, 2 * np.pi)
    grad = rng.uniform(0.06, 0.18) * (np.cos(ang) * u + np.sin(ang) * v) * 2.0
    cells = np.array([[rng.uniform(-1.0, 1.0) for _ in range(4)] for _ in range(4)])
    block = _upsample_cells(cells, side) * rng.uniform(0.03, 0.09)
    bg = np.empty((side, side, 3), dtype=np.float64)
    for ch in range(3):
        bg[:, :, ch] = base + grad + block + rng.uniform(-0.02, 0.02)

    # foreground object
    cy = side * (0.5 + rng.uniform(-0.16, 0.16))
    cx = side * (0.5 + rng.uniform(-0.16, 0.16))
    r = side * rng.uniform(0.20, 0.32)
    theta = rng.uniform(0.0, 2 * np.pi)
    sdf = _shape_sdf(shape, yy - cy, xx - cx, r, theta)
    cover = np.clip(0.5 - sdf, 0.0, 1.0)

    hi = rng.uniform(0.68, 0.98)
    mid = rng.uniform(0.12, 0.52)
    lo = rng.uniform(0.02, 0.26)
    color = np.array([hi, mid, lo]) if warm else np.array([lo, mid, hi])
    shade_ang = rng.uniform(0.0, 2 * np.pi)
    shade = rng.uniform(0.0, 0.12) * (np.cos(shade_ang) * u + np.sin(shade_ang) * v) * 2.0
    fg = color[None, None, :] + shade[:, :, None]

    img = bg * (1.0 - cover[:, :, None]) + fg * cover[:, :, None]
    img += rng.normal(0.015, (side, side, 3)).astype(np.float64)
    return np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def _upsample_cells(cells: np.ndarray, side: int) -> np.ndarray:
    """Bilinear-stretch a small value grid to side x side (texture helper)."""
    n = cells.shape[0]
    pos = (np.arange(side, dtype=np.float64) + 0.5) * (n / side) - 0.5
    i0 = np.clip(np.floor(pos), 0, n - 1).astype(np.int64)
    i1 = np.clip(np.floor(pos) + 1, 0, n - 1).astype(np.int64)
    t = pos - np.floor(pos)
    top = cells[np.ix_(i0, i0)] * np.outer(1 - t, 1 - t) \
        + cells[np.ix_(i0, i1)] * np.outer(1 - t, t)
    bot = cells[np.ix_(i1, i0)] * np.outer(t, 1 - t) \
        + cells[np.ix_(i1, i1)] * np.outer(t, t)
    return top + bot


def build_split(split: str, count: int, side: int, seed: int) -> Dataset:
    """Round-robin class assignment keeps the split exactly balanced."""
    stream = {"train": 11, "val": 12}.get(split, 13)
    root_rng = Rng(seed, stream)
    records = []
    for i in range(count):
        klass = i % CLASS_COUNT
        img = generate_image(root_rng.fold_in(i), side, klass)
        records.append(ImageRecord(pixels=img.astype(np.float32) / 255.0,
                                   id=f"{split}-{i:05d}", label=klass))
    return Dataset(records=records, class_count=CLASS_COUNT, split=split)


def make_corpus(root, side: int = 32, train_count: int = 5000,
                val_count: int = 1000, seed: int = 0) -> None:
    root = Path(root)
    for split, count in (("train", train_count), ("val", val_count)):
        ds = build_split(split, count, side, seed)
        save_dataset(ds, root / split)
