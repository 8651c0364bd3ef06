"""Dataset ingestion, deterministic shuffling, and batching.

Two on-disk layouts are accepted for a dataset root:

    root/images/*.ppm  + root/labels.csv     (binary P6, maxval 255)
    root/images.smt1   + root/labels.csv     (N x H x W x 3, u8)

``labels.csv`` is UTF-8 with header ``id,label``, no quoting. In the
packed layout row order matches blob order. Records are sorted by id
after load so iteration order never depends on the filesystem.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import LoadError
from .rng import Rng
from .tensor import read_smt1, write_smt1


@dataclass(frozen=True)
class ImageRecord:
    """One image: pixels H x W x 3 float32 in [0,1], stable id, optional label."""

    pixels: np.ndarray
    id: str
    label: int | None = None


@dataclass(frozen=True)
class Dataset:
    records: list[ImageRecord]
    class_count: int
    split: str

    def __len__(self) -> int:
        return len(self.records)


def read_ppm(path) -> np.ndarray:
    """Decode a binary P6 PPM (maxval 255) to a u8 H x W x 3 array."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] != b"P6":
        raise LoadError(f"{path}: not a binary PPM (P6)")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                nl = blob.find(b"\n", pos)
                pos = len(blob) if nl < 0 else nl + 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token.isdigit():
            raise LoadError(f"{path}: malformed PPM header near byte {start}")
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise LoadError(f"{path}: PPM maxval {maxval}, only 255 is supported")
    pos += 1  # exactly one whitespace byte separates header from pixels
    data = blob[pos:pos + width * height * 3]
    if len(data) != width * height * 3:
        raise LoadError(f"{path}: pixel payload {len(data)} bytes, "
                        f"expected {width * height * 3}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"PPM wants u8 H x W x 3, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(pixels).tobytes())


def center_crop_square(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return image[top:top + side, left:left + side]


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centre sampling and clamped edges."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    ty = (ys - y0f).astype(np.float32)
    tx = (xs - x0f).astype(np.float32)
    y0 = np.clip(y0f, 0, h - 1).astype(np.int64)
    y1 = np.clip(y0f + 1, 0, h - 1).astype(np.int64)
    x0 = np.clip(x0f, 0, w - 1).astype(np.int64)
    x1 = np.clip(x0f + 1, 0, w - 1).astype(np.int64)
    ty = ty[:, None, None] if image.ndim == 3 else ty[:, None]
    tx = tx[None, :, None] if image.ndim == 3 else tx[None, :]
    top = image[y0][:, x0] * (1 - tx) + image[y0][:, x1] * tx
    bot = image[y1][:, x0] * (1 - tx) + image[y1][:, x1] * tx
    return top * (1 - ty) + bot * ty


def _read_labels(path) -> list[tuple[str, int | None]]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"{path}: labels file missing")
    rows: list[tuple[str, int | None]] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["id", "label"]:
            raise LoadError(f"{path}: expected header 'id,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise LoadError(f"{path} row {lineno}: expected 2 fields, got {len(row)}")
            ident, raw = row[0], row[1].strip()
            if raw == "":
                rows.append((ident, None))
                continue
            try:
                label = int(raw)
            except ValueError:
                raise LoadError(f"{path} row {lineno}: label {raw!r} is not an integer") from None
            if label < 0:
                raise LoadError(f"{path} row {lineno}: label {label} out of range")
            rows.append((ident, label))
    return rows


def load_dataset(root, split: str | None = None) -> Dataset:
    """Load a dataset directory; records come back sorted by id."""
    root = Path(root)
    if split is None:
        split = root.name if root.name in ("train", "val") else "train"
    rows = _read_labels(root / "labels.csv")
    records: list[ImageRecord] = []
    blob_path = root / "images.smt1"
    if blob_path.exists():
        blob = read_smt1(blob_path)
        if blob.dtype != np.uint8 or blob.ndim != 4 or blob.shape[3] != 3:
            raise LoadError(f"{blob_path}: want u8 N x H x W x 3, got "
                            f"{blob.dtype} {blob.shape}")
        if len(rows) != blob.shape[0]:
            raise LoadError(f"{root}: labels.csv has {len(rows)} rows but blob "
                            f"holds {blob.shape[0]} images")
        for i, (ident, label) in enumerate(rows):
            pixels = center_crop_square(blob[i]).astype(np.float32) / 255.0
            records.append(ImageRecord(pixels=pixels, id=ident, label=label))
    else:
        files = sorted((root / "images").glob("*.ppm"))
        if not files:
            raise LoadError(f"{root}: no images.smt1 and no images/*.ppm")
        by_id = dict(rows)
        if len(by_id) != len(rows):
            raise LoadError(f"{root}/labels.csv: duplicate id")
        stems = {f.stem for f in files}
        for ident, _ in rows:
            if ident not in stems:
                raise LoadError(f"{root}/labels.csv: id {ident!r} has no image file")
        for f in files:
            pixels = center_crop_square(read_ppm(f)).astype(np.float32) / 255.0
            records.append(ImageRecord(pixels=pixels, id=f.stem, label=by_id.get(f.stem)))
    records.sort(key=lambda r: r.id)
    seen: set[str] = set()
    for rec in records:
        if rec.id in seen:
            raise LoadError(f"{root}: duplicate id {rec.id!r}")
        seen.add(rec.id)
    labels = [r.label for r in records if r.label is not None]
    class_count = max(labels) + 1 if labels else 0
    return Dataset(records=records, class_count=class_count, split=split)


def save_dataset(ds: Dataset, root) -> None:
    """Write the packed layout (images.smt1 + labels.csv) under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stack = np.stack([r.pixels for r in ds.records])
    blob = np.clip(np.rint(stack * 255.0), 0, 255).astype(np.uint8)
    write_smt1(root / "images.smt1", blob)
    with open(root / "labels.csv", "w", newline="", encoding="utf-8") as f:
        f.write("id,label\n")
        for rec in ds.records:
            f.write(f"{rec.id},{'' if rec.label is None else rec.label}\n")


def shuffled_batches(ds: Dataset, batch: int, rng: Rng) -> list[list[int]]:
    """Permute all indices, chunk by ``batch``, drop the short tail."""
    if batch <= 0:
        raise ValueError(f"batch must be positive, got {batch}")
    n = len(ds.records)
    if batch > n:
        raise ValueError(f"batch {batch} exceeds dataset size {n}")
    perm = rng.permutation(n)
    return [perm[i * batch:(i + 1) * batch].tolist() for i in range(n // batch)]


def gather_pixels(ds: Dataset, indices) -> np.ndarray:
    """Stack the selected records into a B x H x W x 3 float32 tensor."""
    return np.stack([ds.records[i].pixels for i in indices]).astype(np.float32)
