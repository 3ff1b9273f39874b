"""Manifest/annotation parsing, ground-truth density maps, augmentation, splits."""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image

from . import kernels

MANIFEST_FIELDS = ("id", "image_path", "labeled", "annotation_path")
DEFAULT_SIGMA = 4.0


class DataError(ValueError):
    pass


class TreePoint(NamedTuple):
    x: float  # column, 0-based
    y: float  # row, 0-based


@dataclass
class AnnotatedImage:
    id: str
    pixels: np.ndarray  # H x W x 3 in [0, 1]
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # (n, 2) as (x, y)
    is_labeled: bool = True
    gsd: float | None = None

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DataError(f"density map must be 2-D, got shape {self.values.shape}")

    @property
    def count(self) -> float:
        return float(self.values.sum(dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class DatasetSplit:
    labeled: list[str]
    unlabeled: list[str]
    seed: int


# -- manifest / annotations -------------------------------------------------

def _parse_flag(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "y", "labeled"):
        return True
    if s in ("0", "false", "no", "n", "unlabeled", ""):
        return False
    raise DataError(f"bad labeled flag {s!r}")


def read_points(path: str | os.PathLike) -> np.ndarray:
    pts = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                x, y = (float(v) for v in line.split(","))
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected 'x,y', got {line!r}") from None
            pts.append((x, y))
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def write_points(path: str | os.PathLike, points: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for x, y in np.asarray(points).reshape(-1, 2):
            f.write(f"{x:.3f},{y:.3f}\n")


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path: str | os.PathLike, pixels: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_manifest(manifest_path: str | os.PathLike) -> list[dict]:
    """Rows of the manifest with paths resolved against its directory."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    rows = []
    with open(manifest_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = {"id", "image_path", "labeled"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"manifest {manifest_path} lacks columns {sorted(missing)}")
        for row in reader:
            ann = (row.get("annotation_path") or "").strip()
            rows.append({
                "id": row["id"].strip(),
                "image_path": root / row["image_path"].strip(),
                "labeled": _parse_flag(row["labeled"]),
                "annotation_path": root / ann if ann else None,
            })
    return rows


def write_manifest(manifest_path: str | os.PathLike, rows: Sequence[dict]) -> None:
    with open(manifest_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({
                "id": r["id"],
                "image_path": str(r["image_path"]),
                "labeled": int(bool(r["labeled"])),
                "annotation_path": str(r.get("annotation_path") or ""),
            })


def check_points(image_id: str, points: np.ndarray, h: int, w: int) -> None:
    for x, y in points:
        if not (0 <= x < w and 0 <= y < h):
            raise DataError(f"image {image_id}: point ({x}, {y}) outside {w}x{h}")


def parse_annotations(manifest_path: str | os.PathLike) -> list[AnnotatedImage]:
    images = []
    for row in read_manifest(manifest_path):
        if not row["image_path"].is_file():
            raise DataError(f"image {row['id']}: missing file {row['image_path']}")
        pixels = load_image(row["image_path"])
        h, w = pixels.shape[:2]
        points = np.zeros((0, 2))
        if row["labeled"]:
            if row["annotation_path"] is None:
                raise DataError(f"image {row['id']}: labeled but no annotation_path")
            if not row["annotation_path"].is_file():
                raise DataError(f"image {row['id']}: missing annotation file {row['annotation_path']}")
            points = read_points(row["annotation_path"])
            check_points(row["id"], points, h, w)
        images.append(AnnotatedImage(row["id"], pixels, points, row["labeled"]))
    return images


# -- density maps -------------------------------------------------------------

def generate_density_map(points, h: int, w: int, sigma: float = DEFAULT_SIGMA) -> DensityMap:
    """Sum of unit-mass Gaussians, each renormalized after truncation at the border."""
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    if h < 1 or w < 1:
        raise DataError(f"bad map size {h}x{w}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    check_points("<points>", pts, h, w)
    return DensityMap(kernels.gaussian_density(pts[:, 0], pts[:, 1], h, w, sigma))


def downsample_density(d: DensityMap, factor: int) -> DensityMap:
    h, w = d.shape
    if factor < 1 or h % factor or w % factor:
        raise DataError(f"factor {factor} does not divide {h}x{w}")
    if factor == 1:
        return DensityMap(d.values.copy())
    v = d.values.reshape(h // factor, factor, w // factor, factor)
    return DensityMap(v.sum(axis=(1, 3)))


def save_density(path: str | os.PathLike, d: DensityMap | np.ndarray) -> None:
    v = d.values if isinstance(d, DensityMap) else np.asarray(d)
    h, w = v.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_density(path: str | os.PathLike) -> DensityMap:
    with open(path, "rb") as f:
        h, w = struct.unpack("<II", f.read(8))
        payload = f.read()
    if len(payload) != 4 * h * w:
        raise DataError(f"{path}: expected {4 * h * w} payload bytes, found {len(payload)}")
    return DensityMap(np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32))


# -- augmentation / splits ----------------------------------------------------

def augment(img: AnnotatedImage, crop: int, seed: int | None = None,
            origin: tuple[int, int] | None = None, flip: bool | None = None) -> AnnotatedImage:
    """Random crop x crop window plus horizontal flip with probability 0.5.

    ``origin`` (row, col) and ``flip`` override the random draws. Points that
    fall outside the window are dropped.
    """
    h, w = img.height, img.width
    if crop > min(h, w):
        raise DataError(f"crop {crop} larger than image {h}x{w}")
    rng = np.random.default_rng(seed)
    r0 = int(rng.integers(0, h - crop + 1))
    c0 = int(rng.integers(0, w - crop + 1))
    do_flip = bool(rng.random() < 0.5)
    if origin is not None:
        r0, c0 = origin
    if flip is not None:
        do_flip = flip

    pixels = img.pixels[r0:r0 + crop, c0:c0 + crop]
    pts = np.asarray(img.points, dtype=np.float64).reshape(-1, 2) - (c0, r0)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < crop) & (pts[:, 1] >= 0) & (pts[:, 1] < crop)
    pts = pts[inside]
    if do_flip:
        pixels = pixels[:, ::-1]
        pts = pts.copy()
        # pixel centers sit on integer coordinates; keep (crop-1, crop) inside
        pts[:, 0] = np.maximum(crop - 1 - pts[:, 0], 0.0)
    return AnnotatedImage(img.id, np.ascontiguousarray(pixels), pts, img.is_labeled, img.gsd)


def split_dataset(ids: Sequence[str], labeled_fraction: float, seed: int) -> DatasetSplit:
    ids = [i.id if isinstance(i, AnnotatedImage) else str(i) for i in ids]
    if not ids:
        raise DataError("cannot split an empty manifest")
    if not 0 < labeled_fraction <= 1:
        raise DataError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    n_lab = max(1, int(math.floor(labeled_fraction * len(ids) + 1e-9)))
    order = np.random.default_rng(seed).permutation(len(ids))
    labeled = [ids[i] for i in sorted(order[:n_lab])]
    unlabeled = [ids[i] for i in sorted(order[n_lab:])]
    return DatasetSplit(labeled, unlabeled, seed)
