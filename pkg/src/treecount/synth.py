"""Synthetic aerial scenes: shaded disc "trees" on cluttered backgrounds."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .data import AnnotatedImage, save_image, write_manifest, write_points

GROUND = np.array([
    [0.45, 0.55, 0.30],  # grass
    [0.55, 0.47, 0.36],  # soil
    [0.62, 0.62, 0.60],  # pavement
    [0.50, 0.52, 0.40],  # scrub
])


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.random((6, 6, len(GROUND)))
    coarse /= coarse.sum(-1, keepdims=True)
    weights = zoom(coarse, (size / 6, size / 6, 1), order=1)[:size, :size]
    img = weights @ GROUND
    # a few rooftops / roads as clutter
    for _ in range(int(rng.integers(0, 4))):
        h, w = rng.integers(size // 16, size // 4, size=2)
        r, c = rng.integers(0, size - h), rng.integers(0, size - w)
        img[r:r + h, c:c + w] = rng.uniform(0.55, 0.85) * np.array([1.0, 0.97, 0.95])
    return img


def render_scene(size: int, n_trees: int, rng: np.random.Generator,
                 radius_range: tuple[float, float] = (3.5, 7.0)):
    """One image and its exact tree centers (x, y)."""
    img = _background(size, rng)
    scale = size / 256
    pts = np.round(rng.uniform(0, size - 1, size=(n_trees, 2)), 3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for x, y in pts:
        R = rng.uniform(*radius_range) * max(scale, 0.5)
        color = np.array([rng.uniform(0.08, 0.22), rng.uniform(0.28, 0.45), rng.uniform(0.08, 0.2)])
        r0, r1 = max(int(y - R) - 2, 0), min(int(y + R) + 3, size)
        c0, c1 = max(int(x - R) - 2, 0), min(int(x + R) + 3, size)
        d2 = (yy[r0:r1, c0:c1] - y) ** 2 + (xx[r0:r1, c0:c1] - x) ** 2
        d = np.sqrt(d2)
        alpha = np.clip(R - d + 0.5, 0.0, 1.0)[..., None]
        shade = (0.7 + 0.5 * np.clip(1 - d2 / (R * R), 0, 1))[..., None]
        img[r0:r1, c0:c1] = (1 - alpha) * img[r0:r1, c0:c1] + alpha * color * shade
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), pts


def synth_images(n: int, size: int, density_range: tuple[int, int], seed: int,
                 prefix: str = "img") -> list[AnnotatedImage]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if size % 32:
        raise ValueError(f"size {size} must be divisible by 32")
    lo, hi = density_range
    if lo < 0 or hi < lo:
        raise ValueError(f"bad density range {density_range}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = int(rng.integers(lo, hi + 1))
        pixels, pts = render_scene(size, k, rng)
        out.append(AnnotatedImage(f"{prefix}{i:04d}", pixels, pts, True))
    return out


def synth(out_dir: str | Path, n: int, size: int, density_range: tuple[int, int] = (5, 40),
          seed: int = 0, prefix: str = "img", unlabeled_every: int = 0) -> Path:
    """Write images, annotations and ``manifest.csv`` under ``out_dir``.

    With ``unlabeled_every=k > 0`` every k-th image is marked unlabeled in the
    manifest (its annotation file is still written for evaluation).
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "points").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write to {out_dir}: {e}") from e
    rows = []
    for i, img in enumerate(synth_images(n, size, density_range, seed, prefix)):
        ipath = Path("images") / f"{img.id}.png"
        ppath = Path("points") / f"{img.id}.txt"
        save_image(out_dir / ipath, img.pixels)
        write_points(out_dir / ppath, img.points)
        labeled = not (unlabeled_every and i % unlabeled_every == unlabeled_every - 1)
        rows.append({"id": img.id, "image_path": ipath, "labeled": labeled,
                     "annotation_path": ppath if labeled else ""})
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
