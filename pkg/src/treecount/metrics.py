"""Count, grid (GAME) and peak-localization metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .data import DensityMap, downsample_density, generate_density_map


@dataclass
class Localization:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        if self.tp + self.fp == 0:
            return 100.0 if self.fn == 0 else 0.0
        return 100.0 * self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        if self.tp + self.fn == 0:
            return 100.0
        return 100.0 * self.tp / (self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class MetricsReport:
    E_MAE: float
    E_RMS: float
    E_R2: float
    E_G0: float
    E_G1: float
    E_G2: float
    E_G3: float
    E_P: float
    E_R: float
    E_F1: float
    N: int
    per_image: list[dict] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_image")
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def count_metrics(est, gt) -> tuple[float, float, float]:
    """(MAE, RMS, R^2); R^2 is NaN when the ground truth is constant."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 1:
        raise ValueError(f"length mismatch: {est.shape} vs {gt.shape}")
    if est.size == 0:
        raise ValueError("no samples")
    err = est - gt
    mae = float(np.abs(err).mean())
    rms = float(np.sqrt((err ** 2).mean()))
    ss_tot = float(((gt - gt.mean()) ** 2).sum())
    r2 = 1.0 - float((err ** 2).sum()) / ss_tot if ss_tot > 0 else math.nan
    return mae, rms, r2


def _values(m) -> np.ndarray:
    return np.asarray(m.values if isinstance(m, DensityMap) else m, dtype=np.float64)


def game(est_map, gt_map, level: int) -> float:
    """Sum over a 2^L x 2^L grid of absolute cell-count differences."""
    est, gt = _values(est_map), _values(gt_map)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {gt.shape}")
    g = 2 ** level
    h, w = est.shape
    if h % g or w % g:
        raise ValueError(f"{h}x{w} map not divisible into a {g}x{g} grid")
    diff = (est - gt).reshape(g, h // g, g, w // g).sum(axis=(1, 3))
    return float(np.abs(diff).sum())


@lru_cache(maxsize=32)
def peak_amplitude(sigma: float, factor: int = 4) -> float:
    """Peak value of one unit-mass Gaussian after block-sum downsampling by ``factor``."""
    size = factor * (int(math.ceil(8 * sigma / factor)) + 2)
    c = factor * (size // factor // 2) + (factor - 1) / 2
    d = generate_density_map([(c, c)], size, size, sigma)
    return float(downsample_density(d, factor).values.max())


def default_peak_threshold(sigma: float, factor: int = 4) -> float:
    return 0.5 * peak_amplitude(sigma, factor)


def default_match_radius(sigma: float, factor: int = 4) -> float:
    return 2.0 * sigma / factor


def points_to_map(points, factor: int) -> np.ndarray:
    """Image-pixel (x, y) -> (row, col) in a map downsampled by ``factor``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    off = (factor - 1) / 2.0
    return np.stack([(pts[:, 1] - off) / factor, (pts[:, 0] - off) / factor], axis=1)


def localization_prf(est_map, gt_points, peak_threshold: float, match_radius: float,
                     factor: int = 1) -> Localization:
    """Match 3x3 local maxima of ``est_map`` to annotated points, nearest first."""
    if peak_threshold < 0 or match_radius < 0:
        raise ValueError("peak_threshold and match_radius must be non-negative")
    peaks = kernels.local_maxima(_values(est_map), peak_threshold)
    pts = points_to_map(gt_points, factor)
    matches = kernels.greedy_match(peaks, pts, match_radius)
    tp = len(matches)
    return Localization(tp=tp, fp=len(peaks) - tp, fn=len(pts) - tp)


def aggregate(est_maps, gt_maps, gt_points, factor: int = 4, sigma: float = 4.0,
              peak_threshold: float | None = None, match_radius: float | None = None,
              ids=None) -> MetricsReport:
    """Full report over paired predicted / ground-truth maps (map resolution)."""
    if len(est_maps) == 0:
        raise ValueError("empty evaluation set")
    if peak_threshold is None:
        peak_threshold = default_peak_threshold(sigma, factor)
    if match_radius is None:
        match_radius = default_match_radius(sigma, factor)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(est_maps))]
    est_c, gt_c, games, rows = [], [], [], []
    tp = fp = fn = 0
    for i, (em, gm, pts) in enumerate(zip(est_maps, gt_maps, gt_points)):
        em, gm = _values(em), _values(gm)
        e, g = float(em.sum()), float(len(pts))
        # level 0 is the count error against the annotation count itself
        gl = [abs(e - g)] + [game(em, gm, L) for L in range(1, 4)]
        loc = localization_prf(em, pts, peak_threshold, match_radius, factor)
        tp, fp, fn = tp + loc.tp, fp + loc.fp, fn + loc.fn
        est_c.append(e)
        gt_c.append(g)
        games.append(gl)
        rows.append({"id": ids[i], "est": e, "gt": g, **{f"G{L}": gl[L] for L in range(4)},
                     "tp": loc.tp, "fp": loc.fp, "fn": loc.fn})
    mae, rms, r2 = count_metrics(est_c, gt_c)
    g = np.mean(np.asarray(games), axis=0)
    g[0] = mae  # same numbers; avoid a summation-order mismatch
    loc = Localization(tp, fp, fn)
    return MetricsReport(mae, rms, r2, *map(float, g), loc.precision, loc.recall, loc.f1,
                         len(est_c), rows)
