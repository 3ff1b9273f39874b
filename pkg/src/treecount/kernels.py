"""Backend selection for the hot loops (compiled if built, numpy otherwise)."""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("TREECOUNT_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass


def gaussian_density(xs, ys, h: int, w: int, sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Superpose one unit-mass truncated Gaussian per point on an h x w grid."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    return _impl.gaussian_density(xs, ys, int(h), int(w), float(sigma), float(truncate))


def local_maxima(m, threshold: float) -> np.ndarray:
    """(row, col) of 3x3 local maxima strictly above ``threshold``."""
    return _impl.local_maxima(np.ascontiguousarray(m, dtype=np.float64), float(threshold))


def greedy_match(pred, gt, radius: float) -> list[tuple[int, int]]:
    """Nearest-first one-to-one matching of two point sets within ``radius``."""
    pred = np.ascontiguousarray(np.asarray(pred, dtype=np.float64).reshape(-1, 2))
    gt = np.ascontiguousarray(np.asarray(gt, dtype=np.float64).reshape(-1, 2))
    return _impl.greedy_match(pred, gt, float(radius))
