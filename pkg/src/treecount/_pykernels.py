"""Pure numpy implementations of the hot per-sample loops.

Used when the compiled ``_ckernels`` extension is unavailable or when
``TREECOUNT_PURE_PYTHON=1`` is set. Both backends must agree to float
rounding; see tests/test_kernels.py.
"""

import math

import numpy as np


def gaussian_density(xs, ys, h, w, sigma, truncate=4.0):
    radius = int(math.ceil(truncate * sigma))
    out = np.zeros((h, w), dtype=np.float64)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for x, y in zip(xs, ys):
        cx = int(math.floor(x + 0.5))
        cy = int(math.floor(y + 0.5))
        c0, c1 = max(cx - radius, 0), min(cx + radius + 1, w)
        r0, r1 = max(cy - radius, 0), min(cy + radius + 1, h)
        wx = np.exp(-((np.arange(c0, c1) - x) ** 2) * inv2s2)
        wy = np.exp(-((np.arange(r0, r1) - y) ** 2) * inv2s2)
        out[r0:r1, c0:c1] += np.outer(wy, wx) / (wx.sum() * wy.sum())
    return out


def local_maxima(m, threshold):
    h, w = m.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = m
    keep = m > threshold
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            if dr < 0 or (dr == 0 and dc < 0):
                keep &= m > nb
            else:
                keep &= m >= nb
    rows, cols = np.nonzero(keep)
    return np.stack([rows, cols], axis=1).astype(np.float64)


def greedy_match(pred, gt, radius):
    if len(pred) == 0 or len(gt) == 0:
        return []
    d = ((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1)
    pi, gi = np.nonzero(d <= radius * radius)
    order = np.argsort(d[pi, gi], kind="stable")
    pused, gused = set(), set()
    matches = []
    for t in order:
        i, j = int(pi[t]), int(gi[t])
        if i in pused or j in gused:
            continue
        pused.add(i)
        gused.add(j)
        matches.append((i, j))
    return matches
