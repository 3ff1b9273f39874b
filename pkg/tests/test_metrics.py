import itertools
import math

import numpy as np
import pytest

from treecount import kernels
from treecount.data import downsample_density, generate_density_map
from treecount.metrics import (Localization, aggregate, count_metrics, default_match_radius,
                               default_peak_threshold, game, localization_prf, peak_amplitude,
                               points_to_map)


def optimal_tp(peaks, pts, radius):
    """Maximum number of one-to-one pairs within ``radius`` (exhaustive)."""
    peaks, pts = np.asarray(peaks).reshape(-1, 2), np.asarray(pts).reshape(-1, 2)
    if len(peaks) == 0 or len(pts) == 0:
        return 0
    ok = np.linalg.norm(peaks[:, None] - pts[None], axis=-1) <= radius
    small, large = (peaks, pts) if len(peaks) <= len(pts) else (pts, peaks)
    if len(peaks) > len(pts):
        ok = ok.T
    best = 0
    for perm in itertools.permutations(range(len(large)), len(small)):
        best = max(best, sum(ok[i, j] for i, j in enumerate(perm)))
    return best


# -- count metrics -------------------------------------------------------------------

def test_count_metrics_perfect():
    assert count_metrics([3, 5, 9], [3, 5, 9]) == (0.0, 0.0, 1.0)


def test_count_metrics_predict_mean():
    gt = [2.0, 4.0, 9.0]
    mae, rms, r2 = count_metrics([5.0] * 3, gt)
    assert r2 == pytest.approx(0.0, abs=1e-12)


def test_count_metrics_constant_gt():
    mae, rms, r2 = count_metrics([8, 12, 9], [10, 10, 10])
    assert mae == pytest.approx(5 / 3)
    assert rms == pytest.approx(math.sqrt(3))  # sqrt((4 + 4 + 1) / 3)
    assert math.isnan(r2)


def test_count_metrics_errors():
    with pytest.raises(ValueError):
        count_metrics([1, 2], [1])
    with pytest.raises(ValueError):
        count_metrics([], [])


def test_rms_at_least_mae(rng):
    for _ in range(20):
        e, g = rng.uniform(0, 50, 10), rng.uniform(0, 50, 10)
        mae, rms, _ = count_metrics(e, g)
        assert rms >= mae >= 0


# -- GAME ---------------------------------------------------------------------------------

def test_game_level0_is_count_error(rng):
    a, b = rng.random((8, 8)), rng.random((8, 8))
    assert game(a, b, 0) == pytest.approx(abs(a.sum() - b.sum()))


def test_game_perfect(rng):
    a = rng.random((16, 16))
    assert [game(a, a, L) for L in range(4)] == [0.0] * 4


def test_game_displaced_mass():
    gt, est = np.zeros((8, 8)), np.zeros((8, 8))
    gt[0, 0] = 4
    est[7, 7] = 4
    assert game(est, gt, 0) == 0
    assert game(est, gt, 1) == 8


def test_game_indivisible():
    with pytest.raises(ValueError):
        game(np.zeros((6, 8)), np.zeros((6, 8)), 2)


def test_game_monotone(rng):
    for _ in range(20):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        g = [game(a, b, L) for L in range(4)]
        assert all(x <= y + 1e-12 for x, y in zip(g, g[1:]))


# -- localization -----------------------------------------------------------------------------

def test_peak_amplitude_value():
    # unit Gaussian, sigma 4, point at a 4x4 block center: pixel offsets are
    # half-integers, the truncation window spans offsets -15.5..16.5 per axis
    d = np.arange(-15.5, 16.6)
    w = np.exp(-d ** 2 / 32)
    oracle = (w[np.abs(d) < 2].sum() / w.sum()) ** 2
    assert peak_amplitude(4.0, 4) == pytest.approx(oracle, rel=1e-12)
    assert oracle == pytest.approx(0.1473500, abs=1e-7)
    assert default_peak_threshold(4.0) == pytest.approx(oracle / 2, rel=1e-12)
    assert default_match_radius(4.0) == 2.0


def test_points_to_map():
    np.testing.assert_allclose(points_to_map([(1.5, 5.5)], 4), [[1.0, 0.0]])


def test_localization_exact_peaks():
    pts = np.array([(10.0, 10.0), (40.0, 22.0), (22.0, 50.0)])
    d = downsample_density(generate_density_map(pts, 64, 64, 4.0), 4)
    loc = localization_prf(d, pts, default_peak_threshold(4.0), 2.0, factor=4)
    assert (loc.tp, loc.fp, loc.fn) == (3, 0, 0)
    assert loc.precision == loc.recall == loc.f1 == 100.0


def test_localization_zero_map():
    loc = localization_prf(np.zeros((8, 8)), [(3.0, 3.0)], 0.1, 2.0)
    assert (loc.precision, loc.recall, loc.f1) == (0.0, 0.0, 0.0)


def test_localization_empty_both():
    loc = localization_prf(np.zeros((8, 8)), np.zeros((0, 2)), 0.1, 2.0)
    assert (loc.precision, loc.recall, loc.f1) == (100.0, 100.0, 100.0)


def test_localization_negative_threshold():
    with pytest.raises(ValueError):
        localization_prf(np.zeros((4, 4)), [], -1.0, 1.0)


def test_localization_count_identities(rng):
    for _ in range(20):
        m = rng.random((12, 12))
        pts = rng.uniform(0, 12, size=(rng.integers(0, 6), 2))
        loc = localization_prf(m, pts, 0.5, 1.5)
        n_peaks = len(kernels.local_maxima(m, 0.5))
        assert loc.tp + loc.fn == len(pts)
        assert loc.tp + loc.fp == n_peaks


def test_f1_harmonic_mean():
    loc = Localization(tp=3, fp=1, fn=2)
    p, r = 75.0, 60.0
    assert (loc.precision, loc.recall) == (p, r)
    assert loc.f1 == pytest.approx(2 * p * r / (p + r))


def test_greedy_two_peaks_three_points():
    # one peak sits between two points; nearest-first takes the closer one
    peaks = np.array([[5.0, 5.0], [20.0, 20.0]])
    pts = np.array([[5.0, 6.0], [5.0, 3.5], [40.0, 40.0]])
    assert kernels.greedy_match(peaks, pts, 2.0) == [(0, 0)]
    assert optimal_tp(peaks, pts, 2.0) == 1


def test_greedy_close_to_optimal(rng):
    worst = 0
    for _ in range(300):
        n_p, n_g = rng.integers(0, 6), rng.integers(0, 6)
        peaks = rng.uniform(0, 6, size=(n_p, 2))
        pts = rng.uniform(0, 6, size=(n_g, 2))
        greedy = len(kernels.greedy_match(peaks, pts, 2.0))
        best = optimal_tp(peaks, pts, 2.0)
        assert greedy <= best
        worst = max(worst, best - greedy)
    assert worst <= 1


# -- aggregate -----------------------------------------------------------------------------

def test_aggregate_g0_equals_mae(rng):
    est, gts, pts = [], [], []
    for _ in range(6):
        p = rng.uniform(0, 64, size=(rng.integers(1, 8), 2))
        g = downsample_density(generate_density_map(p, 64, 64), 4).values
        est.append(g * rng.uniform(0.7, 1.3))
        gts.append(g)
        pts.append(p)
    rep = aggregate(est, gts, pts)
    assert rep.E_G0 == rep.E_MAE
    assert rep.E_G0 <= rep.E_G1 <= rep.E_G2 <= rep.E_G3
    assert rep.N == 6 and len(rep.per_image) == 6
    s = rep.summary()
    assert "per_image" not in s and s["N"] == 6


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate([], [], [])


def test_summary_nan_to_none():
    g = [np.zeros((8, 8))] * 2
    rep = aggregate(g, g, [np.zeros((0, 2))] * 2)
    assert rep.summary()["E_R2"] is None
