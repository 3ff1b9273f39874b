"""The compiled and numpy kernel backends must agree."""

import numpy as np
import pytest

from treecount import _pykernels, kernels

try:
    from treecount import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


@needs_ext
def test_backend_selected():
    assert kernels.BACKEND == "cython"


@needs_ext
@pytest.mark.parametrize("sigma", [0.7, 2.0, 4.0])
def test_gaussian_backends_agree(rng, sigma):
    pts = rng.uniform(0, 40, size=(30, 2))
    xs, ys = np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1])
    a = _ckernels.gaussian_density(xs, ys, 41, 45, sigma, 4.0)
    b = _pykernels.gaussian_density(xs, ys, 41, 45, sigma, 4.0)
    np.testing.assert_allclose(a, b, atol=1e-13)


@needs_ext
def test_local_maxima_backends_agree(rng):
    m = rng.random((40, 37))
    m[5, 5] = m[5, 6] = 2.0  # plateau
    a = _ckernels.local_maxima(m, 0.5)
    b = _pykernels.local_maxima(m, 0.5)
    np.testing.assert_array_equal(a, b)
    assert [5, 5] in a.tolist() and [5, 6] not in a.tolist()


@needs_ext
def test_greedy_match_backends_agree(rng):
    p = np.ascontiguousarray(rng.uniform(0, 20, size=(25, 2)))
    g = np.ascontiguousarray(rng.uniform(0, 20, size=(30, 2)))
    assert _ckernels.greedy_match(p, g, 2.5) == _pykernels.greedy_match(p, g, 2.5)


def test_local_maxima_threshold():
    m = np.zeros((5, 5))
    m[2, 2] = 1.0
    assert kernels.local_maxima(m, 0.5).tolist() == [[2.0, 2.0]]
    assert kernels.local_maxima(m, 1.0).shape == (0, 2)


def test_greedy_nearest_first():
    pred = [[0.0, 0.0]]
    gt = [[0.0, 1.5], [0.0, 0.5]]
    assert kernels.greedy_match(pred, gt, 2.0) == [(0, 1)]
