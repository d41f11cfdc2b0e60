import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bhxct.core import Image2D
from bhxct.segment import binarize, otsu_threshold


def brute_force_otsu(values, num_bins=256):
    """Try every histogram edge as a split of the raw values; first maximum wins."""
    lo, hi = values.min(), values.max()
    edges = np.linspace(lo, hi, num_bins + 1)
    idx = np.clip(((values - lo) / (hi - lo) * num_bins).astype(int), 0, num_bins - 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    best, best_t = -1.0, None
    for k in range(1, num_bins):
        below = idx < k
        n0, n1 = below.sum(), (~below).sum()
        if n0 == 0 or n1 == 0:
            continue
        # class statistics from bin centres, as in the histogram formulation
        m0 = centers[idx[below]].mean()
        m1 = centers[idx[~below]].mean()
        var = n0 * n1 * (m0 - m1) ** 2
        if var > best * (1 + 1e-12):
            best, best_t = var, edges[k]
    return best_t


def img(values):
    v = np.asarray(values, dtype=np.float64)
    return Image2D(v.reshape(1, -1), 1.0)


def test_perfect_bimodal():
    t = otsu_threshold(img([0.0] * 50 + [1.0] * 50))
    assert 0.0 < t < 1.0


def test_matches_brute_force_sweep():
    v = np.array([0.2] * 60 + [0.8] * 40)
    assert otsu_threshold(img(v), 256) == pytest.approx(brute_force_otsu(v), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_matches_brute_force_random(seed):
    rng = np.random.default_rng(seed)
    v = np.concatenate([rng.normal(0.2, 0.05, 300), rng.normal(0.7, 0.1, 200)])
    assert otsu_threshold(img(v), 64) == pytest.approx(brute_force_otsu(v, 64), abs=1e-9)


@pytest.mark.parametrize("a, b", [(2.0, 1.0), (0.5, -3.0), (10.0, 0.0)])
def test_affine_equivariance(a, b):
    rng = np.random.default_rng(3)
    v = np.concatenate([rng.normal(0.0, 1.0, 400), rng.normal(5.0, 1.5, 600)])
    t = otsu_threshold(img(v))
    t2 = otsu_threshold(img(a * v + b))
    width = a * (v.max() - v.min()) / 256
    assert abs(t2 - (a * t + b)) <= width


def test_constant_image_rejected():
    with pytest.raises(ValueError, match="constant"):
        otsu_threshold(img([3.0] * 10))
    with pytest.raises(ValueError):
        otsu_threshold(img([0.0, 1.0]), 1)


def test_binarize_extremes_and_monotone():
    x = Image2D(np.random.default_rng(0).random((8, 8)), 1.0)
    assert np.all(binarize(x, -1.0).data == 1.0)
    assert np.all(binarize(x, 2.0).data == 0.0)
    prev = binarize(x, 0.0).data
    for t in np.linspace(0.0, 1.0, 11):
        cur = binarize(x, t).data
        assert set(np.unique(cur)) <= {0.0, 1.0}
        assert np.all(cur <= prev)
        prev = cur
