import math

import mpmath as mp
import numpy as np
import pytest

from bhxct.core import Image2D, parallel_geometry
from bhxct.physics import (
    CANONICAL,
    BhParams,
    NoiseSpec,
    add_noise,
    bh_projection,
    ideal_projection,
    simulate_scan,
)
from bhxct.core import Sinogram

EXAMPLE = BhParams(alpha=1.0, mu1=0.2, mu2=0.1)


def mp_bh(d, a, m1, m2):
    mp.mp.dps = 40
    d, a, m1, m2 = (mp.mpf(float(v)) for v in (d, a, m1, m2))
    return m2 * d + mp.log((1 + a) / (1 + a * mp.exp(-(m1 - m2) * d)))


def test_zero_thickness():
    assert bh_projection(0.0, EXAMPLE) == 0.0
    assert ideal_projection(0.0, EXAMPLE) == 0.0


def test_monochromatic_collapse():
    p = BhParams(3.7, 0.25, 0.25)
    assert bh_projection(10.0, p) == pytest.approx(2.5, rel=1e-14)
    assert ideal_projection(10.0, p) == pytest.approx(2.5, rel=1e-14)


def test_reference_values():
    # 1 + ln(2 / (1 + e^-1)) evaluated at 50 digits
    assert bh_projection(10.0, EXAMPLE) == pytest.approx(1.3798854930417225, rel=1e-14)
    assert ideal_projection(10.0, EXAMPLE) == pytest.approx(1.5, rel=1e-14)
    assert ideal_projection(7.0, BhParams(0.0, 0.9, 0.3)) == pytest.approx(2.1)


def test_negative_thickness_is_rejected():
    with pytest.raises(ValueError):
        bh_projection(-1e-3, EXAMPLE)
    with pytest.raises(ValueError):
        ideal_projection(np.array([1.0, -1.0]), EXAMPLE)


def test_matches_high_precision():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a, m2 = rng.uniform(0, 10), rng.uniform(0.01, 1)
        m1 = m2 * rng.uniform(1, 5)
        d = rng.uniform(0, 40)
        got = bh_projection(d, BhParams(a, m1, m2))
        assert got == pytest.approx(float(mp_bh(d, a, m1, m2)), rel=1e-12, abs=1e-300)


def test_large_alpha_d_is_finite():
    p = BhParams(1e12, 5.0, 0.01)
    assert math.isfinite(bh_projection(1e4, p))


def test_params_validation():
    with pytest.raises(ValueError):
        BhParams(-0.1, 0.2, 0.1)
    with pytest.raises(ValueError):
        BhParams(1.0, 0.1, 0.2)
    with pytest.raises(ValueError):
        BhParams(1.0, 0.1, 0.0)


def test_noise_large_i0_limit():
    g = parallel_geometry(10, 50, 1.0)
    p = np.random.default_rng(1).uniform(0, 4, (10, 50))
    noisy = add_noise(Sinogram(p, g), 1e12, 3)
    assert np.max(np.abs(noisy.data - p)) < 1e-4


def test_noise_is_deterministic():
    g = parallel_geometry(4, 5, 1.0)
    s = Sinogram(np.full((4, 5), 1.0), g)
    a, b = add_noise(s, 100.0, 9), add_noise(s, 100.0, 9)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, add_noise(s, 100.0, 10).data)


def test_noise_zero_projection_mean():
    g = parallel_geometry(100, 1000, 1.0)
    noisy = add_noise(Sinogram(np.zeros((100, 1000)), g), 1e4, 0)
    assert abs(noisy.data.mean()) < 3e-3


def test_noise_rejects_nonpositive_i0():
    with pytest.raises(ValueError):
        add_noise(Sinogram(np.zeros((1, 1)), parallel_geometry(1, 1, 1.0)), 0.0, 0)


def test_simulate_scan_zero_support():
    g = parallel_geometry(8, 20, 0.1)
    bh, ideal, th = simulate_scan(Image2D(np.zeros((16, 16)), 0.1), g, CANONICAL)
    assert not bh.data.any() and not ideal.data.any() and not th.data.any()


def test_simulate_scan_monochromatic_equal(disk):
    g = parallel_geometry(30, 363, 0.08)
    bh, ideal, _ = simulate_scan(disk, g, BhParams(2.0, 0.2, 0.2))
    np.testing.assert_allclose(bh.data, ideal.data, rtol=1e-12, atol=1e-15)


def test_simulate_scan_bh_below_ideal(disk):
    g = parallel_geometry(30, 363, 0.08)
    bh, ideal, th = simulate_scan(disk, g, EXAMPLE)
    assert bh.data.max() < ideal.data.max()
    hit = th.data > 0
    assert np.all(bh.data[hit] < ideal.data[hit])


def test_simulate_scan_rejects_bad_support():
    with pytest.raises(ValueError):
        simulate_scan(Image2D(np.full((4, 4), 1.5), 1.0), parallel_geometry(2, 4, 1.0), EXAMPLE)


def test_noise_spec_from_dict():
    assert NoiseSpec.from_dict(None).i0 is None
    assert NoiseSpec.from_dict({"i0": 1e4, "seed": 3}) == NoiseSpec(1e4, 3)
