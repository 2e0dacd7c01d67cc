import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr
from scipy.stats import qmc as scipy_qmc

from fbmexpand.qmc import (MAX_DIM, UnsupportedDimension, inverse_normal, normal_cdf,
                           pseudo_points, randomized_replicates, sobol_points)


def mp_inverse_normal(u, digits=40):
    """Bisection on Phi at high precision; independent of the library's approximation."""
    with mpmath.workdps(digits):
        u = mpmath.mpf(u)
        lo, hi = mpmath.mpf(-40), mpmath.mpf(40)
        for _ in range(200):
            mid = (lo + hi) / 2
            if mpmath.ncdf(mid) < u:
                lo = mid
            else:
                hi = mid
        return float((lo + hi) / 2)


def test_dim1_is_van_der_corput():
    pts = sobol_points(1, 7).points[:, 0]
    assert pts.tolist() == [0.5, 0.25, 0.75, 0.125, 0.625, 0.375, 0.875]


def test_first_point_is_half_in_every_dimension():
    assert np.all(sobol_points(MAX_DIM, 1).points == 0.5)
    assert sobol_points(2, 1).points[0].tolist() == [0.5, 0.5]


@pytest.mark.parametrize("dim", [2, 7, 21, 64])
def test_matches_reference_sobol_as_point_set(dim):
    # scipy's unscrambled generator emits the same net in Gray-code order, starting at index 0
    k = 10
    ours = sobol_points(dim, 2 ** k - 1).points
    ref = scipy_qmc.Sobol(dim, scramble=False).random(2 ** k)[1:]
    key = lambda a: a[np.lexsort(a.T[::-1])]
    np.testing.assert_array_equal(key(ours), key(ref))


def test_product_integral_dim5():
    u = sobol_points(5, 2 ** 14).points
    assert abs(np.prod(u, axis=1).mean() - 2.0 ** -5) <= 1e-4


def test_unsupported_dimension():
    with pytest.raises(UnsupportedDimension):
        sobol_points(MAX_DIM + 1, 4)
    with pytest.raises(ValueError):
        sobol_points(0, 4)


def test_sobol_deterministic():
    a = sobol_points(3, 1000).points
    b = sobol_points(3, 1000).points
    assert a.tobytes() == b.tobytes()


def test_inverse_normal_symmetry_and_median():
    assert inverse_normal(0.5) == 0.0
    u = np.linspace(1e-6, 0.5, 501)
    # 1 - u is rounded, so the mirror image is only equal to working precision
    np.testing.assert_allclose(inverse_normal(u), -inverse_normal(1.0 - u), rtol=0, atol=1e-10)


def test_inverse_normal_at_0975():
    oracle = mp_inverse_normal(0.975)
    assert abs(oracle - 1.959964) < 1e-6
    assert abs(inverse_normal(0.975) - oracle) <= 1e-6


def test_inverse_normal_absolute_error_vs_bisection_oracle():
    us = np.concatenate([np.logspace(-12, math.log10(0.5), 60), 1.0 - np.logspace(-12, -1, 30)])
    got = inverse_normal(us)
    ref = np.array([mp_inverse_normal(u) for u in us])
    assert np.max(np.abs(got - ref)) <= 1e-9


def test_inverse_normal_round_trip():
    lo = np.logspace(-12, math.log10(0.5), 2000)
    u = np.concatenate([lo, 1.0 - lo])
    assert np.max(np.abs(ndtr(inverse_normal(u)) - u)) <= 1e-9
    assert np.max(np.abs(normal_cdf(inverse_normal(u)) - u)) <= 1e-9


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_inverse_normal_rejects_outside_unit_interval(bad):
    with pytest.raises(ValueError):
        inverse_normal(bad)


def test_normal_cdf_tail_accuracy():
    for x in (-30.0, -8.0, -1.0, 0.0, 2.5):
        with mpmath.workdps(30):
            ref = float(mpmath.ncdf(x))
        assert normal_cdf(x) == pytest.approx(ref, rel=1e-14)


def test_zero_shifts_give_identical_replicates():
    base = sobol_points(2, 256)
    reps = randomized_replicates(base, 2, seed=0, shifts=np.zeros((2, 2)))
    means = [np.sum(ps.points ** 2, axis=1).mean() for ps in reps]
    assert means[0] == means[1]
    assert np.std(means, ddof=1) == 0.0


def test_shifted_sets_stay_uniform():
    base = sobol_points(3, 4096)
    for ps in randomized_replicates(base, 8, seed=3):
        assert np.all(np.abs(ps.points.mean(axis=0) - 0.5) <= 4 / math.sqrt(ps.n))
        assert ps.shift is not None and ps.shift.shape == (3,)


@given(st.lists(st.floats(0.0, 1.0, allow_nan=False, exclude_max=True), min_size=2, max_size=2))
@settings(max_examples=100, deadline=None)
def test_shifted_points_strictly_inside_unit_cube(shift):
    base = sobol_points(2, 512)
    (ps,) = randomized_replicates(base, 1, seed=0, shifts=[shift])
    assert np.all(ps.points > 0.0) and np.all(ps.points < 1.0)
    assert np.all(np.isfinite(inverse_normal(ps.points)))


def _replicate_se(n, r=16, seed=0):
    f = lambda u: np.exp(u.sum(axis=1))
    means = [f(ps.points).mean() for ps in randomized_replicates(sobol_points(3, n), r, seed)]
    return np.std(means, ddof=1) / math.sqrt(r), float(np.mean(means))


def test_replicate_se_shrinks_faster_than_mc():
    se_small, _ = _replicate_se(2 ** 12)
    se_large, mean = _replicate_se(2 ** 16)
    assert se_small / se_large >= 4.0
    assert abs(mean - (math.e - 1) ** 3) <= 4 * se_large


def test_pseudo_and_sobol_agree():
    f = lambda u: np.cos(u[:, 0]) * u[:, 1] ** 2
    n = 2 ** 14
    u = pseudo_points(2, n, seed=5).points
    mc_mean, mc_se = f(u).mean(), f(u).std(ddof=1) / math.sqrt(n)
    vals = [f(ps.points).mean() for ps in randomized_replicates(sobol_points(2, n // 16), 16, 5)]
    qmc_mean, qmc_se = np.mean(vals), np.std(vals, ddof=1) / 4
    assert abs(mc_mean - qmc_mean) <= 4 * math.hypot(mc_se, qmc_se)
    assert abs(qmc_mean - math.sin(1.0) / 3) <= 4 * qmc_se + 1e-12


def test_pseudo_points_deterministic_and_open():
    a = pseudo_points(4, 1000, seed=9).points
    assert a.tobytes() == pseudo_points(4, 1000, seed=9).points.tobytes()
    assert np.all((a > 0) & (a < 1))
