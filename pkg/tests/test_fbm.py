import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fbmexpand import fbm
from fbmexpand.checks import covariance_zscores
from fbmexpand.fbm import (EmbeddingFailure, FactorizationError, HurstParams, PathEnsemble,
                           circulant_eigenvalues, cholesky_factor, fbm_covariance,
                           level2_from_paths, level2_iterated_integral, sample_endpoints,
                           sample_paths_cholesky, sample_paths_davies_harte, uniform_grid)


# -- covariance and parameters ----------------------------------------------

def test_covariance_examples():
    assert fbm_covariance(1.0, 1.0, 0.3) == 1.0
    assert fbm_covariance(0.3, 0.7, 0.5) == pytest.approx(0.3, abs=1e-15)
    assert fbm_covariance(0.25, 0.25, 0.4) == pytest.approx(math.exp(0.8 * math.log(0.25)), rel=1e-14)
    assert fbm_covariance(0.25, 0.25, 0.4) == pytest.approx(0.329877, abs=1e-6)


def test_covariance_rejects_negative_time():
    with pytest.raises(ValueError):
        fbm_covariance(-0.1, 0.5, 0.4)


@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.01, 0.99))
@settings(max_examples=200, deadline=None)
def test_covariance_properties(t, s, h):
    r = fbm_covariance(t, s, h)
    assert r == fbm_covariance(s, t, h)
    assert fbm_covariance(t, t, h) == pytest.approx(t ** (2 * h), rel=1e-12, abs=1e-300)
    assert abs(r) <= t ** h * s ** h * (1 + 1e-12) + 4e-16 * (1 + t ** (2 * h) + s ** (2 * h))


@pytest.mark.parametrize("h,valid", [(0.3, False), (1 / 3, False), (0.34, True), (0.4, True),
                                     (0.5, False), (0.9, False)])
def test_expansion_validity(h, valid):
    assert HurstParams(h).expansion_valid is valid


@pytest.mark.parametrize("h", [0.0, 1.0, -0.2, 1.5])
def test_hurst_bounds(h):
    with pytest.raises(ValueError):
        HurstParams(h)


# -- endpoints --------------------------------------------------------------

@pytest.mark.parametrize("sampler", ["pseudo", "mc", "sobol"])
def test_endpoints_standard_normal(sampler):
    n = 1 << 16
    b = sample_endpoints(3, n, sampler, seed=4).endpoints
    assert b.shape == (n, 3)
    assert np.all(np.abs(b.mean(axis=0)) <= 4 / math.sqrt(n))
    assert np.all(np.abs(b.var(axis=0) - 1) <= 4 * math.sqrt(2 / n))


def test_sobol_endpoint_discrepancy_proxy():
    b = sample_endpoints(2, 1 << 16, "sobol", seed=0).endpoints
    for col in b.T:
        x = np.sort(col)
        ecdf_hi = np.arange(1, x.size + 1) / x.size
        ecdf_lo = np.arange(0, x.size) / x.size
        phi = stats.norm.cdf(x)
        assert max(np.max(np.abs(ecdf_hi - phi)), np.max(np.abs(ecdf_lo - phi))) <= 1e-3


def test_endpoint_batch_metadata():
    b = sample_endpoints(2, 1000, "sobol", seed=1, replicates=16)
    assert b.replicates == 16 and b.block_size == 1000 // 16 and b.n == 16 * (1000 // 16)
    p = sample_endpoints(2, 1000, "mc", seed=1)
    assert p.sampler_kind == "pseudo" and p.replicates is None and p.n == 1000


def test_endpoints_errors():
    with pytest.raises(ValueError):
        sample_endpoints(0, 10)
    with pytest.raises(ValueError):
        sample_endpoints(1, 10, "lattice")
    with pytest.raises(ValueError):
        sample_endpoints(1, 8, "sobol", replicates=16)


def test_endpoints_deterministic_across_chunking_workers():
    a = sample_endpoints(2, 50_000, "pseudo", seed=3).endpoints
    b = sample_endpoints(2, 50_000, "pseudo", seed=3).endpoints
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample_endpoints(2, 50_000, "pseudo", seed=4).endpoints)


# -- Cholesky ---------------------------------------------------------------

def test_single_point_grid_is_standard_normal():
    ens = sample_paths_cholesky([1.0], 2, 0.4, 20_000, seed=2)
    assert ens.paths.shape == (20_000, 1, 2)
    for col in ens.paths[:, 0, :].T:
        assert stats.kstest(col, "norm").pvalue > 1e-3


def test_brownian_increments_uncorrelated():
    n = 40_000
    p = sample_paths_cholesky(uniform_grid(6), 1, 0.5, n, seed=8).paths[:, :, 0]
    inc = np.diff(np.concatenate([np.zeros((n, 1)), p], axis=1), axis=1)
    c = inc.T @ inc / n
    se = (1 / 6) / math.sqrt(n)      # sd of a product of independent N(0, 1/6)
    off = c[~np.eye(6, dtype=bool)]
    assert np.max(np.abs(off)) <= 4 * se


@pytest.mark.parametrize("sampler", [sample_paths_cholesky, sample_paths_davies_harte])
def test_covariance_within_four_standard_errors(sampler):
    g = uniform_grid(8)
    ens = sampler(g, 2, 0.4, 50_000, seed=11)
    for i in range(2):
        assert covariance_zscores(ens.paths[:, :, i], g, 0.4).max() <= 4.0
    # components independent
    cross = ens.paths[:, -1, 0] @ ens.paths[:, -1, 1] / ens.n
    assert abs(cross) <= 4 / math.sqrt(ens.n)


def test_first_grid_point_variance():
    g = uniform_grid(16)
    p = sample_paths_davies_harte(g, 1, 0.4, 40_000, seed=12).paths[:, 0, 0]
    target = g[0] ** 0.8
    assert abs(np.mean(p ** 2) - target) <= 4 * target * math.sqrt(2 / p.size)


def test_cholesky_factor_cached_and_readonly():
    g = uniform_grid(32)
    a = cholesky_factor(g, 0.4)
    b = cholesky_factor(g.copy(), 0.4)
    assert a is b
    assert not a.flags.writeable
    np.testing.assert_allclose(a @ a.T, fbm_covariance(g[:, None], g[None, :], 0.4), atol=1e-13)


def test_cholesky_limits_and_grid_checks():
    with pytest.raises(ValueError):
        cholesky_factor(uniform_grid(fbm.MAX_CHOLESKY_POINTS + 1), 0.4)
    with pytest.raises(ValueError):
        cholesky_factor([0.5, 0.2], 0.4)
    with pytest.raises(ValueError):
        cholesky_factor([0.0, 0.2], 0.4)


def test_cholesky_failure_after_jitter(monkeypatch):
    fbm._cholesky_cached.cache_clear()

    def always_fail(a):
        raise np.linalg.LinAlgError("forced")

    monkeypatch.setattr(np.linalg, "cholesky", always_fail)
    with pytest.raises(FactorizationError, match="jitter"):
        cholesky_factor([0.1, 0.2, 0.3], 0.4)
    fbm._cholesky_cached.cache_clear()


def test_cholesky_jitter_rescues_near_duplicate_points():
    fbm._cholesky_cached.cache_clear()
    g = [0.5, np.nextafter(0.5, 1.0), 1.0]
    low = cholesky_factor(g, 0.4)
    assert np.all(np.isfinite(low))


# -- Davies-Harte -----------------------------------------------------------

def test_brownian_embedding_spectrum_is_flat():
    m, step = 64, 1 / 64
    lam = circulant_eigenvalues(m, step, 0.5)
    # white noise with variance `step`: flat spectrum at `step` (numpy's unnormalized FFT)
    np.testing.assert_allclose(lam, step, rtol=0, atol=1e-15)


@pytest.mark.parametrize("h", [0.05, 0.34, 0.4, 0.49, 0.75, 0.95])
def test_embedding_nonnegative(h):
    lam = circulant_eigenvalues(1024, 1 / 1024, h)
    assert lam.min() >= -1e-10 * lam.max()


def test_embedding_failure_is_reported(monkeypatch):
    fbm._embedding_sqrt.cache_clear()
    monkeypatch.setattr(fbm, "circulant_eigenvalues", lambda m, step, h: np.array([1.0, -0.5, 1.0, 1.0]))
    with pytest.raises(EmbeddingFailure) as info:
        sample_paths_davies_harte(uniform_grid(2), 1, 0.4, 4, seed=0)
    assert info.value.min_eigenvalue == -0.5
    fbm._embedding_sqrt.cache_clear()


def test_davies_harte_needs_uniform_grid():
    with pytest.raises(ValueError):
        sample_paths_davies_harte([0.1, 0.3, 1.0], 1, 0.4, 10)


def test_ks_cholesky_vs_davies_harte():
    g = uniform_grid(16)
    a = sample_paths_cholesky(g, 1, 0.4, 30_000, seed=21).paths[:, :, 0]
    b = sample_paths_davies_harte(g, 1, 0.4, 30_000, seed=22).paths[:, :, 0]
    assert stats.ks_2samp(a[:, -1], b[:, -1]).pvalue > 1e-3
    assert stats.ks_2samp(a[:, 5], b[:, 5]).pvalue > 1e-3


@pytest.mark.parametrize("sampler", [sample_paths_cholesky, sample_paths_davies_harte])
def test_paths_deterministic_for_any_worker_count(sampler):
    g = uniform_grid(64)
    ref = sampler(g, 2, 0.4, 3000, seed=5, chunk_size=256, workers=1).paths
    for w in (2, 3, 8):
        assert sampler(g, 2, 0.4, 3000, seed=5, chunk_size=256, workers=w).paths.tobytes() == ref.tobytes()


def test_self_similarity_scaled_ensemble():
    g = uniform_grid(8)
    h, c, n = 0.4, 3.0, 40_000
    direct = sample_paths_cholesky(c * g, 1, h, n, seed=31).paths[:, :, 0]
    scaled = sample_paths_cholesky(g, 1, h, n, seed=32).scaled(c)
    np.testing.assert_allclose(scaled.grid, c * g)
    ratio = np.mean(direct ** 2, axis=0) / np.mean(scaled.paths[:, :, 0] ** 2, axis=0)
    z = np.abs(np.log(ratio)) / math.sqrt(4 / n)
    assert z.max() <= 4.0


def test_stationary_increments():
    g = uniform_grid(8)
    n = 40_000
    p = sample_paths_davies_harte(g, 1, 0.4, n, seed=41).paths[:, :, 0]
    for i, j in [(0, 1), (2, 7), (3, 5), (0, 7)]:
        target = (g[j] - g[i]) ** 0.8
        v = np.mean((p[:, j] - p[:, i]) ** 2)
        assert abs(v - target) <= 4 * target * math.sqrt(2 / n)


# -- level-2 integrals ------------------------------------------------------

def test_level2_diagonal_is_half_square():
    ens = sample_paths_davies_harte(uniform_grid(256), 2, 0.4, 500, seed=1)
    np.testing.assert_array_equal(level2_iterated_integral(ens, 1, 1), 0.5 * ens.paths[:, -1, 1] ** 2)


def test_level2_trapezoid_exact_for_piecewise_linear_paths(rng):
    # oracle: integrate the two linear interpolants with a fine midpoint rule
    g = uniform_grid(20)
    paths = rng.normal(size=(3, 20, 2))
    got = level2_from_paths(paths, 0, 1)
    tt = np.concatenate([[0.0], g])
    fine = np.linspace(0, 1, 20 * 400 + 1)
    mid = 0.5 * (fine[1:] + fine[:-1])
    for k in range(3):
        x = np.interp(mid, tt, np.concatenate([[0.0], paths[k, :, 0]]))
        y = np.interp(fine, tt, np.concatenate([[0.0], paths[k, :, 1]]))
        assert got[k] == pytest.approx(np.sum(x * np.diff(y)), rel=1e-9, abs=1e-12)


def test_level2_integration_by_parts(rng):
    p = rng.normal(size=(50, 33, 2)).cumsum(axis=1)
    lhs = level2_from_paths(p, 0, 1) + level2_from_paths(p, 1, 0)
    np.testing.assert_allclose(lhs, p[:, -1, 0] * p[:, -1, 1], rtol=1e-12, atol=1e-12)


def test_level2_cross_mean_is_zero():
    ens = sample_paths_davies_harte(uniform_grid(256), 2, 0.4, 20_000, seed=77)
    v = level2_iterated_integral(ens, 0, 1)
    assert abs(v.mean()) <= 4 * v.std(ddof=1) / math.sqrt(v.size)


def test_level2_index_errors():
    ens = sample_paths_davies_harte(uniform_grid(4), 1, 0.4, 3, seed=0)
    with pytest.raises(ValueError):
        level2_iterated_integral(ens, 0, 1)


# -- export -----------------------------------------------------------------

def test_csv_layout(tmp_path):
    g = uniform_grid(4)
    ens = sample_paths_cholesky(g, 2, 0.4, 3, seed=0)
    out = tmp_path / "paths.csv"
    ens.to_csv(out, comments=["hello"])
    lines = out.read_text().splitlines()
    assert lines[0] == "# hello"
    assert lines[1] == ",".join(f"{t:.17g}" for t in g)
    data = np.loadtxt(out, delimiter=",", comments="#", skiprows=2)
    assert data.shape == (6, 4)
    np.testing.assert_array_equal(data[:3], ens.paths[:, :, 0])
    np.testing.assert_array_equal(data[3:], ens.paths[:, :, 1])


def test_ensemble_properties():
    ens = PathEnsemble(uniform_grid(3), np.zeros((5, 3, 2)), HurstParams(0.4), 0)
    assert ens.n == 5 and ens.d == 2
