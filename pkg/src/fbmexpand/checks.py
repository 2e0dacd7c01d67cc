"""Statistical identity checks behind ``fbmexpand check-identities``.

Every tolerance is a multiple of an estimated standard error, so small path
counts widen the bands instead of producing false failures.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import fbm
from .expansion import HurstOutOfRange, estimate_cdf, weight_coefficients
from .fbm import as_hurst, fbm_covariance, uniform_grid
from .model import build_model

Z_TOL = 4.0


@dataclass(frozen=True)
class CheckResult:
    name: str
    statistic: float
    tolerance: float
    passed: bool
    detail: str = ""
    refused: bool = False

    @property
    def verdict(self) -> str:
        if self.refused:
            return "REFUSED"
        return "PASS" if self.passed else "FAIL"

    def line(self) -> str:
        text = f"{self.name:<30} stat={self.statistic:<12.5g} tol={self.tolerance:<12.5g} {self.verdict}"
        return f"{text}  {self.detail}" if self.detail else text


def covariance_zscores(paths: np.ndarray, grid: np.ndarray, h) -> np.ndarray:
    """``|sample cov - R| / se`` per entry for one component, ``paths`` of shape (n, m).

    For centred Gaussians ``Var(X_i X_j) = R_ii R_jj + R_ij^2``.
    """
    n = paths.shape[0]
    emp = paths.T @ paths / n
    r = fbm_covariance(grid[:, None], grid[None, :], h)
    se = np.sqrt((np.outer(np.diag(r), np.diag(r)) + r * r) / n)
    return np.abs(emp - r) / se


def check_covariance(method: str, h, n: int, seed: int) -> CheckResult:
    grid = uniform_grid(8)
    ens = fbm._sample_paths(grid, 1, h, n, seed, method, 4096, None)
    z = covariance_zscores(ens.paths[:, :, 0], grid, h)
    stat = float(z.max())
    return CheckResult(f"covariance-{method}", stat, Z_TOL, stat <= Z_TOL, "max z over 8x8 grid")


def check_ks_endpoints(h, n: int, seed: int) -> CheckResult:
    grid = uniform_grid(8)
    a = fbm.sample_paths_cholesky(grid, 1, h, n, seed).paths[:, :, 0]
    b = fbm.sample_paths_davies_harte(grid, 1, h, n, seed + 1).paths[:, :, 0]
    p_end = stats.ks_2samp(a[:, -1], b[:, -1]).pvalue
    p_mid = stats.ks_2samp(a[:, 3], b[:, 3]).pvalue
    p = float(min(p_end, p_mid))
    return CheckResult("ks-cholesky-vs-davies-harte", p, 1e-3, p >= 1e-3,
                       "min p-value (endpoint, t=1/2); pass if >= tol")


def _z_from_cdf(p) -> np.ndarray:
    """Two-sided normal score of a cdf value, exact at any sample size."""
    p = np.asarray(p, dtype=np.float64)
    return np.maximum(stats.norm.isf(np.minimum(p, 1.0 - p)), 0.0)


def check_self_similarity(h, n: int, seed: int, c: float = 2.0) -> CheckResult:
    """``B_{ct}`` vs ``c^H B_t``: the ratio of mean squares is ``c^{2H} F(n, n)`` exactly."""
    h = as_hurst(h)
    grid = uniform_grid(8)
    v1 = np.mean(fbm.sample_paths_cholesky(grid, 1, h, n, seed).paths[:, :, 0] ** 2, axis=0)
    v2 = np.mean(fbm.sample_paths_cholesky(c * grid, 1, h, n, seed + 1).paths[:, :, 0] ** 2, axis=0)
    ratio = v2 / v1 / c ** (2 * h.h)
    stat = float(_z_from_cdf(stats.f.cdf(ratio, n, n)).max())
    return CheckResult("self-similarity", stat, Z_TOL, stat <= Z_TOL, f"variance ratio vs c^2H, c={c}")


def check_stationary_increments(h, n: int, seed: int) -> CheckResult:
    """``n Var(B_t - B_s) / |t-s|^{2H}`` is chi-square with ``n`` degrees of freedom."""
    h = as_hurst(h)
    grid = uniform_grid(8)
    p = fbm.sample_paths_davies_harte(grid, 1, h, n, seed).paths[:, :, 0]
    worst = 0.0
    for i in range(grid.size):
        for j in range(i + 1, grid.size):
            target = (grid[j] - grid[i]) ** (2 * h.h)
            ss = np.sum((p[:, j] - p[:, i]) ** 2) / target
            worst = max(worst, float(_z_from_cdf(stats.chi2.cdf(ss, n))))
    return CheckResult("stationary-increments", worst, Z_TOL, worst <= Z_TOL,
                       "Var(B_t - B_s) vs |t-s|^2H")


def level2_means(h, n: int, m: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Means and standard errors of the (1,1) and (1,2) level-2 integrals at T=1."""
    grid = uniform_grid(m)
    vals = {0: [], 1: []}
    for chunk in fbm.iter_path_chunks(grid, 2, h, n, seed, "davies-harte", 1024):
        vals[0].append(fbm.level2_from_paths(chunk, 0, 0))
        vals[1].append(fbm.level2_from_paths(chunk, 0, 1))
    arrs = [np.concatenate(vals[k]) for k in (0, 1)]
    means = np.array([a.mean() for a in arrs])
    ses = np.array([a.std(ddof=1) / math.sqrt(a.size) for a in arrs])
    return means, ses


def check_level2(h, n: int, m: int, seed: int) -> list[CheckResult]:
    h = as_hurst(h)
    means, ses = level2_means(h, n, m, seed)
    diag_tol = Z_TOL * ses[0] + 1e-2
    diag = abs(means[0] - 0.5)
    cross = abs(means[1]) / ses[1]
    return [
        CheckResult("stratonovich-skorohod-mean", float(diag), float(diag_tol), diag <= diag_tol,
                    f"|mean B(1,1)(1) - 1/2|, m={m}"),
        CheckResult("level2-cross-mean", float(cross), Z_TOL, cross <= Z_TOL,
                    "|mean B(1,2)(1)| / se"),
    ]


def check_weight_centering(n: int, seed: int) -> list[CheckResult]:
    out = []
    for name in ("geometric-1d-drift", "linear-2d"):
        model = build_model(name)
        coef = weight_coefficients(model)
        b = fbm.sample_endpoints(model.noise_dim, n, "pseudo", seed).endpoints
        for label, w in (("W1", coef.order1(b)), ("Wdrift", coef.drift_weight(b))):
            stat = abs(w.mean()) / (w.std(ddof=1) / math.sqrt(n))
            out.append(CheckResult(f"centering-{label}-{name}", float(stat), Z_TOL, stat <= Z_TOL))
    return out


def check_expansion_guard(h) -> CheckResult:
    """Orders >= 1 must be refused outside ``1/3 < H < 1/2``."""
    h = as_hurst(h)
    model = build_model("geometric-1d")
    batch = fbm.sample_endpoints(1, 64, "pseudo", 0)
    if not h.expansion_valid:
        try:
            estimate_cdf(model, 0.25, h, [10.0], 1, batch)
        except HurstOutOfRange as exc:
            return CheckResult("expansion-guard", h.h, 0.5, True, str(exc), refused=True)
        return CheckResult("expansion-guard", h.h, 0.5, False, "order 1 was not refused")
    estimate_cdf(model, 0.25, h, [10.0], 1, batch)
    try:
        estimate_cdf(model, 0.25, 0.9, [10.0], 1, batch)
    except HurstOutOfRange:
        return CheckResult("expansion-guard", h.h, 0.5, True, "H=0.9 refused as expected")
    return CheckResult("expansion-guard", h.h, 0.5, False, "H=0.9 was not refused")


def run_all(h=0.4, paths: int = 20_000, m: int = 4096, seed: int = 0) -> list[CheckResult]:
    """Run every identity check; fBm checks fall back to ``H = 0.4`` if ``h`` is invalid there."""
    hp = as_hurst(h)
    results = [check_expansion_guard(hp)]
    results += [
        check_covariance("cholesky", hp, paths, seed),
        check_covariance("davies-harte", hp, paths, seed + 1),
        check_ks_endpoints(hp, paths, seed + 2),
        check_self_similarity(hp, paths, seed + 4),
        check_stationary_increments(hp, paths, seed + 6),
    ]
    results += check_level2(hp, paths, m, seed + 7)
    results += check_weight_centering(paths, seed + 8)
    return results
