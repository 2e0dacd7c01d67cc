"""Independent ground truth for the expansion estimators.

* Exact law of the scalar geometric equation. In Stratonovich (geometric)
  calculus the chain rule is first order, so ``d log X = mu dt + sigma o dB``
  and ``X_t = x exp(mu t + sigma B^H_t)``; hence
  ``P(X_t <= z) = Phi((log(z/x) - mu t) / (sigma t^H))``.
* Closed-form Gaussian partial moments of the expansion for that equation,
  i.e. the exact value the sampled estimator converges to.
* A Wong-Zakai brute-force solver: the ODE driven by the piecewise-linear
  interpolation of sampled fBm paths, integrated with classical RK4.
* Convergence tables with least-squares log-log slopes.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import stats

from . import fbm
from ._streams import map_ordered, resolve_workers
from .expansion import ExpansionOrder, estimate_cdf
from .fbm import as_hurst, sample_endpoints, uniform_grid
from .model import ModelSpec
from .qmc import normal_cdf

GEOMETRIC_MODELS = ("geometric-1d", "geometric-1d-drift")


class UnsupportedModel(ValueError):
    """The oracle has no closed form for this model."""


def _normal_pdf(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def exact_geometric_cdf(x: float, sigma: float, h, t: float, z, mu: float = 0.0):
    """``P(x exp(mu t + sigma B^H_t) <= z)``; zero for ``z <= 0``."""
    if x <= 0 or sigma <= 0:
        raise ValueError(f"need x > 0 and sigma > 0, got x={x}, sigma={sigma}")
    if t <= 0:
        raise ValueError(f"time must be positive, got {t}")
    z = np.asarray(z, dtype=np.float64)
    scale = sigma * t ** as_hurst(h).h
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (np.log(np.where(z > 0, z, 1.0) / x) - mu * t) / scale
    return _scalar_or_array(np.where(z > 0, normal_cdf(w), 0.0))


def closed_form_expansion_cdf_1d(x: float, sigma: float, mu: float, h, t: float, z, order: int):
    """Zero-sampling-error value of the order-``order`` CDF estimator.

    With ``eps = t^H`` and ``b = (z/x - 1) / (sigma eps)``, using
    ``E[1{B<=b} B] = -phi(b)`` and ``E[1{B<=b} B^3] = -(b^2 + 2) phi(b)``:

    * order 0: ``Phi(b)``
    * order 1: ``Phi(b) - sigma eps b^2 phi(b) / 2``
    * order 2: order 1 ``- t^{1-H} (mu / sigma) phi(b)``
    """
    ExpansionOrder(order)
    if x <= 0 or sigma <= 0:
        raise ValueError(f"need x > 0 and sigma > 0, got x={x}, sigma={sigma}")
    hh = as_hurst(h).h
    eps = t ** hh
    b = (np.asarray(z, dtype=np.float64) / x - 1.0) / (sigma * eps)
    value = normal_cdf(b)
    if order >= 1:
        value = value - 0.5 * sigma * eps * b * b * _normal_pdf(b)
    if order >= 2:
        value = value - t ** (1.0 - hh) * (mu / sigma) * _normal_pdf(b)
    return _scalar_or_array(value)


def geometric_params(model: ModelSpec) -> tuple[float, float, float]:
    """``(x, sigma, mu)`` of a registered scalar geometric model."""
    if model.name not in GEOMETRIC_MODELS:
        raise UnsupportedModel(f"no closed form for model {model.name!r}")
    p = model.params
    return p["x0"], p["sigma"], p.get("mu", 0.0)


# ---------------------------------------------------------------------------
# Wong-Zakai

@dataclass(frozen=True, eq=False)
class WongZakaiResult:
    terminal: np.ndarray
    excluded: int


def solve_paths(model: ModelSpec, grid: np.ndarray, paths: np.ndarray, substeps: int = 1):
    """Integrate along piecewise-linear drivers; returns ``(terminal, finite_mask)``.

    ``paths`` has shape ``(n, m, d)`` on ``grid``; the driver starts at 0 at time 0.
    """
    if substeps < 1:
        raise ValueError(f"substeps must be positive, got {substeps}")
    n = paths.shape[0]
    t = np.concatenate([[0.0], np.asarray(grid, dtype=np.float64)])
    incr = np.diff(np.concatenate([np.zeros((n, 1, paths.shape[2])), paths], axis=1), axis=1)
    dts = np.diff(t)
    if all(v.affine is not None for v in model.fields):
        offsets = np.stack([v.affine[0] for v in model.fields])
        mats = np.stack([v.affine[1] for v in model.fields])
        x = _rk4_affine(model.x0.copy(), offsets, mats, dts, np.ascontiguousarray(incr), substeps)
        return x, np.all(np.isfinite(x), axis=1)
    drift, diffusion = model.drift, model.diffusion
    x = np.repeat(model.x0[None, :], n, axis=0)
    hs = 1.0 / substeps

    def rhs(y, dt, db):
        out = dt * drift(y)
        for i, v in enumerate(diffusion):
            out = out + db[:, i:i + 1] * v(y)
        return out

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(dts.size):
            dt, db = dts[k], incr[:, k, :]
            for _ in range(substeps):
                k1 = rhs(x, dt, db)
                k2 = rhs(x + 0.5 * hs * k1, dt, db)
                k3 = rhs(x + 0.5 * hs * k2, dt, db)
                k4 = rhs(x + hs * k3, dt, db)
                x = x + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x, np.all(np.isfinite(x), axis=1)


@njit(cache=True)
def _rk4_affine(x0, offsets, mats, dts, incr, substeps):
    """RK4 for affine models, one path at a time.

    On each interval the driver is linear, so the ODE is ``y' = a + M y`` with
    constant ``a, M``. One RK4 step of size ``h`` on such a system is exactly
    ``y + h (I + hM/2 + (hM)^2/6 + (hM)^3/24)(a + M y)``, evaluated by Horner.
    """
    n, m, d = incr.shape
    e = x0.size
    out = np.empty((n, e))
    a = np.empty(e)
    mat = np.empty((e, e))
    y = np.empty(e)
    g = np.empty(e)
    v = np.empty(e)
    nxt = np.empty(e)
    hs = 1.0 / substeps
    for p in range(n):
        for j in range(e):
            y[j] = x0[j]
        for k in range(m):
            for j in range(e):
                a[j] = dts[k] * offsets[0, j]
                for l in range(e):
                    mat[j, l] = dts[k] * mats[0, j, l]
            for i in range(d):
                w = incr[p, k, i]
                for j in range(e):
                    a[j] += w * offsets[i + 1, j]
                    for l in range(e):
                        mat[j, l] += w * mats[i + 1, j, l]
            for _ in range(substeps):
                for j in range(e):
                    acc = a[j]
                    for l in range(e):
                        acc += mat[j, l] * y[l]
                    g[j] = acc
                    v[j] = acc
                for c in (4.0, 3.0, 2.0):
                    for j in range(e):
                        acc = 0.0
                        for l in range(e):
                            acc += mat[j, l] * v[l]
                        nxt[j] = g[j] + hs / c * acc
                    for j in range(e):
                        v[j] = nxt[j]
                for j in range(e):
                    y[j] += hs * v[j]
        for j in range(e):
            out[p, j] = y[j]
    return out


def wong_zakai_solve(model: ModelSpec, ensemble: fbm.PathEnsemble, substeps: int = 1) -> WongZakaiResult:
    """Terminal states of the ODE driven by each path's linear interpolation.

    Paths whose state becomes non-finite are dropped and counted in ``excluded``.
    """
    if ensemble.d != model.noise_dim:
        raise ValueError(f"ensemble has {ensemble.d} components, model needs {model.noise_dim}")
    x, ok = solve_paths(model, ensemble.grid, ensemble.paths, substeps)
    return WongZakaiResult(terminal=x[ok], excluded=int((~ok).sum()))


@dataclass(frozen=True, eq=False)
class ReferenceCDF:
    queries: np.ndarray
    probabilities: np.ndarray
    std_errors: np.ndarray
    n: int
    excluded: int


def reference_cdf_multidim(model: ModelSpec, h, t: float, zs, n_paths: int, m: int = 4096,
                           seed: int = 0, substeps: int = 1, chunk_size: int = 2048,
                           workers: int | None = None, method: str = "davies-harte") -> ReferenceCDF:
    """Empirical CDF of Wong-Zakai terminal states at time ``t``.

    Unit-time paths on ``{1/m, ..., 1}`` are mapped to ``[0, t]`` by
    self-similarity (grid times ``t``, values times ``t^H``).
    """
    h = as_hurst(h)
    e = model.state_dim
    z = np.asarray(zs, dtype=np.float64).reshape(-1, e)
    grid = uniform_grid(m)
    scale = t ** h.h

    def run(chunk):
        x, ok = solve_paths(model, grid * t, chunk * scale, substeps)
        hits = np.all(x[ok][None, :, :] <= z[:, None, :], axis=2).sum(axis=1)
        return hits, int(ok.sum())

    chunks = fbm.iter_path_chunks(grid, model.noise_dim, h, n_paths, seed, method, chunk_size, workers)
    results, group = [], []
    for chunk in chunks:
        group.append(chunk)
        if len(group) == resolve_workers(workers):
            results += map_ordered(run, group, workers)
            group = []
    results += map_ordered(run, group, workers)
    hits = sum(r[0] for r in results)
    used = sum(r[1] for r in results)
    if used == 0:
        raise RuntimeError("every Wong-Zakai path diverged")
    p = hits / used
    return ReferenceCDF(z, p, np.sqrt(p * (1.0 - p) / used), used, n_paths - used)


# ---------------------------------------------------------------------------
# convergence tables

@dataclass(frozen=True)
class ConvergenceRow:
    t: float
    order: int
    estimate: float
    exact: float
    abs_error: float
    std_error: float


@dataclass(frozen=True)
class SlopeFit:
    order: int
    slope: float
    intercept: float
    stderr: float
    r_squared: float
    expected: float
    degenerate: bool


@dataclass(frozen=True, eq=False)
class ConvergenceTable:
    rows: list[ConvergenceRow]
    fits: dict[int, SlopeFit]
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,order,estimate,exact,abs_error,std_error\n")
        for r in self.rows:
            buf.write(",".join(f"{v:.17g}" for v in (r.t, r.order, r.estimate, r.exact,
                                                      r.abs_error, r.std_error)) + "\n")
        for f in self.fits.values():
            buf.write(f"# order {f.order}: slope={f.slope:.17g} expected={f.expected:.17g} "
                      f"stderr={f.stderr:.17g} r2={f.r_squared:.17g} degenerate={f.degenerate}\n")
        return buf.getvalue()


def fit_slopes(rows: list[ConvergenceRow], h=None) -> dict[int, SlopeFit]:
    """Least-squares slope of ``log abs_error`` against ``log t`` for each order.

    Any zero or non-finite error makes that order's fit degenerate (slope NaN).
    """
    fits = {}
    for order in sorted({r.order for r in rows}):
        sel = [r for r in rows if r.order == order]
        expected = ExpansionOrder(order).error_exponent(h) if h is not None else math.nan
        err = np.array([r.abs_error for r in sel])
        ts = np.array([r.t for r in sel])
        if len(sel) < 3 or np.any(~np.isfinite(err)) or np.any(err <= 0):
            fits[order] = SlopeFit(order, math.nan, math.nan, math.nan, math.nan, expected, True)
            continue
        res = stats.linregress(np.log(ts), np.log(err))
        fits[order] = SlopeFit(order, float(res.slope), float(res.intercept), float(res.stderr),
                               float(res.rvalue ** 2), expected, False)
    return fits


def build_convergence_table(model: ModelSpec, h, ts, z, orders=(0, 1, 2), n: int = 1 << 20,
                            sampler: str = "sobol", seed: int = 0, replicates: int = 16,
                            ref_t: float = 0.25, pairing: str = "proof",
                            workers: int | None = None, n_paths: int = 100_000,
                            m: int = 2048) -> ConvergenceTable:
    """Errors of the order-``k`` estimates against exact values over decreasing ``ts``.

    For the geometric models the standardized threshold
    ``b = (z/x - 1) / (sigma ref_t^H)`` is held fixed, so the query moves as
    ``z(t) = x (1 + sigma t^H b)`` and the exact law is closed form. Other
    models keep ``z`` fixed and use :func:`reference_cdf_multidim`.
    """
    h = as_hurst(h)
    ts = [float(t) for t in ts]
    if len(ts) < 3:
        raise ValueError("at least three time points are needed to fit a slope")
    if any(not 0 < t <= 1 for t in ts) or any(a <= b for a, b in zip(ts, ts[1:])):
        raise ValueError("times must be strictly decreasing and lie in (0, 1]")
    orders = sorted(set(int(o) for o in orders))
    batch = sample_endpoints(model.noise_dim, n, sampler, seed, replicates)
    rows = []
    closed = model.name in GEOMETRIC_MODELS
    if closed:
        x, sigma, mu = geometric_params(model)
        b = (float(z) / x - 1.0) / (sigma * ref_t ** h.h)
    for t in ts:
        if closed:
            zt = x * (1.0 + sigma * t ** h.h * b)
            exact = exact_geometric_cdf(x, sigma, h, t, zt, mu)
        else:
            zt = np.asarray(z, dtype=np.float64)
            exact = float(reference_cdf_multidim(model, h, t, [zt], n_paths, m, seed,
                                                 workers=workers).probabilities[0])
        est = estimate_cdf(model, t, h, [zt], max(orders), batch, pairing, workers)
        for k in orders:
            v = float(est.value(k)[0])
            rows.append(ConvergenceRow(t, k, v, float(exact), abs(v - float(exact)),
                                       float(est.se(k)[0])))
    meta = {"model": model.name, "hurst": h.h, "z": z, "ref_t": ref_t, "n": batch.n,
            "sampler": batch.sampler_kind, "seed": seed, "fixed_b": closed}
    return ConvergenceTable(rows, fit_slopes(rows, h), meta)
