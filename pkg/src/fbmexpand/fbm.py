"""Exact sampling of fractional Brownian motion.

Two path generators share one law: a dense Cholesky factor of the covariance
matrix (any increasing grid, m <= 4096) and circulant embedding of fractional
Gaussian noise (uniform grids starting one step from 0, O(m log m) per path).
Only the unit-time endpoint ``B_1^H`` enters the expansion weights, and it is
standard normal, so :func:`sample_endpoints` draws ``N(0, I_d)`` directly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import qmc
from ._streams import DEFAULT_CHUNK, chunk_bounds, map_ordered, resolve_workers, stream

MAX_CHOLESKY_POINTS = 4096


class FactorizationError(np.linalg.LinAlgError):
    """The covariance matrix could not be factored even after jitter."""


class EmbeddingFailure(ValueError):
    """Circulant embedding has significantly negative eigenvalues."""

    def __init__(self, min_eigenvalue: float, max_eigenvalue: float):
        self.min_eigenvalue = min_eigenvalue
        self.max_eigenvalue = max_eigenvalue
        super().__init__(
            f"circulant embedding eigenvalue {min_eigenvalue:.3e} is below "
            f"-1e-10 * {max_eigenvalue:.3e}; use the Cholesky generator"
        )


@dataclass(frozen=True)
class HurstParams:
    """Hurst index ``0 < h < 1``; ``expansion_valid`` iff ``1/3 < h < 1/2``."""

    h: float

    def __post_init__(self):
        h = float(self.h)
        if not 0.0 < h < 1.0:
            raise ValueError(f"Hurst index must lie in (0, 1), got {h}")
        object.__setattr__(self, "h", h)

    @property
    def expansion_valid(self) -> bool:
        return 1.0 / 3.0 < self.h < 0.5


def as_hurst(h) -> HurstParams:
    return h if isinstance(h, HurstParams) else HurstParams(h)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Draws of ``B_1^H`` stored as an ``n x d`` array.

    Sobol batches hold ``replicates`` contiguous blocks, each a differently
    shifted copy of the same point set; pseudo-random batches are i.i.d. and
    have ``replicates = None``.
    """

    endpoints: np.ndarray
    sampler_kind: str
    seed: int
    replicates: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.endpoints.shape[0]

    @property
    def d(self) -> int:
        return self.endpoints.shape[1]

    @property
    def block_size(self) -> int:
        return self.n if self.replicates is None else self.n // self.replicates


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """fBm paths: ``paths[k, j, i]`` is component ``i`` of path ``k`` at ``grid[j]``."""

    grid: np.ndarray
    paths: np.ndarray
    hurst: HurstParams
    seed: int

    @property
    def n(self) -> int:
        return self.paths.shape[0]

    @property
    def d(self) -> int:
        return self.paths.shape[2]

    def scaled(self, c: float) -> "PathEnsemble":
        """Paths on the grid ``c * grid``, built by self-similarity (``B_{ct} = c^H B_t``)."""
        return PathEnsemble(self.grid * c, self.paths * c ** self.hurst.h, self.hurst, self.seed)

    def to_csv(self, path, comments=()) -> None:
        """Header ``t_1..t_m``; one row per path, component blocks in order.

        ``comments`` are written first as ``#``-prefixed lines.
        """
        with open(path, "w", newline="") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"{t:.17g}" for t in self.grid])
            for i in range(self.d):
                for row in self.paths[:, :, i]:
                    w.writerow([f"{v:.17g}" for v in row])


def fbm_covariance(t, s, h) -> np.ndarray | float:
    """``R(t, s) = (s^{2H} + t^{2H} - |t - s|^{2H}) / 2`` for ``t, s >= 0``."""
    two_h = 2.0 * as_hurst(h).h
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(t < 0) or np.any(s < 0):
        raise ValueError("fBm covariance needs nonnegative times")
    r = 0.5 * (s ** two_h + t ** two_h - np.abs(t - s) ** two_h)
    return float(r) if r.ndim == 0 else r


def sample_endpoints(d: int, n: int, sampler: str = "sobol", seed: int = 0,
                     replicates: int = 16, chunk_size: int = DEFAULT_CHUNK) -> SampleBatch:
    """Draw ``n`` vectors from ``N(0, I_d)``, the law of ``B_1^H``.

    ``sampler="sobol"`` gives ``replicates`` randomly shifted copies of the
    first ``n // replicates`` Sobol points mapped through the inverse normal
    CDF; ``"pseudo"`` (alias ``"mc"``) gives i.i.d. draws, chunk ``k`` coming
    from its own counter-based stream.
    """
    if d < 1 or n < 1:
        raise ValueError(f"d and n must be positive, got d={d}, n={n}")
    if sampler == "mc":
        sampler = "pseudo"
    if sampler == "pseudo":
        parts = [stream(seed, "endpoints", k).standard_normal((b - a, d))
                 for k, a, b in chunk_bounds(n, chunk_size)]
        return SampleBatch(np.concatenate(parts), "pseudo", seed, None,
                           {"chunk_size": chunk_size})
    if sampler != "sobol":
        raise ValueError(f"unknown sampler {sampler!r}; use 'sobol' or 'pseudo'")
    if replicates < 1 or n < replicates:
        raise ValueError(f"need 1 <= replicates <= n, got replicates={replicates}, n={n}")
    base = qmc.sobol_points(d, n // replicates)
    sets = qmc.randomized_replicates(base, replicates, seed)
    z = np.concatenate([qmc.inverse_normal(ps.points) for ps in sets])
    return SampleBatch(z, "sobol", seed, replicates,
                       {"points_per_replicate": base.n, "requested_n": n})


# ---------------------------------------------------------------------------
# paths

def _check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64).reshape(-1)
    if g.size < 1:
        raise ValueError("grid must contain at least one point")
    if g[0] <= 0 or np.any(np.diff(g) <= 0):
        raise ValueError("grid must be strictly increasing with positive entries")
    return g


def uniform_grid(m: int, T: float = 1.0) -> np.ndarray:
    """``{T/m, 2T/m, ..., T}``."""
    return T * np.arange(1, m + 1) / m


@lru_cache(maxsize=16)
def _cholesky_cached(grid: tuple, h: float) -> np.ndarray:
    g = np.asarray(grid)
    cov = fbm_covariance(g[:, None], g[None, :], h)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-12 * np.trace(cov) / g.size
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(g.size))
    except np.linalg.LinAlgError:
        lam = np.linalg.eigvalsh(cov)[0]
        raise FactorizationError(
            f"fBm covariance on {g.size} points is not positive definite "
            f"(min eigenvalue {lam:.3e}, jitter {jitter:.3e} tried)"
        ) from None


def cholesky_factor(grid, h) -> np.ndarray:
    """Lower Cholesky factor of ``[R(t_i, t_j)]``, cached per ``(grid, h)``."""
    g = _check_grid(grid)
    if g.size > MAX_CHOLESKY_POINTS:
        raise ValueError(f"dense factorization is limited to {MAX_CHOLESKY_POINTS} grid points")
    out = _cholesky_cached(tuple(g.tolist()), as_hurst(h).h)
    out.setflags(write=False)
    return out


def _uniform_step(g: np.ndarray) -> float:
    step = g[-1] / g.size
    if not np.allclose(g, step * np.arange(1, g.size + 1), rtol=1e-9, atol=0.0):
        raise ValueError("circulant embedding requires the grid {T/m, 2T/m, ..., T}")
    return float(step)


def circulant_eigenvalues(m: int, step: float, h) -> np.ndarray:
    """Eigenvalues of the size-``2m`` circulant embedding of fGn with spacing ``step``."""
    two_h = 2.0 * as_hurst(h).h
    k = np.arange(m + 1, dtype=np.float64)
    gamma = 0.5 * step ** two_h * (np.abs(k + 1) ** two_h - 2 * k ** two_h + np.abs(k - 1) ** two_h)
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    return np.fft.fft(row).real


@lru_cache(maxsize=16)
def _embedding_sqrt(m: int, step: float, h: float) -> np.ndarray:
    lam = circulant_eigenvalues(m, step, h)
    if lam.min() < -1e-10 * lam.max():
        raise EmbeddingFailure(float(lam.min()), float(lam.max()))
    return np.sqrt(np.clip(lam, 0.0, None) / lam.size)


def _chunk_cholesky(g, d, h, seed, k, count):
    lower = cholesky_factor(g, h)
    z = stream(seed, "paths", k).standard_normal((count, d, g.size))
    return np.einsum("jl,kil->kji", lower, z)


def _chunk_davies_harte(g, d, h, seed, k, count):
    m = g.size
    scale = _embedding_sqrt(m, _uniform_step(g), as_hurst(h).h)
    # real and imaginary parts of one complex FFT are independent fGn samples
    need = count * d
    pairs = (need + 1) // 2
    rng = stream(seed, "paths", k)
    w = rng.standard_normal((pairs, 2 * m)) + 1j * rng.standard_normal((pairs, 2 * m))
    y = np.fft.fft(scale * w, axis=1)[:, :m]
    fgn = np.concatenate([y.real, y.imag])[:need]
    incr = fgn.reshape(count, d, m)
    return np.cumsum(incr, axis=2).transpose(0, 2, 1)


_METHODS = {"cholesky": _chunk_cholesky, "davies-harte": _chunk_davies_harte}


def iter_path_chunks(grid, d: int, h, n: int, seed: int, method: str = "davies-harte",
                     chunk_size: int = 1024, workers: int | None = None) -> Iterator[np.ndarray]:
    """Yield path arrays of shape ``(count, m, d)`` chunk by chunk.

    Chunk ``k`` depends only on ``(seed, k, chunk_size)``; ``workers`` threads
    generate ahead in batches without changing the output.
    """
    g = _check_grid(grid)
    h = as_hurst(h)
    if d < 1 or n < 1:
        raise ValueError(f"d and n must be positive, got d={d}, n={n}")
    try:
        fn = _METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; use one of {sorted(_METHODS)}") from None
    if method == "cholesky":
        cholesky_factor(g, h)
    else:
        _embedding_sqrt(g.size, _uniform_step(g), h.h)
    bounds = chunk_bounds(n, chunk_size)
    batch = max(1, min(len(bounds), resolve_workers(workers)))
    for i in range(0, len(bounds), batch):
        group = bounds[i:i + batch]
        yield from map_ordered(lambda kab: fn(g, d, h.h, seed, kab[0], kab[2] - kab[1]),
                               group, workers)


def _sample_paths(grid, d, h, n, seed, method, chunk_size, workers) -> PathEnsemble:
    g = _check_grid(grid)
    parts = list(iter_path_chunks(g, d, h, n, seed, method, chunk_size, workers))
    return PathEnsemble(grid=g, paths=np.concatenate(parts), hurst=as_hurst(h), seed=seed)


def sample_paths_cholesky(grid, d: int, h, n: int, seed: int = 0,
                          chunk_size: int = 1024, workers: int | None = None) -> PathEnsemble:
    """Exact fBm paths via a dense Cholesky factor of the covariance."""
    return _sample_paths(grid, d, h, n, seed, "cholesky", chunk_size, workers)


def sample_paths_davies_harte(grid, d: int, h, n: int, seed: int = 0,
                              chunk_size: int = 1024, workers: int | None = None) -> PathEnsemble:
    """Exact fBm paths via circulant embedding of fractional Gaussian noise.

    Raises :class:`EmbeddingFailure` if the embedding is not nonnegative
    definite; callers fall back to :func:`sample_paths_cholesky`.
    """
    return _sample_paths(grid, d, h, n, seed, "davies-harte", chunk_size, workers)


def level2_iterated_integral(ensemble: PathEnsemble, i1: int, i2: int) -> np.ndarray:
    """Per-path ``int_0^T B^{i1} o dB^{i2}`` along the piecewise-linear interpolation.

    The trapezoidal sum is exact for piecewise-linear paths. For ``i1 == i2``
    the integral is ``(B_T^{i1})^2 / 2``, returned directly.
    """
    return level2_from_paths(ensemble.paths, i1, i2)


def level2_from_paths(paths: np.ndarray, i1: int, i2: int) -> np.ndarray:
    d = paths.shape[2]
    if not (0 <= i1 < d and 0 <= i2 < d):
        raise ValueError(f"component indices must lie in 0..{d - 1}, got ({i1}, {i2})")
    if i1 == i2:
        return 0.5 * paths[:, -1, i1] ** 2
    zero = np.zeros((paths.shape[0], 1))
    x = np.concatenate([zero, paths[:, :, i1]], axis=1)
    y = np.concatenate([zero, paths[:, :, i2]], axis=1)
    return np.sum(0.5 * (x[:, 1:] + x[:, :-1]) * np.diff(y, axis=1), axis=1)
