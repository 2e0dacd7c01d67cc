"""Low-discrepancy points and the uniform-to-Gaussian transform.

Sobol points follow the direct (natural-order) construction: point ``k`` is
the XOR of the direction numbers selected by the binary digits of ``k``.
Index 0 (the origin) is skipped, so dimension 1 reproduces the base-2 van der
Corput sequence 1/2, 1/4, 3/4, 1/8, ...
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erfc

from ._joe_kuo import DIRECTION_NUMBERS
from ._streams import stream

MAX_DIM = len(DIRECTION_NUMBERS) + 1
_BITS = 32
_SCALE = 2.0 ** -_BITS
# smallest step away from 0 and 1 that survives the modulo-1 shift
_EDGE = 2.0 ** -53


class UnsupportedDimension(ValueError):
    """Raised when a Sobol dimension exceeds the direction-number table."""


@dataclass(frozen=True, eq=False)
class PointSet:
    """A set of ``n`` points in the open unit cube ``(0, 1)^dim``."""

    points: np.ndarray
    kind: str
    shift: np.ndarray | None = None
    seed: int | None = None

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n(self) -> int:
        return self.points.shape[0]


def _direction_integers(dim: int) -> np.ndarray:
    """Direction integers ``v[j, k]`` scaled to ``_BITS`` bits, shape (dim, _BITS)."""
    v = np.zeros((dim, _BITS), dtype=np.uint64)
    v[0] = [1 << (_BITS - 1 - k) for k in range(_BITS)]
    for j in range(1, dim):
        s, a, m = DIRECTION_NUMBERS[j - 1]
        row = [0] * _BITS
        for k in range(min(s, _BITS)):
            row[k] = m[k] << (_BITS - 1 - k)
        for k in range(s, _BITS):
            x = row[k - s] ^ (row[k - s] >> s)
            for i in range(1, s):
                if (a >> (s - 1 - i)) & 1:
                    x ^= row[k - i]
            row[k] = x
        v[j] = row
    return v


def sobol_points(dim: int, n: int) -> PointSet:
    """First ``n`` Sobol points in ``dim`` dimensions, starting at index 1.

    Parameters
    ----------
    dim : int
        Dimension, ``1 <= dim <= 64``.
    n : int
        Number of points, ``1 <= n < 2**32``.
    """
    if dim < 1 or n < 1:
        raise ValueError(f"dim and n must be positive, got dim={dim}, n={n}")
    if dim > MAX_DIM:
        raise UnsupportedDimension(f"Sobol table covers dim <= {MAX_DIM}, got {dim}")
    if n >= 2 ** _BITS:
        raise ValueError(f"n must be below 2**{_BITS}")
    v = _direction_integers(dim)
    idx = np.arange(1, n + 1, dtype=np.uint64)
    acc = np.zeros((n, dim), dtype=np.uint64)
    for bit in range(int(n).bit_length()):
        sel = ((idx >> np.uint64(bit)) & np.uint64(1)).astype(bool)
        acc[sel] ^= v[:, bit]
    return PointSet(points=acc.astype(np.float64) * _SCALE, kind="sobol")


def pseudo_points(dim: int, n: int, seed: int) -> PointSet:
    """``n`` pseudo-random uniform points drawn from a counter-based stream."""
    if dim < 1 or n < 1:
        raise ValueError(f"dim and n must be positive, got dim={dim}, n={n}")
    u = stream(seed, "uniform").random((n, dim))
    return PointSet(points=np.clip(u, _EDGE, 1.0 - _EDGE), kind="pseudo", seed=seed)


def randomized_replicates(ps: PointSet, r: int, seed: int, shifts=None) -> list[PointSet]:
    """Cranley-Patterson rotations of ``ps``: ``r`` copies shifted modulo 1.

    ``shifts`` (shape ``(r, dim)``) overrides the random shifts; passing zeros
    reproduces the unshifted set ``r`` times.
    """
    if r < 1:
        raise ValueError(f"replicate count must be positive, got {r}")
    if shifts is None:
        shifts = stream(seed, "shift").random((r, ps.dim))
    shifts = np.asarray(shifts, dtype=np.float64).reshape(r, ps.dim)
    out = []
    for shift in shifts:
        u = np.mod(ps.points + shift, 1.0)
        u = np.clip(u, _EDGE, 1.0 - _EDGE)
        out.append(replace(ps, points=u, shift=shift.copy(), seed=seed))
    return out


# Acklam's rational approximation; relative error below 1.2e-9 before refinement.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549671875485259e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _poly(coef, x):
    acc = np.zeros_like(x) + coef[0]
    for c in coef[1:]:
        acc = acc * x + c
    return acc


def _lower_half(q: np.ndarray) -> np.ndarray:
    """Inverse normal CDF for ``0 < q <= 1/2``, refined with one Halley step."""
    x = np.empty_like(q)
    tail = q < _P_LOW
    if tail.any():
        r = np.sqrt(-2.0 * np.log(q[tail]))
        x[tail] = _poly(_C, r) / (_poly(_D, r) * r + 1.0)
    mid = ~tail
    if mid.any():
        s = q[mid] - 0.5
        r = s * s
        x[mid] = _poly(_A, r) * s / (_poly(_B, r) * r + 1.0)
    err = 0.5 * erfc(-x / np.sqrt(2.0)) - q
    w = err * np.sqrt(2.0 * np.pi) * np.exp(0.5 * x * x)
    return x - w / (1.0 + 0.5 * x * w)


def inverse_normal(u):
    """Standard normal quantile ``Phi^{-1}(u)`` for ``u`` strictly inside (0, 1).

    Accepts scalars or arrays. Absolute error is below 1e-9 on
    ``[1e-12, 1 - 1e-12]``.
    """
    arr = np.asarray(u, dtype=np.float64)
    if np.any(~(arr > 0.0) | ~(arr < 1.0)):
        raise ValueError("inverse_normal requires 0 < u < 1")
    flat = arr.reshape(-1)
    upper = flat > 0.5
    q = np.where(upper, 1.0 - flat, flat)
    x = _lower_half(q)
    x = np.where(upper, -x, x)
    x[flat == 0.5] = 0.0
    x = x.reshape(arr.shape)
    return float(x) if x.ndim == 0 else x


def normal_cdf(x):
    """``Phi(x)`` through the complementary error function."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / np.sqrt(2.0))
