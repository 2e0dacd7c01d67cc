"""Short-time expansion of E[f(X_t)] and P(X_t <= y) with polynomial weights.

With ``eps = t^H`` the solution at time ``t`` has the law of the unit-time
solution of the rescaled system ``(t V_0, eps V_1, ..., eps V_d)``. All
estimators first build that rescaled model and then work at unit time, where
the baseline is ``Xbar = x0 + V(x0) B`` and every correction enters with
coefficient one:

    E f(X_t) ~ E[f(Xbar)]
             + E[f(Xbar) W1(B)]        (order 1, size t^H)
             + E[f(Xbar) Wd(B)]        (order 2, size t^{1-H})

where, at the rescaled coefficients,

    W1(b) = 1/2 sum C[i1,i2,i3] (b_i1 b_i2 b_i3 - pairing terms)
    C[i1,i2,i3] = sum_{j1,j2} (V_i1 V_i2^j1) V_i3^j2 Ainv[j1,j2]
    Wd(b) = sum_{i} (sum_{j1,j2} V_0^j1 V_i^j2 Ainv[j1,j2]) b_i

``B`` is standard normal in ``R^d`` (the law of ``B_1^H``).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._streams import chunk_bounds, fsum_arrays, map_ordered
from .fbm import HurstParams, SampleBatch, as_hurst, sample_endpoints
from .model import ModelSpec, diffusion_matrix, directional_derivative

PAIRINGS = ("proof", "theorem")
_CHUNK = 1 << 16


class HurstOutOfRange(ValueError):
    """Expansion terms were requested with ``H`` outside ``(1/3, 1/2)``."""


class TimeRangeWarning(UserWarning):
    """``t > 1``: outside the range where the error bound is stated."""


@dataclass(frozen=True)
class ExpansionOrder:
    order: int

    def __post_init__(self):
        if self.order not in (0, 1, 2):
            raise ValueError(f"expansion order must be 0, 1 or 2, got {self.order}")

    def exponents(self, h) -> tuple[float, ...]:
        """Powers of ``t`` of the included correction terms."""
        h = as_hurst(h).h
        return ((), (h,), (h, 1.0 - h))[self.order]

    def error_exponent(self, h) -> float:
        h = as_hurst(h).h
        return (h, 1.0 - h, 2.0 * h)[self.order]


@dataclass(frozen=True, eq=False)
class WeightCoefficients:
    """Sample-independent tensors of the two weights at ``x0``.

    ``W1(b) = (einsum(cubic, b, b, b) - linear . b) / 2`` and
    ``Wd(b) = drift . b``.
    """

    cubic: np.ndarray
    linear: np.ndarray
    drift: np.ndarray
    pairing: str

    def order1(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        cube = np.einsum("ijk,...i,...j,...k->...", self.cubic, b, b, b)
        return 0.5 * (cube - b @ self.linear)

    def drift_weight(self, b: np.ndarray) -> np.ndarray:
        return np.asarray(b, dtype=np.float64) @ self.drift


def weight_coefficients(model: ModelSpec, pairing: str = "proof") -> WeightCoefficients:
    """Contract the field derivatives with ``A(x0)^{-1}``.

    ``pairing="proof"`` subtracts ``b_i1 1[i2=i3] + b_i2 1[i1=i3]`` (the
    divergence of ``b_i1 b_i2 e_i3``); ``"theorem"`` subtracts
    ``b_i1 1[i1=i3] + b_i2 1[i2=i3]``. They coincide for ``d = 1`` and when
    ``V_i1 V_i2`` is symmetric in ``(i1, i2)``.
    """
    if pairing not in PAIRINGS:
        raise ValueError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
    x = model.x0
    d = model.noise_dim
    a_inv = diffusion_matrix(model, x).a_inv
    v = model.diffusion_columns(x)                       # e x d
    vv = np.stack([np.stack([directional_derivative(model, i1 + 1, i2 + 1, x)
                             for i2 in range(d)]) for i1 in range(d)])  # d x d x e
    cubic = np.einsum("abj,jk,kc->abc", vv, a_inv, v)
    diag_23 = np.einsum("abb->a", cubic)   # sum_i2 C[i1, i2, i2]
    diag_13 = np.einsum("aba->b", cubic)   # sum_i1 C[i1, i2, i1]
    if pairing == "proof":
        # b_i1 1[i2=i3] -> coefficient of b_a: sum_b C[a,b,b]; b_i2 1[i1=i3] -> sum_a C[a,b,a]
        linear = diag_23 + diag_13
    else:
        # b_i1 1[i1=i3] -> sum_b C[a,b,a]; b_i2 1[i2=i3] -> sum_a C[a,b,b]
        linear = np.einsum("aba->a", cubic) + np.einsum("abb->b", cubic)
    v0 = np.asarray(model.drift(x), dtype=np.float64)
    drift = v0 @ a_inv @ v
    return WeightCoefficients(cubic=cubic, linear=linear, drift=drift, pairing=pairing)


def weight_order1(model: ModelSpec, b, pairing: str = "proof"):
    """First-order weight ``W1(b)`` of ``model`` (no time scaling applied)."""
    out = weight_coefficients(model, pairing).order1(_as_draws(model, b))
    return float(out) if np.ndim(out) == 0 else out


def weight_drift(model: ModelSpec, b):
    """Drift weight ``Wd(b)``, linear in ``b`` (no time scaling applied)."""
    out = weight_coefficients(model).drift_weight(_as_draws(model, b))
    return float(out) if np.ndim(out) == 0 else out


def _as_draws(model: ModelSpec, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if model.noise_dim == 1 and b.shape[-1:] != (1,):
        b = b[..., None]
    if b.shape[-1:] != (model.noise_dim,):
        raise ValueError(f"draws must have trailing dimension {model.noise_dim}, got shape {b.shape}")
    return b


def scaled_model(model: ModelSpec, t: float, h) -> ModelSpec:
    """Unit-time model with the same terminal law as ``model`` at time ``t``."""
    if not t > 0:
        raise ValueError(f"time must be positive, got {t}")
    return model.rescaled(t ** as_hurst(h).h, t)


def _check_time(t: float) -> bool:
    if not t > 0:
        raise ValueError(f"time must be positive, got {t}")
    if t > 1:
        warnings.warn(f"t = {t} > 1 lies outside the stated range (0, 1]", TimeRangeWarning,
                      stacklevel=3)
        return True
    return False


def baseline_map(model: ModelSpec, t: float, batch, h) -> np.ndarray:
    """Rows ``x0 + t^H V(x0) B_k`` for the draws in ``batch`` (array or SampleBatch)."""
    b = batch.endpoints if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=np.float64)
    unit = scaled_model(model, t, h)
    return unit.x0 + _as_draws(model, b) @ unit.diffusion_columns().T


@dataclass(frozen=True, eq=False)
class ExpansionEstimate:
    """Estimates for ``k`` queries at orders ``0..order``.

    ``values[q, j]`` and ``std_errors[q, j]`` refer to query ``q`` at order ``j``.
    """

    queries: np.ndarray | tuple
    values: np.ndarray
    std_errors: np.ndarray
    n: int
    t: float
    order: int
    meta: dict = field(default_factory=dict)

    def value(self, order: int | None = None) -> np.ndarray:
        return self.values[:, self.order if order is None else order]

    def se(self, order: int | None = None) -> np.ndarray:
        return self.std_errors[:, self.order if order is None else order]


def _validate(model: ModelSpec, t: float, h: HurstParams, order: int) -> bool:
    ExpansionOrder(order)
    outside = _check_time(t)
    if order >= 1 and not h.expansion_valid:
        raise HurstOutOfRange(
            f"expansion hypothesis 1/3 < H < 1/2 violated (H = {h.h}); only order 0 is available"
        )
    return outside


def _estimate(model, t, h, functional, k, order, batch, pairing, workers, chunk_size):
    h = as_hurst(h)
    outside = _validate(model, t, h, order)
    if batch is None:
        batch = sample_endpoints(model.noise_dim, 1 << 16, "sobol", seed=0)
    if batch.d != model.noise_dim:
        raise ValueError(f"batch has dimension {batch.d}, model noise dimension is {model.noise_dim}")
    unit = scaled_model(model, t, h)
    vmat = unit.diffusion_columns()
    coef = weight_coefficients(unit, pairing) if order >= 1 else None
    x0 = unit.x0

    def partial(bounds):
        _, a, b = bounds
        draws = batch.endpoints[a:b]
        f = np.asarray(functional(x0 + draws @ vmat.T), dtype=np.float64).reshape(k, b - a)
        cols = [np.ones(b - a)]
        if coef is not None:
            cols += [coef.order1(draws), coef.drift_weight(draws)]
        else:
            cols += [np.zeros(b - a)] * 2
        w = np.column_stack(cols)
        c = np.cumsum(w, axis=1)        # per-sample multipliers for orders 0, 1, 2
        return f @ w, (f * f) @ (c * c)

    block = batch.block_size
    nblocks = 1 if batch.replicates is None else batch.replicates
    sums, sqs = [], []
    for r in range(nblocks):
        start = r * block
        bounds = [(j, start + a, start + b) for j, a, b in chunk_bounds(block, chunk_size)]
        parts = map_ordered(partial, bounds, workers)
        sums.append(fsum_arrays([p[0] for p in parts]))
        sqs.append(fsum_arrays([p[1] for p in parts]))
    n_used = nblocks * block
    if batch.replicates is None:
        s = sums[0]
        mean = np.cumsum(s, axis=1) / n_used
        var = (sqs[0] / n_used - mean ** 2) * n_used / max(n_used - 1, 1)
        se = np.sqrt(np.clip(var, 0.0, None) / n_used)
    else:
        reps = np.stack([np.cumsum(s, axis=1) / block for s in sums])   # r x k x 3
        mean = fsum_arrays(list(reps)) / nblocks
        se = reps.std(axis=0, ddof=1) / np.sqrt(nblocks) if nblocks > 1 else np.zeros_like(mean)
    meta = {
        "sampler": batch.sampler_kind,
        "seed": batch.seed,
        "replicates": batch.replicates,
        "pairing": pairing,
        "hurst": h.h,
        "outside_time_range": outside,
    }
    return mean[:, :order + 1], se[:, :order + 1], n_used, meta


def estimate_cdf(model: ModelSpec, t: float, h, zs, order: int = 2,
                 batch: SampleBatch | None = None, pairing: str = "proof",
                 workers: int | None = None, chunk_size: int = _CHUNK) -> ExpansionEstimate:
    """Expansion estimates of ``P(X_t <= z)`` (componentwise) for each query ``z``.

    Parameters
    ----------
    zs : array_like
        Queries, shape ``(k,)`` for ``e = 1`` or ``(k, e)``.
    order : {0, 1, 2}
        Highest order included; orders 1 and 2 need ``1/3 < H < 1/2``.
    batch : SampleBatch, optional
        Draws of ``B_1^H``; defaults to ``2**16`` shifted Sobol points.
    """
    e = model.state_dim
    z = np.asarray(zs, dtype=np.float64)
    z = z.reshape(-1, e) if z.ndim <= 1 or e > 1 else z.reshape(-1, 1)
    if z.shape[1] != e:
        raise ValueError(f"queries must have {e} components, got shape {np.shape(zs)}")

    def indicator(xbar):
        return np.all(xbar[None, :, :] <= z[:, None, :], axis=2)

    values, se, n, meta = _estimate(model, t, h, indicator, z.shape[0], order, batch,
                                    pairing, workers, chunk_size)
    return ExpansionEstimate(z if e > 1 else z[:, 0], values, se, n, t, order, meta)


def estimate_expectation(model: ModelSpec, t: float, h, payoff: Callable[[np.ndarray], np.ndarray],
                         order: int = 2, batch: SampleBatch | None = None,
                         pairing: str = "proof", workers: int | None = None,
                         chunk_size: int = _CHUNK) -> ExpansionEstimate:
    """Expansion estimate of ``E[payoff(X_t)]`` for a bounded measurable payoff.

    ``payoff`` maps an ``(n, e)`` array of states to ``n`` values.
    """
    values, se, n, meta = _estimate(model, t, h, payoff, 1, order, batch, pairing,
                                    workers, chunk_size)
    return ExpansionEstimate((getattr(payoff, "__name__", "payoff"),), values, se, n, t, order, meta)
