"""Vector-field models for rough differential equations.

A model is the data of

    dX_t = V_0(X_t) dt + sum_i V_i(X_t) o dB^{H,i}_t,    X_0 = x0,

with ``V_0`` the drift and ``V_1..V_d`` the diffusion fields. Fields are
evaluated on arrays of shape ``(..., e)`` and carry an exact Jacobian at a
single point.
"""
from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class EllipticityViolation(ValueError):
    """The diffusion fields do not span the state space at the given point."""

    def __init__(self, min_eigenvalue: float, tol: float):
        self.min_eigenvalue = float(min_eigenvalue)
        self.tol = float(tol)
        super().__init__(
            f"diffusion matrix is singular: min eigenvalue {self.min_eigenvalue:.3e} "
            f"<= tolerance {self.tol:.3e}"
        )


@dataclass(frozen=True, eq=False)
class VectorField:
    """A field ``R^e -> R^e`` with its Jacobian ``J[j, k] = dV^j / dx_k``."""

    eval: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    # (offset, matrix) when the field is affine; lets solvers skip Python callbacks
    affine: tuple[np.ndarray, np.ndarray] | None = None

    def __call__(self, x):
        return self.eval(x)

    def scaled(self, c: float) -> "VectorField":
        if self.affine is not None:
            return affine_field(c * self.affine[0], c * self.affine[1])
        f, jac = self.eval, self.jacobian
        return VectorField(lambda x: c * f(x), lambda x: c * jac(x))


def affine_field(offset, matrix) -> VectorField:
    """``V(x) = offset + matrix @ x``."""
    c = np.array(offset, dtype=np.float64)
    m = np.array(matrix, dtype=np.float64)
    if m.shape != (c.size, c.size):
        raise ValueError(f"matrix shape {m.shape} does not match offset length {c.size}")
    c.setflags(write=False)
    m.setflags(write=False)
    return VectorField(lambda x: c + np.asarray(x) @ m.T, lambda x: m.copy(), (c, m))


def zero_field(dim: int) -> VectorField:
    return affine_field(np.zeros(dim), np.zeros((dim, dim)))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Coefficients, initial point and dimensions of an RDE."""

    x0: np.ndarray
    diffusion: tuple[VectorField, ...]
    drift: VectorField | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=np.float64).reshape(-1)
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "diffusion", tuple(self.diffusion))
        if x0.size < 1:
            raise ValueError("state dimension must be at least 1")
        if len(self.diffusion) < 1:
            raise ValueError("at least one diffusion field is required")
        if self.drift is None:
            object.__setattr__(self, "drift", zero_field(x0.size))
        for i, v in enumerate(self.fields):
            val = np.asarray(v(x0))
            jac = np.asarray(v.jacobian(x0))
            if val.shape != (x0.size,) or jac.shape != (x0.size, x0.size):
                raise ValueError(
                    f"field V_{i} returns shapes {val.shape}/{jac.shape}, "
                    f"expected ({x0.size},)/({x0.size}, {x0.size})"
                )

    @property
    def state_dim(self) -> int:
        return self.x0.size

    @property
    def noise_dim(self) -> int:
        return len(self.diffusion)

    @property
    def fields(self) -> tuple[VectorField, ...]:
        """``(V_0, V_1, ..., V_d)``."""
        return (self.drift,) + self.diffusion

    def diffusion_columns(self, x=None) -> np.ndarray:
        """The ``e x d`` matrix ``[V_1(x) ... V_d(x)]`` (``x`` defaults to ``x0``)."""
        x = self.x0 if x is None else _point(self, x)
        return np.column_stack([np.asarray(v(x), dtype=np.float64) for v in self.diffusion])

    def rescaled(self, diffusion_scale: float, drift_scale: float) -> "ModelSpec":
        """Same model with ``V_i -> diffusion_scale V_i`` and ``V_0 -> drift_scale V_0``."""
        return ModelSpec(
            x0=self.x0,
            diffusion=tuple(v.scaled(diffusion_scale) for v in self.diffusion),
            drift=self.drift.scaled(drift_scale),
            name=self.name,
            params=dict(self.params),
        )


def _point(model: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != model.state_dim:
        raise ValueError(f"point has length {x.size}, model state dimension is {model.state_dim}")
    return x


def directional_derivative(model: ModelSpec, i: int, j: int, x) -> np.ndarray:
    """``(V_i V_j)(x) = Jac(V_j)(x) @ V_i(x)``; index 0 is the drift."""
    x = _point(model, x)
    n = model.noise_dim
    if not (0 <= i <= n and 0 <= j <= n):
        raise ValueError(f"field indices must lie in 0..{n}, got ({i}, {j})")
    vi, vj = model.fields[i], model.fields[j]
    return np.asarray(vj.jacobian(x), dtype=np.float64) @ np.asarray(vi(x), dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DiffusionMatrix:
    a: np.ndarray
    a_inv: np.ndarray
    min_eigenvalue: float


@dataclass(frozen=True)
class EllipticityReport:
    min_eigenvalue: float
    tol: float
    passed: bool


def _gram(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    e = model.state_dim
    a = np.zeros((e, e))
    for v in model.diffusion:
        vx = np.asarray(v(x), dtype=np.float64)
        a += np.outer(vx, vx)
    return a


def default_tolerance(a: np.ndarray) -> float:
    return 1e-10 * float(np.trace(a)) / a.shape[0]


def check_ellipticity(model: ModelSpec, x=None, tol: float | None = None) -> EllipticityReport:
    """Report whether ``A(x) = sum_i V_i(x) V_i(x)^T`` has min eigenvalue above ``tol``."""
    x = model.x0 if x is None else _point(model, x)
    a = _gram(model, x)
    if tol is None:
        tol = default_tolerance(a)
    elif tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    lam = float(np.linalg.eigvalsh(a)[0])
    return EllipticityReport(min_eigenvalue=lam, tol=float(tol), passed=bool(lam > tol))


def diffusion_matrix(model: ModelSpec, x=None, tol: float | None = None) -> DiffusionMatrix:
    """``A(x)`` and its inverse; raises :class:`EllipticityViolation` if singular."""
    x = model.x0 if x is None else _point(model, x)
    a = _gram(model, x)
    report = check_ellipticity(model, x, tol)
    if not report.passed:
        raise EllipticityViolation(report.min_eigenvalue, report.tol)
    factor = cho_factor(a, lower=True)
    a_inv = cho_solve(factor, np.eye(a.shape[0]))
    a_inv = 0.5 * (a_inv + a_inv.T)
    return DiffusionMatrix(a=a, a_inv=a_inv, min_eigenvalue=report.min_eigenvalue)


# ---------------------------------------------------------------------------
# registry

def geometric_1d(sigma: float = 0.3, x0: float = 10.0) -> ModelSpec:
    """``dX = sigma X o dB^H``; exact solution ``x0 exp(sigma B^H_t)``."""
    return geometric_1d_drift(sigma=sigma, mu=0.0, x0=x0, name="geometric-1d")


def geometric_1d_drift(sigma: float = 0.3, mu: float = 0.1, x0: float = 10.0,
                       name: str = "geometric-1d-drift") -> ModelSpec:
    """``dX = mu X dt + sigma X o dB^H``; exact solution ``x0 exp(mu t + sigma B^H_t)``."""
    params = {"sigma": float(sigma), "x0": float(x0)}
    if name != "geometric-1d":
        params["mu"] = float(mu)
    return ModelSpec(
        x0=[x0],
        diffusion=(affine_field([0.0], [[sigma]]),),
        drift=affine_field([0.0], [[mu]]),
        name=name,
        params=params,
    )


def linear_2d(sigma: float = 1.0, kappa: float = 0.3, mu: float = 0.1,
              x0=(1.0, 2.0)) -> ModelSpec:
    """Two-dimensional model with constant plus linear fields.

    ``V_1(x) = (sigma, kappa x_1)``, ``V_2(x) = (kappa x_2, sigma)``,
    ``V_0(x) = mu x``. With ``kappa = 0`` the diffusion is additive.
    ``V_1 V_2 != V_2 V_1`` whenever ``kappa != 0``, and away from the diagonal
    ``x_1 = x_2`` the two weight pairings give different results.
    """
    return ModelSpec(
        x0=x0,
        diffusion=(
            affine_field([sigma, 0.0], [[0.0, 0.0], [kappa, 0.0]]),
            affine_field([0.0, sigma], [[0.0, kappa], [0.0, 0.0]]),
        ),
        drift=affine_field([0.0, 0.0], [[mu, 0.0], [0.0, mu]]),
        name="linear-2d",
        params={"sigma": float(sigma), "kappa": float(kappa), "mu": float(mu),
                "x0": [float(v) for v in x0]},
    )


MODEL_REGISTRY: dict[str, Callable[..., ModelSpec]] = {
    "geometric-1d": geometric_1d,
    "geometric-1d-drift": geometric_1d_drift,
    "linear-2d": linear_2d,
}


def build_model(name: str, **params) -> ModelSpec:
    """Instantiate a registered model; unknown names or parameters raise ``ValueError``."""
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_REGISTRY)}") from None
    allowed = set(inspect.signature(factory).parameters) - {"name"}
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"model {name!r} has no parameter(s) {sorted(unknown)}; allowed: {sorted(allowed)}")
    return factory(**params)
