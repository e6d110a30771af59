"""Domain types, P-weighted empirical laws, exact 1-D W1 and the theta functional."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateDensityError,
    DensityUnderflowError,
    InvalidMeasureError,
)

__all__ = [
    "TimeGrid",
    "Mode",
    "EmpiricalMeasure",
    "wasserstein1",
    "weighted_law",
    "conditional_ratio",
    "theta_functional",
    "ControlPolicy",
    "ConstantPolicy",
    "BlockPolicy",
    "FunctionPolicy",
    "SpikeSpec",
    "CoefficientSet",
    "evaluate_policy",
]

_UNDERFLOW = 1e-300


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}", module="mfcore")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"steps must be an integer >= 1, got {self.steps}", module="mfcore")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def t(self, k: int) -> float:
        return self.horizon if k == self.steps else k * self.dt


class Mode(str, enum.Enum):
    """Which filtered quantity defines the measure argument."""

    CONDITIONAL_LAW = "conditional-law"
    STATE_FUNCTIONAL = "state-functional"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigurationError(
                f"mode must be one of {[m.value for m in cls]}, got {value!r}"
            ) from None


# --------------------------------------------------------------------------
# empirical measures


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Discrete probability measure on the line with sorted atoms."""

    samples: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.array(self.samples, dtype=float).reshape(-1)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if s.size == 0:
            raise InvalidMeasureError("empirical measure needs at least one atom")
        if s.shape != w.shape:
            raise InvalidMeasureError(f"{s.size} atoms but {w.size} weights")
        if not np.all(np.isfinite(s)):
            raise InvalidMeasureError("atoms must be finite")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidMeasureError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidMeasureError(f"weights sum to {w.sum()!r}, not 1")
        if np.any(np.diff(s) < 0):
            raise InvalidMeasureError("atoms must be sorted ascending")
        s.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, x: float) -> "EmpiricalMeasure":
        return cls(np.array([float(x)]), np.array([1.0]))

    def __len__(self) -> int:
        return self.samples.size

    def mean(self) -> float:
        return float(self.weights @ self.samples)

    def moment(self, p: int) -> float:
        return float(self.weights @ self.samples**p)

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        """Quadrature helper: the integral of ``fn`` against the measure."""
        return float(self.weights @ np.asarray(fn(self.samples), dtype=float))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmpiricalMeasure):
            return NotImplemented
        return wasserstein1(self, other) == 0.0

    __hash__ = None


def _cdf_at(mu: EmpiricalMeasure, pts: np.ndarray) -> np.ndarray:
    cum = np.concatenate(([0.0], np.cumsum(mu.weights)))
    return cum[np.searchsorted(mu.samples, pts, side="right")]


def wasserstein1(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W1 on the line.

    In one dimension the quantile form and the CDF form of W1 integrate the
    same area between the two distribution curves; the CDF form is used since
    both CDFs are piecewise constant on the merged breakpoints.
    """
    for m in (mu, nu):
        if not isinstance(m, EmpiricalMeasure) or len(m) == 0:
            raise InvalidMeasureError("wasserstein1 needs two nonempty measures")
    pts = np.union1d(mu.samples, nu.samples)
    if pts.size < 2:
        return 0.0
    left = pts[:-1]
    gaps = np.diff(pts)
    diff = np.abs(_cdf_at(mu, left) - _cdf_at(nu, left))
    return float(np.sum(diff * gaps))


def weighted_law(values, weights) -> EmpiricalMeasure:
    """Normalised, sorted law with repeated atoms merged and null atoms dropped."""
    v = np.asarray(values, dtype=float).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if v.shape != w.shape:
        raise InvalidMeasureError(f"{v.size} values but {w.size} weights")
    if v.size == 0:
        raise InvalidMeasureError("weighted_law needs at least one value")
    if not np.all(np.isfinite(v)):
        raise InvalidMeasureError("values must be finite")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidMeasureError("weights must be finite and nonnegative")
    total = w.sum()
    if not total > 0:
        raise DegenerateDensityError("all density weights are zero")
    keep = w > 0
    v, w = v[keep], w[keep] / total
    atoms, inverse = np.unique(v, return_inverse=True)
    merged = np.bincount(inverse, weights=w, minlength=atoms.size)
    merged = merged / merged.sum()
    return EmpiricalMeasure(atoms, merged)


def conditional_ratio(numerator, density):
    """E^Q[numerator * density | F^Y] / E^Q[density | F^Y] over the last axis."""
    num = np.asarray(numerator, dtype=float)
    den = np.asarray(density, dtype=float)
    d = den.mean(axis=-1)
    if np.any(d < _UNDERFLOW):
        raise DensityUnderflowError("inner mean of the density underflowed")
    return (num * den).mean(axis=-1) / d


def theta_functional(zeta, eta, X, L):
    """Linearised conditional-mean functional, one value per observation path.

    theta = E[L zeta + X eta]/E[L] - E[L X] E[eta] / E[L]^2, with every
    conditional mean taken over the inner (last) axis.
    """
    zeta, eta, X, L = (np.asarray(a, dtype=float) for a in (zeta, eta, X, L))
    el = L.mean(axis=-1)
    if np.any(el < _UNDERFLOW):
        raise DensityUnderflowError("inner mean of the density underflowed")
    first = (L * zeta + X * eta).mean(axis=-1) / el
    second = (L * X).mean(axis=-1) * eta.mean(axis=-1) / el**2
    return first - second


# --------------------------------------------------------------------------
# controls


class ControlPolicy:
    """F^Y-adapted policy taking values in the finite set ``U_set``.

    ``evaluate(k, y_hist, grid)`` receives only the observation prefix
    ``y_hist[:, :k+1]`` and returns one control value per outer path.
    """

    U_set: tuple[float, ...] = ()

    def evaluate(self, k: int, y_hist: np.ndarray, grid: TimeGrid) -> np.ndarray:
        raise NotImplementedError

    def is_deterministic(self) -> bool:
        return False


def _check_in_set(vals: np.ndarray, U_set: Sequence[float]) -> np.ndarray:
    if len(U_set) and not np.all(np.isin(vals, np.asarray(U_set, dtype=float))):
        bad = vals[~np.isin(vals, np.asarray(U_set, dtype=float))]
        raise ConfigurationError(f"control value {bad.flat[0]!r} outside U_set {tuple(U_set)}")
    return vals


@dataclass(frozen=True)
class ConstantPolicy(ControlPolicy):
    value: float
    U_set: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.U_set:
            object.__setattr__(self, "U_set", (float(self.value),))
        _check_in_set(np.array([self.value], dtype=float), self.U_set)

    def evaluate(self, k, y_hist, grid):
        return np.full(np.shape(y_hist)[0], float(self.value))

    def is_deterministic(self):
        return True


@dataclass(frozen=True)
class BlockPolicy(ControlPolicy):
    """Deterministic piecewise-constant control on equal time blocks."""

    values: tuple[float, ...]
    U_set: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.values:
            raise ConfigurationError("BlockPolicy needs at least one block")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.U_set:
            object.__setattr__(self, "U_set", tuple(sorted(set(self.values))))
        _check_in_set(np.array(self.values), self.U_set)

    def block_of(self, k: int, grid: TimeGrid) -> int:
        nb = len(self.values)
        # left-closed blocks: node k belongs to block floor(k * nb / K)
        return min(k * nb // grid.steps, nb - 1)

    def evaluate(self, k, y_hist, grid):
        return np.full(np.shape(y_hist)[0], self.values[self.block_of(k, grid)])

    def is_deterministic(self):
        return True


@dataclass(frozen=True)
class FunctionPolicy(ControlPolicy):
    """Feedback on the observation prefix: ``fn(t, y_hist) -> values``."""

    fn: Callable[[float, np.ndarray], np.ndarray]
    U_set: tuple[float, ...] = ()

    def evaluate(self, k, y_hist, grid):
        vals = np.asarray(self.fn(grid.t(k), np.asarray(y_hist)[:, : k + 1]), dtype=float)
        vals = np.broadcast_to(vals, (np.shape(y_hist)[0],)).copy()
        return _check_in_set(vals, self.U_set)


def evaluate_policy(policy: ControlPolicy, y_path: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Control values u[j, k] for k = 0..K; step k only sees y_path[:, :k+1]."""
    y_path = np.asarray(y_path, dtype=float)
    out = np.empty((y_path.shape[0], grid.steps + 1))
    for k in range(grid.steps + 1):
        prefix = y_path[:, : k + 1]
        prefix.setflags(write=False) if prefix.flags.owndata else None
        out[:, k] = policy.evaluate(k, prefix, grid)
    return out


@dataclass(frozen=True)
class SpikeSpec:
    """Spike window [t0, t0 + eps) on which the alternative policy acts."""

    t0: float
    eps: float
    alt_policy: ControlPolicy

    def __post_init__(self):
        if not (self.eps >= 0 and math.isfinite(self.eps)):
            raise ConfigurationError(f"spike eps must be >= 0, got {self.eps}")
        if not (self.t0 >= 0 and math.isfinite(self.t0)):
            raise ConfigurationError(f"spike t0 must be >= 0, got {self.t0}")

    def validate(self, grid: TimeGrid) -> None:
        T = grid.horizon
        if self.eps > T:
            raise ConfigurationError(f"spike eps {self.eps} exceeds horizon {T}")
        if self.t0 >= T or self.t0 + self.eps > T * (1 + 1e-12):
            raise ConfigurationError(f"spike window [{self.t0}, {self.t0 + self.eps}] leaves [0, {T}]")

    def window(self, grid: TimeGrid) -> np.ndarray:
        """Boolean mask over nodes k = 0..K with t_k in [t0, t0 + eps)."""
        self.validate(grid)
        t = grid.nodes
        tol = 1e-9 * grid.dt
        mask = (t >= self.t0 - tol) & (t < self.t0 + self.eps - tol)
        mask[-1] = False
        return mask

    def effective_eps(self, grid: TimeGrid) -> float:
        return float(self.window(grid).sum() * grid.dt)


# --------------------------------------------------------------------------
# coefficients


def _zero_txmu(t, x, mu, u):
    return 0.0


def _zero_txmuy(t, x, mu, u, y):
    return 0.0


def _zero_xmu(x, mu):
    return 0.0


def _zero_xmuy(x, mu, y):
    return 0.0


@dataclass
class CoefficientSet:
    """Problem data (sigma, h, f, Phi) with the derivatives the solvers need.

    Running coefficients take ``(t, x, mu, u)``; measure derivatives take an
    extra ``y`` (the point at which the Lions derivative is evaluated) and
    ``*_zmu`` is its derivative in ``y``. Terminal cost callbacks take
    ``(x, mu)`` and ``(x, mu, y)``. All callbacks must broadcast over numpy
    arrays: ``x`` is per sample, ``u`` is per outer path with a trailing unit
    axis, ``y`` may carry an extra trailing grid axis.

    The optional split ``h = h0(t, x, mu) + phi_h(x) h1(t, mu, u)`` with
    ``sigma_x_is_zero`` encodes the structural assumption used by the M/R
    correction terms. ``state_fn(k, x, y_hist)`` and ``state_fn_x`` define the
    filtered quantity in state-functional mode.
    """

    x0: float
    sigma: Callable
    h: Callable = _zero_txmu
    f: Callable = _zero_txmu
    Phi: Callable = _zero_xmu
    mode: Mode = Mode.CONDITIONAL_LAW
    sigma_x: Callable = _zero_txmu
    sigma_xx: Callable = _zero_txmu
    h_x: Callable = _zero_txmu
    h_xx: Callable = _zero_txmu
    f_x: Callable = _zero_txmu
    f_xx: Callable = _zero_txmu
    Phi_x: Callable = _zero_xmu
    Phi_xx: Callable = _zero_xmu
    sigma_mu: Callable = _zero_txmuy
    sigma_zmu: Callable = _zero_txmuy
    h_mu: Callable = _zero_txmuy
    h_zmu: Callable = _zero_txmuy
    f_mu: Callable = _zero_txmuy
    f_zmu: Callable = _zero_txmuy
    Phi_mu: Callable = _zero_xmuy
    Phi_zmu: Callable = _zero_xmuy
    sigma_mumu: Callable | None = None
    h_mumu: Callable | None = None
    f_mumu: Callable | None = None
    Phi_mumu: Callable | None = None
    h0: Callable | None = None
    h1: Callable | None = None
    phi_h: Callable | None = None
    phi_h_x: Callable | None = None
    sigma_x_is_zero: bool = False
    state_fn: Callable | None = None
    state_fn_x: Callable | None = None
    bound: float | None = None
    name: str = "custom"
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        if self.mode is Mode.STATE_FUNCTIONAL and (self.state_fn is None or self.state_fn_x is None):
            raise ConfigurationError("state-functional mode needs state_fn and state_fn_x")

    @property
    def has_h3(self) -> bool:
        return bool(self.sigma_x_is_zero) and None not in (self.h0, self.h1, self.phi_h, self.phi_h_x)

    def with_mode(self, mode: "Mode | str") -> "CoefficientSet":
        from dataclasses import replace

        return replace(self, mode=Mode.parse(mode))

    def check_h3(self, xs, mu: EmpiricalMeasure, U_set, t: float = 0.0, atol: float = 1e-10) -> None:
        """Sample-based check of the structural split and x-free sigma."""
        if not self.has_h3:
            raise ConfigurationError("structural split (sigma x-free, h = h0 + phi h1) not declared")
        xs = np.asarray(xs, dtype=float).reshape(-1, 1)
        for u in U_set:
            uu = np.array([[float(u)]])
            s = np.broadcast_to(self.sigma(t, xs, mu, uu), xs.shape)
            if np.ptp(s) > atol:
                raise ConfigurationError("sigma depends on x although sigma_x_is_zero is set")
            lhs = np.broadcast_to(self.h(t, xs, mu, uu), xs.shape)
            rhs = self.h0(t, xs, mu) + self.phi_h(xs) * self.h1(t, mu, uu)
            if np.max(np.abs(lhs - rhs)) > atol:
                raise ConfigurationError("h does not equal h0 + phi_h * h1")

    def check_bounds(self, xs, mu: EmpiricalMeasure, U_set, t: float = 0.0) -> list[str]:
        """Names of coefficients exceeding the declared bound on sample points."""
        if self.bound is None:
            return []
        xs = np.asarray(xs, dtype=float).reshape(-1, 1)
        bad = []
        for u in U_set:
            uu = np.array([[float(u)]])
            for name in ("sigma", "h", "sigma_x", "h_x"):
                v = np.asarray(getattr(self, name)(t, xs, mu, uu), dtype=float)
                if np.any(np.abs(v) > self.bound):
                    bad.append(name)
        return sorted(set(bad))
