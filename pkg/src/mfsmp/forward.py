"""Forward system under the reference measure: (X, L), filtered U and its law mu.

Nested Monte Carlo: outer index j carries an observation path Y, inner index
i carries an independent B1 particle sharing that Y. Conditional means given
F^Y are inner averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    _UNDERFLOW,
    CoefficientSet,
    ControlPolicy,
    EmpiricalMeasure,
    Mode,
    conditional_ratio,
    evaluate_policy,
    wasserstein1,
    weighted_law,
)
from .errors import ConfigurationError, DensityUnderflowError, ContractionFailureError, NumericalBlowupError, UnsupportedModeError
from .noise import NoisePlan

SCHEMES = ("log", "euler")


def ev(fn, t, x, mu, u, shape=None):
    """Evaluate a coefficient callback and broadcast to the sample shape."""
    out = np.asarray(fn(t, x, mu, u), dtype=float)
    return np.broadcast_to(out, shape if shape is not None else np.shape(x))


def ev_y(fn, t, x, mu, u, y):
    """Evaluate a measure-derivative callback on a y-grid -> shape x.shape + (G,)."""
    x = np.asarray(x)
    xe = x[..., None]
    ue = np.asarray(u)[..., None]
    out = np.asarray(fn(t, xe, mu, ue, np.asarray(y)), dtype=float)
    return np.broadcast_to(out, x.shape + (np.size(y),))


@dataclass(frozen=True, eq=False)
class ForwardState:
    X: np.ndarray  # (M, N, K+1)
    L: np.ndarray  # (M, N, K+1)
    U: np.ndarray  # (M, K+1), or (M, N, K+1) in state-functional mode
    mu: list  # EmpiricalMeasure per node
    Lbar: np.ndarray  # (M, K+1) inner mean of L
    u: np.ndarray  # (M, K+1) control values
    Y: np.ndarray  # (M, K+1)
    cost: float
    cost_stderr: float
    plan: NoisePlan = field(repr=False)
    coeffs: CoefficientSet = field(repr=False)
    control: ControlPolicy = field(repr=False)
    scheme: str = "log"
    iterations: int = 0
    history: tuple = ()

    @property
    def mode(self) -> Mode:
        return self.coeffs.mode

    @property
    def U_samples(self) -> np.ndarray:
        """U broadcast to one value per sample, shape (M, N, K+1)."""
        if self.U.ndim == 3:
            return self.U
        return np.broadcast_to(self.U[:, None, :], self.X.shape)

    @property
    def statistically_meaningless(self) -> bool:
        return self.plan.N_inner == 1


def _blowup(arr, k):
    bad = np.argwhere(~np.isfinite(arr))
    j, i = (int(v) for v in bad[0][:2])
    raise NumericalBlowupError(f"non-finite value at (j={j}, i={i}, k={k})", module="mfforward")


def euler_forward_given_mu(
    coeffs: CoefficientSet,
    control,
    plan: NoisePlan,
    mu_sequence,
    scheme: str = "log",
    u_values: np.ndarray | None = None,
):
    """Euler-Maruyama for X and the density L for a frozen measure flow.

    ``control`` may be a ControlPolicy or a precomputed (M, K+1) array.
    """
    if scheme not in SCHEMES:
        raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    grid = plan.grid
    K, dt = grid.steps, grid.dt
    if len(mu_sequence) != K + 1:
        raise ConfigurationError(f"need {K + 1} measures, got {len(mu_sequence)}")
    u = _controls(control, plan) if u_values is None else u_values
    M, N = plan.M_outer, plan.N_inner
    X = np.empty((M, N, K + 1))
    L = np.empty((M, N, K + 1))
    X[:, :, 0] = coeffs.x0
    L[:, :, 0] = 1.0
    for k in range(K):
        t = grid.t(k)
        xk, mk, uk = X[:, :, k], mu_sequence[k], u[:, k : k + 1]
        s = ev(coeffs.sigma, t, xk, mk, uk)
        hv = ev(coeffs.h, t, xk, mk, uk)
        X[:, :, k + 1] = xk + s * plan.dB1[:, :, k]
        dy = plan.dY[:, k : k + 1]
        if scheme == "log":
            L[:, :, k + 1] = L[:, :, k] * np.exp(hv * dy - 0.5 * hv * hv * dt)
        else:
            L[:, :, k + 1] = L[:, :, k] * (1.0 + hv * dy)
        if not (np.all(np.isfinite(X[:, :, k + 1])) and np.all(np.isfinite(L[:, :, k + 1]))):
            _blowup(X[:, :, k + 1] + L[:, :, k + 1], k + 1)
        if scheme == "euler" and np.any(L[:, :, k + 1] <= 0):
            j, i = (int(v) for v in np.argwhere(L[:, :, k + 1] <= 0)[0])
            raise NumericalBlowupError(
                f"literal Euler density lost positivity at (j={j}, i={i}, k={k + 1})", module="mfforward"
            )
    return X, L


def _controls(control, plan: NoisePlan) -> np.ndarray:
    if isinstance(control, np.ndarray):
        return control
    return evaluate_policy(control, plan.Y, plan.grid)


def filtered(coeffs: CoefficientSet, X, L, Y, grid):
    """U, inner-mean density and the law of U at every node."""
    K = grid.steps
    Lbar = L.mean(axis=1)
    if coeffs.mode is Mode.CONDITIONAL_LAW:
        if np.any(Lbar < _UNDERFLOW):
            raise DensityUnderflowError("inner mean of the density underflowed")
        # centred on x0: exact when the particles of a path never moved
        U = coeffs.x0 + ((X - coeffs.x0) * L).mean(axis=1) / Lbar
        mus = [weighted_law(U[:, k], Lbar[:, k]) for k in range(K + 1)]
    else:
        U = np.empty_like(X)
        for k in range(K + 1):
            U[:, :, k] = np.broadcast_to(
                coeffs.state_fn(grid.t(k), X[:, :, k], Y[:, : k + 1]), X[:, :, k].shape
            )
        mus = [weighted_law(U[:, :, k].ravel(), L[:, :, k].ravel()) for k in range(K + 1)]
    return U, Lbar, mus


def running_cost(coeffs: CoefficientSet, X, mus, u, grid) -> np.ndarray:
    """Per-sample Phi(X_T, mu_T) + left Riemann sum of f, shape (M, N)."""
    K, dt = grid.steps, grid.dt
    total =np.broadcast_to(np.asarray(coeffs.Phi(X[:, :, K], mus[K]), dtype=float), X[:, :, K].shape).copy()
    for k in range(K):
        total += dt * ev(coeffs.f, grid.t(k), X[:, :, k], mus[k], u[:, k : k + 1])
    return total


def estimate_cost(coeffs, X, mus, u, grid):
    per = running_cost(coeffs, X, mus, u, grid).mean(axis=1)
    M = per.size
    se = float(per.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return float(per.mean()), se


def _picard(coeffs, control, plan, tol, max_iter, scheme, stop, min_iter=2):
    grid = plan.grid
    u = _controls(control, plan)
    Y = plan.Y
    mus = [EmpiricalMeasure.dirac(coeffs.x0)] * (grid.steps + 1)
    history = []
    for m in range(1, max_iter + 1):
        X, L = euler_forward_given_mu(coeffs, control, plan, mus, scheme, u_values=u)
        U, Lbar, new = filtered(coeffs, X, L, Y, grid)
        gap = max(wasserstein1(a, b) for a, b in zip(new, mus))
        history.append(gap)
        mus = new
        if stop and m >= min_iter and gap <= tol:
            return X, L, U, Lbar, mus, u, Y, history, True
    return X, L, U, Lbar, mus, u, Y, history, False


def picard_forward(
    coeffs: CoefficientSet,
    control,
    plan: NoisePlan,
    tol: float = 1e-3,
    max_iter: int = 25,
    scheme: str = "log",
) -> ForwardState:
    """Fixed point in the measure flow, started from the Dirac mass at x0.

    At least two passes are made so that the reported fixed point has been
    reproduced once.
    """
    if not tol > 0:
        raise ConfigurationError(f"picard tol must be > 0, got {tol}")
    if max_iter < 2:
        raise ConfigurationError("max_iter must be >= 2")
    X, L, U, Lbar, mus, u, Y, hist, ok = _picard(coeffs, control, plan, tol, max_iter, scheme, True)
    if not ok:
        raise ContractionFailureError(
            f"measure fixed point not reached within {max_iter} iterations (last gap {hist[-1]:.3e})", hist
        )
    cost, se = estimate_cost(coeffs, X, mus, u, plan.grid)
    for a in (X, L, U, Lbar):
        a.setflags(write=False)
    return ForwardState(
        X, L, U, mus, Lbar, u, Y, cost, se, plan, coeffs, control, scheme, len(hist), tuple(hist)
    )


def contraction_diagnostic(coeffs, control, plan: NoisePlan, iterations: int, scheme: str = "log") -> list[float]:
    """d_m = max_k W1(mu^(m)_k, mu^(m-1)_k) for m = 1..iterations."""
    if iterations < 3:
        raise ConfigurationError("contraction_diagnostic needs iterations >= 3")
    *_, hist, _ = _picard(coeffs, control, plan, 0.0, iterations, scheme, False)
    return hist


def gap_ratios(history) -> list[float]:
    """Successive ratios d_{m+1}/d_m; a gap that has reached exactly 0 counts as ratio 0."""
    out = []
    for a, b in zip(history[:-1], history[1:]):
        out.append(0.0 if b == 0.0 else (np.inf if a == 0.0 else b / a))
    return out


def fkk_filter(coeffs: CoefficientSet, control, forward: ForwardState, plan: NoisePlan) -> np.ndarray:
    """Euler scheme of the filter equation driven by the plan's dY.

    dU = (E[Xh] - E[X]E[h]) dY + (E[X]E[h]^2 - E[Xh]E[h]) dt with every
    P-conditional moment estimated by L-weighted inner averages.
    """
    if coeffs.mode is not Mode.CONDITIONAL_LAW:
        raise UnsupportedModeError("fkk_filter needs conditional-law mode", module="mfforward")
    grid = plan.grid
    K, dt = grid.steps, grid.dt
    X, L = forward.X, forward.L
    u = forward.u
    out = np.empty((plan.M_outer, K + 1))
    out[:, 0] = coeffs.x0
    for k in range(K):
        xk, lk = X[:, :, k], L[:, :, k]
        hk = ev(coeffs.h, grid.t(k), xk, forward.mu[k], u[:, k : k + 1])
        ex = conditional_ratio(xk, lk)
        eh = conditional_ratio(hk, lk)
        exh = conditional_ratio(xk * hk, lk)
        out[:, k + 1] = out[:, k] + (exh - ex * eh) * plan.dY[:, k] + (ex * eh * eh - exh * eh) * dt
    return out


def kalman_bucy_mean(dY: np.ndarray, grid, x0: float = 0.0) -> np.ndarray:
    """Linear filter for dX = dB, dY = X dt + dW with a known start.

    The variance solves P' = 1 - P^2, P(0) = 0, so P(t) = tanh(t); the mean
    is stepped by Euler: m_{k+1} = m_k + P(t_k)(dY_k - m_k dt).
    """
    K, dt = grid.steps, grid.dt
    P = np.tanh(grid.nodes)
    m = np.empty((dY.shape[0], K + 1))
    m[:, 0] = x0
    for k in range(K):
        m[:, k + 1] = m[:, k] + P[k] * (dY[:, k] - m[:, k] * dt)
    return m
