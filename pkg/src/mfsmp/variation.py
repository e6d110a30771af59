"""First and second order variational systems along a spike variation.

All systems are stepped with the same explicit Euler grid as the forward
solver. Mean-field cross terms use the shared y-grid (see crossterms): with
n = M*N samples playing the independent copy,

    E~[ int_0^{U~} d_mu s(y) dy * K~ ]  ->  sum_g G_g * push(U, K)_g / n
    E~[ d_mu s(U~) L~ V~ ]              ->  sum_g s_g * push(U, L V)_g / n

where s_g = d_mu s(t, X, mu, u; y_g) is taken at the sample's own state and G
is its antiderivative from 0.

The pushed vectors are then normalised as the exact derivative of the
self-normalised law sum(L g(U)) / sum(L): divide by S = mean(L) and centre the
K-channel by mean(K) * push(U, L) / (n S). With E[L] = 1 and E[K] = 0 this is
the population formula; on a finite ensemble it removes a bias of order
sqrt(eps / M) that otherwise swamps the second-order residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ControlPolicy,
    Mode,
    SpikeSpec,
    TimeGrid,
    evaluate_policy,
    theta_functional,
)
from .crossterms import measure_grids, own_U, state_fn_x, theta_per_sample
from .errors import ConfigurationError, NumericalBlowupError
from .forward import ev, ev_y, filtered, picard_forward


class SpikedPolicy(ControlPolicy):
    """alt_policy on the spike window, base elsewhere."""

    def __init__(self, base: ControlPolicy, spike: SpikeSpec):
        self.base = base
        self.spike = spike
        self.U_set = tuple(sorted(set(base.U_set) | set(spike.alt_policy.U_set)))

    def evaluate(self, k, y_hist, grid):
        if self.spike.eps > 0 and self.spike.window(grid)[k]:
            return self.spike.alt_policy.evaluate(k, y_hist, grid)
        return self.base.evaluate(k, y_hist, grid)

    def is_deterministic(self):
        return self.base.is_deterministic() and self.spike.alt_policy.is_deterministic()


def spike_control(base: ControlPolicy, spike: SpikeSpec) -> ControlPolicy:
    return SpikedPolicy(base, spike)


@dataclass(frozen=True, eq=False)
class VariationState:
    Y1: np.ndarray
    K1: np.ndarray
    V1: np.ndarray
    spike: SpikeSpec
    eps: float
    window: np.ndarray
    alt: np.ndarray
    Y2: np.ndarray | None = None
    K2: np.ndarray | None = None
    V2: np.ndarray | None = None
    drive_Y1: np.ndarray | None = None  # dY1 = drive_Y1 dB1, per node
    drive_K1: np.ndarray | None = None  # dK1 = drive_K1 dY

    @property
    def complete(self) -> bool:
        return self.Y2 is not None


def _check_plan(forward, plan):
    if plan is not forward.plan and plan.content_hash != forward.plan.content_hash:
        raise ConfigurationError("variation and forward runs use different noise plans", module="mfvariation")


def _window_and_alt(forward, spike, plan):
    grid = plan.grid
    win = spike.window(grid) if spike.eps > 0 else np.zeros(grid.steps + 1, dtype=bool)
    alt = evaluate_policy(spike.alt_policy, forward.Y, grid)
    return win, alt


def _finite(name, arr, k):
    if not np.all(np.isfinite(arr)):
        j, i = (int(v) for v in np.argwhere(~np.isfinite(arr))[0][:2])
        raise NumericalBlowupError(f"{name} non-finite at (j={j}, i={i}, k={k})", module="mfvariation")


class _Node:
    """Coefficient values needed at node k (base solution, base and alt control)."""

    def __init__(self, coeffs, forward, k, alt, active, second=False):
        grid = forward.plan.grid
        t = grid.t(k)
        x, mu = forward.X[:, :, k], forward.mu[k]
        u = forward.u[:, k : k + 1]
        shape = x.shape
        self.mg = measure_grids(forward)[k]
        y = self.mg.nodes
        self.U = own_U(forward, k)
        self.L = forward.L[:, :, k]
        self.sx = ev(coeffs.sigma_x, t, x, mu, u)
        self.h = ev(coeffs.h, t, x, mu, u)
        self.hx = ev(coeffs.h_x, t, x, mu, u)
        self.smu = ev_y(coeffs.sigma_mu, t, x, mu, u, y)
        self.hmu = ev_y(coeffs.h_mu, t, x, mu, u, y)
        self.Gs = self.mg.antideriv(self.smu)
        self.Gh = self.mg.antideriv(self.hmu)
        self.active = bool(active)
        if active:
            v = alt[:, k : k + 1]
            self.ds = ev(coeffs.sigma, t, x, mu, v) - ev(coeffs.sigma, t, x, mu, u)
            self.dh = ev(coeffs.h, t, x, mu, v) - ev(coeffs.h, t, x, mu, u)
        else:
            self.ds = self.dh = np.zeros(shape)
        if second:
            self.sxx = ev(coeffs.sigma_xx, t, x, mu, u)
            self.hxx = ev(coeffs.h_xx, t, x, mu, u)
            self.szmu = ev_y(coeffs.sigma_zmu, t, x, mu, u, y)
            self.hzmu = ev_y(coeffs.h_zmu, t, x, mu, u, y)
            if active:
                v = alt[:, k : k + 1]
                self.dsx = ev(coeffs.sigma_x, t, x, mu, v) - self.sx
                self.dhx = ev(coeffs.h_x, t, x, mu, v) - self.hx
                self.dsmu = ev_y(coeffs.sigma_mu, t, x, mu, v, y) - self.smu
                self.dhmu = ev_y(coeffs.h_mu, t, x, mu, v, y) - self.hmu
                self.dGs = self.mg.antideriv(self.dsmu)
                self.dGh = self.mg.antideriv(self.dhmu)

        n = self.L.size
        self.n = n
        self.S = float(self.L.mean())
        self.cL = self.mg.push(self.U, self.L) / n

    def pushed(self, w, n=None):
        return self.mg.push(self.U, w) / self.n

    def k_channel(self, k_arr):
        """Centred, normalised push of a K-type perturbation."""
        d = float(np.mean(k_arr))
        return (self.pushed(k_arr) - d / self.S * self.cL) / self.S

    def v_channel(self, w):
        return self.pushed(w) / self.S


def _pair(G, c):
    return np.einsum("mng,g->mn", G, c)


def solve_first_variation(coeffs, forward, control, spike: SpikeSpec, plan, forcing_scale: float = 1.0) -> VariationState:
    """Euler scheme for (Y1, K1) with V1 = theta(Y1, K1) (or phi_x Y1)."""
    _check_plan(forward, plan)
    grid = plan.grid
    K = grid.steps
    M, N = plan.M_outer, plan.N_inner
    win, alt = _window_and_alt(forward, spike, plan)
    Y1 = np.zeros((M, N, K + 1))
    K1 = np.zeros((M, N, K + 1))
    appendix = coeffs.mode is Mode.STATE_FUNCTIONAL
    V1 = np.zeros((M, N, K + 1)) if appendix else np.zeros((M, K + 1))
    DA = np.zeros((M, N, K))
    DB = np.zeros((M, N, K))
    for k in range(K):
        y1, k1 = Y1[:, :, k], K1[:, :, k]
        if not win[: k + 1].any():
            continue  # everything is still exactly zero before the window opens
        nd = _Node(coeffs, forward, k, alt, win[k])
        vs, vstore = theta_per_sample(forward, k, y1, k1)
        V1[..., k] = vstore
        cK = nd.k_channel(k1)
        cLV = nd.v_channel(nd.L * vs)
        Cs = _pair(nd.Gs, cK) + _pair(nd.smu, cLV)
        Ch = _pair(nd.Gh, cK) + _pair(nd.hmu, cLV)
        a = nd.sx * y1 + Cs + forcing_scale * nd.ds
        b = nd.h * k1 + (nd.hx * y1 + Ch + forcing_scale * nd.dh) * nd.L
        DA[:, :, k], DB[:, :, k] = a, b
        Y1[:, :, k + 1] = y1 + a * plan.dB1[:, :, k]
        K1[:, :, k + 1] = k1 + b * plan.dY[:, k : k + 1]
        _finite("first variation", Y1[:, :, k + 1] + K1[:, :, k + 1], k + 1)
    _, vstore = theta_per_sample(forward, K, Y1[:, :, K], K1[:, :, K])
    V1[..., K] = vstore
    eps = float(win.sum() * grid.dt)
    return VariationState(Y1, K1, V1, spike, eps, win, alt, drive_Y1=DA, drive_K1=DB)


def second_order_U(forward, k, Y1, K1, Y2, K2):
    """Second-order perturbation of U at node k.

    Conditional-law mode: the exact second-order term of the ratio
    E[L X]/E[L],  theta(Y2, K2) + E[K1 Y1]/E[L] - (E[K1]/E[L]) theta(Y1, K1).
    State-functional mode: phi_x * Y2.
    """
    X, L = forward.X[:, :, k], forward.L[:, :, k]
    if forward.coeffs.mode is Mode.CONDITIONAL_LAW:
        el = L.mean(axis=1)
        v = (
            theta_functional(Y2, K2, X, L)
            + (K1 * Y1).mean(axis=1) / el
            - K1.mean(axis=1) / el * theta_functional(Y1, K1, X, L)
        )
        return np.broadcast_to(v[:, None], X.shape), v
    v = state_fn_x(forward, k) * Y2
    return v, v


def solve_second_variation(coeffs, forward, control, spike, plan, first: VariationState) -> VariationState:
    """Euler scheme for (Y2, K2) with quadratic sources in (Y1, K1, V1)."""
    _check_plan(forward, plan)
    grid = plan.grid
    K = grid.steps
    M, N = plan.M_outer, plan.N_inner
    win, alt = first.window, first.alt
    Y1, K1 = first.Y1, first.K1
    Y2 = np.zeros_like(Y1)
    K2 = np.zeros_like(K1)
    V2 = np.zeros_like(first.V1)
    for k in range(K):
        if not win[: k + 1].any():
            continue
        y1, k1, y2, k2 = Y1[:, :, k], K1[:, :, k], Y2[:, :, k], K2[:, :, k]
        nd = _Node(coeffs, forward, k, alt, win[k], second=True)
        v1, _ = theta_per_sample(forward, k, y1, k1)
        v2, vstore = second_order_U(forward, k, y1, k1, y2, k2)
        V2[..., k] = vstore
        L = nd.L
        cK = nd.k_channel(k1)
        cLV = nd.v_channel(L * v1)
        cK2 = nd.k_channel(k2)
        cQ = nd.v_channel(L * v2 + v1 * k1)
        cLV1sq = nd.v_channel(L * v1 * v1)
        # first-order cross values, reused for the normalisation correction
        d1 = float(np.mean(k1)) / nd.S
        Cs1 = _pair(nd.Gs, cK) + _pair(nd.smu, cLV)
        Ch1 = _pair(nd.Gh, cK) + _pair(nd.hmu, cLV)
        Cs2 = _pair(nd.Gs, cK2) + _pair(nd.smu, cQ) + 0.5 * _pair(nd.szmu, cLV1sq) - d1 * Cs1
        Ch2 = _pair(nd.Gh, cK2) + _pair(nd.hmu, cQ) + 0.5 * _pair(nd.hzmu, cLV1sq) - d1 * Ch1
        a2 = nd.sx * y2 + 0.5 * nd.sxx * y1 * y1 + Cs2
        b2 = nd.h * k2 + nd.hx * L * y2 + nd.hx * y1 * k1 + 0.5 * nd.hxx * L * y1 * y1 + L * Ch2
        if nd.active:
            a2 = a2 + nd.dsx * y1 + _pair(nd.dGs, cK) + _pair(nd.dsmu, cLV)
            b2 = b2 + nd.dh * k1 + nd.dhx * L * y1 + L * (_pair(nd.dGh, cK) + _pair(nd.dhmu, cLV))
        Y2[:, :, k + 1] = y2 + a2 * plan.dB1[:, :, k]
        K2[:, :, k + 1] = k2 + b2 * plan.dY[:, k : k + 1]
        _finite("second variation", Y2[:, :, k + 1] + K2[:, :, k + 1], k + 1)
    _, vstore = second_order_U(forward, K, Y1[:, :, K], K1[:, :, K], Y2[:, :, K], K2[:, :, K])
    V2[..., K] = vstore
    return VariationState(
        Y1, K1, first.V1, spike, first.eps, win, alt, Y2, K2, V2, first.drive_Y1, first.drive_K1
    )


# ---------------------------------------------------------------------------
# Taylor orders


def _rms_sup(d: np.ndarray) -> float:
    """RMS over samples of sup over time (time is the last axis)."""
    return float(np.sqrt(np.mean(np.max(np.abs(d), axis=-1) ** 2)))


def _slope(eps, err):
    eps, err = np.asarray(eps, float), np.asarray(err, float)
    if np.any(err <= 0):
        return float("nan")
    return float(np.polyfit(np.log(eps), np.log(err), 1)[0])


def ladder(t0: float, eps_values, alt_policy: ControlPolicy) -> list[SpikeSpec]:
    return [SpikeSpec(t0, float(e), alt_policy) for e in eps_values]


def taylor_orders(
    coeffs,
    control,
    spike_family,
    plan,
    scheme: str = "euler",
    tol: float = 1e-12,
    max_iter: int | None = None,
    base=None,
) -> dict:
    """Residual magnitudes of the first/second order expansions along an eps ladder.

    Each perturbed run reuses the plan (common random numbers). Slopes are
    log-log least squares fits against the effective window length (number
    of grid nodes in the window times dt).
    """
    spikes = list(spike_family)
    if len(spikes) < 4:
        raise ConfigurationError("eps ladder needs at least 4 points", module="mfvariation")
    epsl = [s.eps for s in spikes]
    if any(e <= 0 for e in epsl) or any(a <= b for a, b in zip(epsl, epsl[1:])):
        raise ConfigurationError("eps ladder must be positive and strictly decreasing", module="mfvariation")
    grid: TimeGrid = plan.grid
    max_iter = max_iter or grid.steps + 5
    if base is None:
        base = picard_forward(coeffs, control, plan, tol=tol, max_iter=max_iter, scheme=scheme)
    eff = [s.effective_eps(grid) for s in spikes]
    if len(set(eff)) < len(eff) or min(eff) <= 0:
        raise ConfigurationError(f"eps ladder collapses on the time grid (effective {eff})", module="mfvariation")
    rows = []
    for spike in spikes:
        pert = picard_forward(coeffs, spike_control(control, spike), plan, tol=tol, max_iter=max_iter, scheme=scheme)
        first = solve_first_variation(coeffs, base, control, spike, plan)
        var = solve_second_variation(coeffs, base, control, spike, plan, first)
        dX = pert.X - base.X
        dL = pert.L - base.L
        dU = pert.U - base.U
        rows.append(
            dict(
                eps=spike.eps,
                eps_eff=first.eps,
                X_e0=_rms_sup(dX),
                X_e1=_rms_sup(dX - var.Y1),
                X_e2=_rms_sup(dX - var.Y1 - var.Y2),
                L_e0=_rms_sup(dL),
                L_e1=_rms_sup(dL - var.K1),
                L_e2=_rms_sup(dL - var.K1 - var.K2),
                U_e0=_rms_sup(dU),
                U_e1=_rms_sup(dU - var.V1),
                U_e2=_rms_sup(dU - var.V1 - var.V2),
                smallness=_smallness(base, var),
                composite=_composite(base, pert, var),
            )
        )
    x = [r["eps_eff"] for r in rows]
    slopes = {}
    for q in ("X", "L", "U"):
        for e in ("e0", "e1", "e2"):
            slopes[f"{q}_{e}"] = _slope(x, [r[f"{q}_{e}"] for r in rows])
    return dict(rows=rows, slopes=slopes, base_cost=base.cost)


def _smallness(base, var) -> float:
    """max_t |E[Y1_t] + E[K1_t / L_t]| / sqrt(eps) for the test pair (1, 1/L)."""
    if var.eps == 0:
        return 0.0
    s = var.Y1.mean(axis=(0, 1)) + (var.K1 / base.L).mean(axis=(0, 1))
    return float(np.max(np.abs(s)) / np.sqrt(var.eps))


def _composite(base, pert, var) -> float:
    """RMS of the U second-order residual minus theta of the (X, L) residuals."""
    if base.coeffs.mode is not Mode.CONDITIONAL_LAW:
        return float("nan")
    rX = pert.X - base.X - var.Y1 - var.Y2
    rL = pert.L - base.L - var.K1 - var.K2
    rU = pert.U - base.U - var.V1 - var.V2
    th = theta_functional(np.moveaxis(rX, 1, 2), np.moveaxis(rL, 1, 2), np.moveaxis(base.X, 1, 2), np.moveaxis(base.L, 1, 2))
    return float(np.sqrt(np.mean((rU - th) ** 2)))
