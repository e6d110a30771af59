"""Adjoint BSDEs by backward Euler with least-squares regression.

At node k the conditional expectation given F_{t_k} is replaced by a linear
fit, across all samples, onto {1, X, L, U, X^2, X L, U^2}. Martingale
integrands come from fitting the increment times dB1/dt or dY/dt.

The measure-derivative terms of the generators ("star" terms) reuse the
y-grid operator of the variational solver. For a callback d_mu s evaluated
at the independent copy's state and the own point U:

    E_s(U) = interp(A, U) / S,            A_g = mean(weight * d_mu s(.; y_g))
    I_s(U) = (interp(int A, U) - <int A>) / S

where S = mean(L) and <.> is the L-weighted average over samples. These are
exactly the transposes of the cross terms in the variational solver, so the
duality pairing is an identity at the level of sample means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Mode
from .crossterms import measure_grids, own_U, state_fn_x
from .errors import ConfigurationError, NumericalBlowupError, RegressionError
from .forward import ev, ev_y

RIDGE = 1e-8


def regress_conditional(target, features, ridge: float = RIDGE, return_r2: bool = False):
    """Least-squares fitted values of ``target`` on the columns of ``features``.

    ``target`` may be (n,) or (n, r). Columns are rescaled before solving;
    if the design is rank deficient a ridge penalty ``ridge`` is added on the
    rescaled normal equations.
    """
    A = np.asarray(features, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    y = np.asarray(target, dtype=float)
    squeeze = y.ndim == 1
    Y = y[:, None] if squeeze else y
    n, p = A.shape
    if p < 1:
        raise ConfigurationError("regression needs at least one feature", module="mfadjoint")
    if n <= p:
        raise ConfigurationError(f"regression needs more samples ({n}) than features ({p})", module="mfadjoint")
    if Y.shape[0] != n:
        raise ConfigurationError("target and features have different sample counts", module="mfadjoint")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(Y))):
        raise RegressionError("non-finite regression input")
    scale = np.sqrt(np.mean(A * A, axis=0))
    scale[scale == 0] = 1.0
    As = A / scale
    coef, _, rank, _ = np.linalg.lstsq(As, Y, rcond=None)
    if rank < p:
        G = As.T @ As / n + ridge * np.eye(p)
        coef = np.linalg.solve(G, As.T @ Y / n)
    fitted = As @ coef
    if squeeze:
        fitted = fitted[:, 0]
    if not return_r2:
        return fitted
    resid = Y - (fitted[:, None] if squeeze else fitted)
    var = np.var(Y, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(var > 0, 1.0 - np.mean(resid**2, axis=0) / np.where(var > 0, var, 1.0), 1.0)
    return fitted, r2


def basis(forward, k) -> np.ndarray:
    """Regression features at node k, one row per sample.

    The spike indicator named in the design is constant across samples at a
    fixed node (the window is deterministic in time), so it is already
    spanned by the intercept and is left out.
    """
    X = forward.X[:, :, k].ravel()
    L = forward.L[:, :, k].ravel()
    U = own_U(forward, k).ravel()
    cols = [np.ones_like(X), X, L, U, X * X, X * L, U * U]
    return np.stack(cols, axis=1)


class _Fitter:
    """Regression at a node; fitted values are returned in (M, N) shape."""

    def __init__(self, forward, k, ridge):
        self.F = basis(forward, k)
        self.shape = forward.X.shape[:2]
        self.ridge = ridge
        self.r2 = []

    def __call__(self, *targets):
        T = np.stack([np.ravel(t) for t in targets], axis=1)
        fit, r2 = regress_conditional(T, self.F, self.ridge, return_r2=True)
        self.r2.append(r2)
        return [fit[:, c].reshape(self.shape) for c in range(T.shape[1])]


# ---------------------------------------------------------------------------
# star terms


class StarOps:
    """Per-node operator turning grid integrands into E(U) and I(U) terms."""

    def __init__(self, forward, k):
        self.fw = forward
        self.k = k
        self.mg = measure_grids(forward)[k]
        self.U = own_U(forward, k)
        L = forward.L[:, :, k]
        self.L = L
        self.n = L.size
        self.S = float(L.mean())
        self.cL = self.mg.push(self.U, L) / self.n
        self.y = self.mg.nodes
        t = forward.plan.grid.t(k)
        self.t = t
        self.x = forward.X[:, :, k]
        self.mu = forward.mu[k]
        self.u = forward.u[:, k : k + 1]

    def grid_mean(self, fn, weight=None, u=None):
        """A_g = mean over samples of weight * fn(t, X, mu, u; y_g)."""
        vals = ev_y(fn, self.t, self.x, self.mu, self.u if u is None else u, self.y)
        if weight is None:
            return vals.mean(axis=(0, 1))
        return np.einsum("mng,mn->g", vals, np.broadcast_to(weight, self.x.shape)) / self.n

    def E(self, A):
        return self.mg.interp(A, self.U) / self.S

    def I(self, A):
        G = self.mg.antideriv(A)
        avg = float(G @ self.cL) / self.S
        return (self.mg.interp(G, self.U) - avg) / self.S


def terminal_star(forward):
    """(E_Phi, I_Phi, Ez_Phi) at T for the terminal cost's measure derivatives."""
    K = forward.plan.grid.steps
    ops = StarOps(forward, K)
    x, mu = ops.x, ops.mu

    def gm(fn):
        vals = np.asarray(fn(x[..., None], mu, ops.y), dtype=float)
        return np.broadcast_to(vals, x.shape + (ops.y.size,)).mean(axis=(0, 1))

    A = gm(forward.coeffs.Phi_mu)
    Az = gm(forward.coeffs.Phi_zmu)
    return ops.E(A), ops.I(A), ops.E(Az)


def f_star(forward, k):
    ops = StarOps(forward, k)
    A = ops.grid_mean(forward.coeffs.f_mu)
    return ops.E(A), ops.I(A)


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True, eq=False)
class AdjointState:
    p1: np.ndarray
    q1: np.ndarray
    qc1: np.ndarray
    p2: np.ndarray
    qc2: np.ndarray
    q2: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    E_H: np.ndarray  # E~[H~*_mu] per sample and node
    Ez_H: np.ndarray  # E~[H~*_zmu]
    E_Phi: np.ndarray  # terminal E~[Phi~*_mu] per sample
    Ez_Phi: np.ndarray
    r2: np.ndarray  # (K, targets) regression R^2
    mode: Mode
    P1: np.ndarray | None = None
    Q11: np.ndarray | None = None
    Q12: np.ndarray | None = None
    P2: np.ndarray | None = None
    Q21: np.ndarray | None = None
    Q22: np.ndarray | None = None
    P_r2: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _check_finite(name, arr, k):
    if not np.all(np.isfinite(arr)):
        raise NumericalBlowupError(f"{name} non-finite at k={k}", module="mfadjoint")


def _generators(forward, k, q1, q2, ops=None):
    """alpha, beta, E~[H*_mu], E~[H*_zmu] at node k for given integrands."""
    cs = forward.coeffs
    ops = ops or StarOps(forward, k)
    t, x, mu, u, L = ops.t, ops.x, ops.mu, ops.u, ops.L
    sx = ev(cs.sigma_x, t, x, mu, u)
    hv = ev(cs.h, t, x, mu, u)
    hx = ev(cs.h_x, t, x, mu, u)
    fx = ev(cs.f_x, t, x, mu, u)
    A_s = ops.grid_mean(cs.sigma_mu, q1)
    A_h = ops.grid_mean(cs.h_mu, q2 * L)
    A_f = ops.grid_mean(cs.f_mu)
    Es, Eh, Ef = ops.E(A_s), ops.E(A_h), ops.E(A_f)
    Is, Ih, If = ops.I(A_s), ops.I(A_h), ops.I(A_f)
    Az = ops.grid_mean(cs.sigma_zmu, q1) + ops.grid_mean(cs.h_zmu, q2 * L) - ops.grid_mean(cs.f_zmu)
    EzH = ops.E(Az)
    EH = Es + Eh - Ef
    if cs.mode is Mode.CONDITIONAL_LAW:
        XU = x - ops.U
        alpha = sx * q1 + L * Es + hx * L * q2 + L * Eh - fx - L * Ef
        beta = XU * Es + Is + hv * q2 + XU * Eh + Ih - XU * Ef - If
    else:
        w = L * state_fn_x(forward, k)
        alpha = sx * q1 + w * Es + hx * L * q2 + w * Eh - fx - w * Ef
        beta = hv * q2 + Is + Ih - If
    return alpha, beta, EH, EzH


def solve_first_adjoint(coeffs, forward, control=None, plan=None, sweeps: int = 2, ridge: float = RIDGE) -> AdjointState:
    """Backward Euler for (p1, q1, qc1) and (p2, qc2, q2)."""
    if coeffs is not forward.coeffs and coeffs.mode is not forward.coeffs.mode:
        raise ConfigurationError("adjoint and forward disagree on the observation mode", module="mfadjoint")
    plan = plan or forward.plan
    if plan is not forward.plan and plan.content_hash != forward.plan.content_hash:
        raise ConfigurationError("adjoint and forward runs use different noise plans", module="mfadjoint")
    if sweeps < 1:
        raise ConfigurationError("sweeps must be >= 1", module="mfadjoint")
    grid = plan.grid
    K, dt = grid.steps, grid.dt
    shape = forward.X.shape
    p1, p2 = np.zeros(shape), np.zeros(shape)
    q1, qc1, qc2, q2 = (np.zeros(shape) for _ in range(4))
    alpha, beta = np.zeros(shape), np.zeros(shape)
    EH, EzH = np.zeros(shape), np.zeros(shape)
    r2 = np.zeros((K, 6))
    e1, e2 = np.zeros(shape), np.zeros(shape)  # residuals of the q1, q2 fits

    XT, LT = forward.X[:, :, K], forward.L[:, :, K]
    EPhi, IPhi, EzPhi = terminal_star(forward)
    Phix = np.broadcast_to(np.asarray(coeffs.Phi_x(XT, forward.mu[K]), dtype=float), XT.shape)
    if coeffs.mode is Mode.CONDITIONAL_LAW:
        p1[:, :, K] = -Phix - LT * EPhi
        p2[:, :, K] = -(XT - own_U(forward, K)) * EPhi - IPhi
    else:
        p1[:, :, K] = -Phix - LT * state_fn_x(forward, K) * EPhi
        p2[:, :, K] = -IPhi

    for k in range(K - 1, -1, -1):
        fit = _Fitter(forward, k, ridge)
        ops = StarOps(forward, k)
        a1, a2 = p1[:, :, k + 1], p2[:, :, k + 1]
        dB = plan.dB1[:, :, k]
        dY = np.broadcast_to(plan.dY[:, k : k + 1], dB.shape)
        c1, c2 = fit(a1, a2)
        for s in range(sweeps):
            r1, r2_ = a1 - c1, a2 - c2
            g1, gc1, gc2, g2 = fit(r1 * dB / dt, r1 * dY / dt, r2_ * dB / dt, r2_ * dY / dt)
            al, be, eh, ezh = _generators(forward, k, g1, g2, ops)
            n1, n2 = fit(a1 + al * dt, a2 + be * dt)
            # next sweep: residual against p_k - generator dt (a pure martingale increment)
            c1, c2 = n1 - al * dt, n2 - be * dt
        p1[:, :, k], p2[:, :, k] = n1, n2
        q1[:, :, k], qc1[:, :, k], qc2[:, :, k], q2[:, :, k] = g1, gc1, gc2, g2
        e1[:, :, k], e2[:, :, k] = r1 * dB / dt - g1, r2_ * dY / dt - g2
        alpha[:, :, k], beta[:, :, k] = al, be
        EH[:, :, k], EzH[:, :, k] = eh, ezh
        r2[k] = np.concatenate([fit.r2[-2], fit.r2[-1]])
        _check_finite("first adjoint", n1 + n2 + g1 + g2, k)
    # H*-terms at T are not needed by the generators but are used by the M/R terms
    al, be, eh, ezh = _generators(forward, K, np.zeros(shape[:2]), np.zeros(shape[:2]))
    EH[:, :, K], EzH[:, :, K] = eh, ezh
    return AdjointState(
        p1, q1, qc1, p2, qc2, q2, alpha, beta, EH, EzH, EPhi, EzPhi, r2, coeffs.mode,
        extras={"q1_resid": e1, "q2_resid": e2},
    )


def hxx_path(forward, first: AdjointState) -> np.ndarray:
    """H_xx = sigma_xx q1 + h_xx L q2 - f_xx at every sample and node k < K."""
    cs = forward.coeffs
    grid = forward.plan.grid
    out = np.zeros(forward.X.shape)
    for k in range(grid.steps):
        t, x, mu, u = grid.t(k), forward.X[:, :, k], forward.mu[k], forward.u[:, k : k + 1]
        out[:, :, k] = (
            ev(cs.sigma_xx, t, x, mu, u) * first.q1[:, :, k]
            + ev(cs.h_xx, t, x, mu, u) * forward.L[:, :, k] * first.q2[:, :, k]
            - ev(cs.f_xx, t, x, mu, u)
        )
    return out


def solve_second_adjoint(coeffs, forward, control, first: AdjointState, plan=None, ridge: float = RIDGE) -> AdjointState:
    """Second-order adjoint.

    Conditional-law mode: dP1 = -H_xx dt + Q11 dB1 + Q12 dY, P1_T = -Phi_xx,
    so P1_t = E[-Phi_xx(T) + int_t^T H_xx ds | F_t], fitted directly from the
    pathwise sums. State-functional mode: the coupled pair (P1, P2) with its
    Q-coupling terms, by backward Euler.
    """
    plan = plan or forward.plan
    grid = plan.grid
    K, dt = grid.steps, grid.dt
    shape = forward.X.shape
    XT = forward.X[:, :, K]
    H = hxx_path(forward, first)
    Phixx = np.broadcast_to(np.asarray(coeffs.Phi_xx(XT, forward.mu[K]), dtype=float), XT.shape)
    P1, Q11, Q12 = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    P2 = Q21 = Q22 = None
    pr2 = np.zeros((K, 3))
    eP = np.zeros(shape)  # residual of the P1 fit
    if coeffs.mode is Mode.CONDITIONAL_LAW:
        P1[:, :, K] = -Phixx
        tail = -Phixx.copy()
        for k in range(K - 1, -1, -1):
            fit = _Fitter(forward, k, ridge)
            tail = tail + H[:, :, k] * dt
            (P1k,) = fit(tail)
            nxt = P1[:, :, k + 1]
            (c,) = fit(nxt)
            r = nxt - c
            dB = plan.dB1[:, :, k]
            dY = np.broadcast_to(plan.dY[:, k : k + 1], dB.shape)
            Q11[:, :, k], Q12[:, :, k] = fit(r * dB / dt, r * dY / dt)
            P1[:, :, k] = P1k
            eP[:, :, k] = tail - P1k
            pr2[k] = [fit.r2[0][0], fit.r2[2][0], fit.r2[2][1]]
            _check_finite("second adjoint", P1k, k)
    else:
        P2, Q21, Q22 = np.zeros(shape), np.zeros(shape), np.zeros(shape)
        LT = forward.L[:, :, K]
        phx = state_fn_x(forward, K)
        P1[:, :, K] = -Phixx - LT * phx**2 * first.Ez_Phi
        P2[:, :, K] = -phx * first.E_Phi
        for k in range(K - 1, -1, -1):
            fit = _Fitter(forward, k, ridge)
            t, x, mu, u, L = grid.t(k), forward.X[:, :, k], forward.mu[k], forward.u[:, k : k + 1], forward.L[:, :, k]
            sx = ev(coeffs.sigma_x, t, x, mu, u)
            hv = ev(coeffs.h, t, x, mu, u)
            hx = ev(coeffs.h_x, t, x, mu, u)
            phx = state_fn_x(forward, k)
            a1, a2 = P1[:, :, k + 1], P2[:, :, k + 1]
            c1, c2 = fit(a1, a2)
            r1, r2_ = a1 - c1, a2 - c2
            dB = plan.dB1[:, :, k]
            dY = np.broadcast_to(plan.dY[:, k : k + 1], dB.shape)
            g11, g12, g21, g22 = fit(r1 * dB / dt, r1 * dY / dt, r2_ * dB / dt, r2_ * dY / dt)
            Hxl = hx * first.q2[:, :, k]
            gen1 = H[:, :, k] + L * phx**2 * first.Ez_H[:, :, k] + sx**2 * c1 + 2 * sx * g11 + 2 * L * hx * g22
            gen2 = Hxl + phx * first.E_H[:, :, k] + sx * g21 + hv * g22
            P1[:, :, k], P2[:, :, k] = fit(a1 + gen1 * dt, a2 + gen2 * dt)
            eP[:, :, k] = a1 + gen1 * dt - P1[:, :, k]
            Q11[:, :, k], Q12[:, :, k], Q21[:, :, k], Q22[:, :, k] = g11, g12, g21, g22
            pr2[k] = [fit.r2[-1][0], fit.r2[-2][0], fit.r2[-2][3]]
            _check_finite("second adjoint", P1[:, :, k] + P2[:, :, k], k)
    from dataclasses import replace

    extras = dict(first.extras, P1_resid=eP)
    return replace(first, P1=P1, Q11=Q11, Q12=Q12, P2=P2, Q21=Q21, Q22=Q22, P_r2=pr2, extras=extras)


# ---------------------------------------------------------------------------
# duality


def duality_check(coeffs, forward, variation, adjoint: AdjointState) -> dict:
    """Both sides of the first-order duality relation on one set of samples.

    LHS = mean(p1_T Y1_T + p2_T K1_T). RHS = time integral of the cost
    derivative pairing plus the window term (q1 d_sigma + q2 L d_h) 1_E.
    The control-variate form subtracts from LHS only terms whose conditional
    mean given F_{t_k} is exactly zero (products of F_{t_k}-measurable
    factors with dB1, dY, dB1^2 - dt, dB1 dY), so it estimates the same
    quantity with lower variance.
    """
    plan = forward.plan
    if variation.Y1.shape != forward.X.shape or adjoint.p1.shape != forward.X.shape:
        raise ConfigurationError("duality inputs come from different plans", module="mfadjoint")
    grid = plan.grid
    K, dt = grid.steps, grid.dt
    Y1, K1 = variation.Y1, variation.K1
    lhs_s = adjoint.p1[:, :, K] * Y1[:, :, K] + adjoint.p2[:, :, K] * K1[:, :, K]
    rhs_s = np.zeros(lhs_s.shape)
    gen_s = np.zeros(lhs_s.shape)
    cv_s = np.zeros(lhs_s.shape)
    for k in range(K):
        t, x, mu, u, L = grid.t(k), forward.X[:, :, k], forward.mu[k], forward.u[:, k : k + 1], forward.L[:, :, k]
        Ef, If = f_star(forward, k)
        fx = ev(coeffs.f_x, t, x, mu, u)
        y1, k1 = Y1[:, :, k], K1[:, :, k]
        if coeffs.mode is Mode.CONDITIONAL_LAW:
            term = y1 * (fx + L * Ef) + k1 * ((x - own_U(forward, k)) * Ef + If)
        else:
            term = y1 * (fx + Ef * L * state_fn_x(forward, k)) + k1 * If
        if variation.window[k]:
            v = variation.alt[:, k : k + 1]
            ds = ev(coeffs.sigma, t, x, mu, v) - ev(coeffs.sigma, t, x, mu, u)
            dh = ev(coeffs.h, t, x, mu, v) - ev(coeffs.h, t, x, mu, u)
            term = term + adjoint.q1[:, :, k] * ds + adjoint.q2[:, :, k] * L * dh
        rhs_s += term * dt
        # pieces for the exact-zero-mean control variate
        dB = plan.dB1[:, :, k]
        dY = plan.dY[:, k : k + 1]
        dY1 = Y1[:, :, k + 1] - y1
        dK1 = K1[:, :, k + 1] - k1
        a = variation.drive_Y1[:, :, k]
        b = variation.drive_K1[:, :, k]
        p1k, p2k = adjoint.p1[:, :, k], adjoint.p2[:, :, k]
        al, be = adjoint.alpha[:, :, k], adjoint.beta[:, :, k]
        q1, qc1, qc2, q2 = (adjoint.q1[:, :, k], adjoint.qc1[:, :, k], adjoint.qc2[:, :, k], adjoint.q2[:, :, k])
        cv_s += (
            y1 * (q1 * dB + qc1 * dY)
            + (p1k - al * dt) * dY1
            + q1 * a * (dB * dB - dt)
            + qc1 * a * dY * dB
            + k1 * (qc2 * dB + q2 * dY)
            + (p2k - be * dt) * dK1
            + q2 * b * (dY * dY - dt)
            + qc2 * b * dB * dY
        )
        gen_s += (-y1 * al + a * q1 - k1 * be + b * q2) * dt
    M = lhs_s.shape[0]

    def mean_se(s):
        per = s.mean(axis=1)
        return float(per.mean()), float(per.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0

    lhs, lhs_se = mean_se(lhs_s)
    rhs, rhs_se = mean_se(rhs_s)
    lcv, lcv_se = mean_se(lhs_s - cv_s)
    diff, diff_se = mean_se(lhs_s - rhs_s)
    dcv, dcv_se = mean_se(lhs_s - cv_s - rhs_s)
    gen, _ = mean_se(gen_s)
    eps = variation.eps
    floor = eps * eps

    def rel(d, a, b):
        den = max(abs(a), abs(b), floor)
        return abs(d) / den if den > 0 else 0.0

    return dict(
        eps=eps,
        lhs=lhs,
        lhs_stderr=lhs_se,
        rhs=rhs,
        rhs_stderr=rhs_se,
        lhs_cv=lcv,
        lhs_cv_stderr=lcv_se,
        residual=diff,
        residual_stderr=diff_se,
        relative=rel(diff, lhs, rhs),
        residual_cv=dcv,
        residual_cv_stderr=dcv_se,
        relative_cv=rel(dcv, lcv, rhs),
        residual_over_eps=abs(diff) / eps if eps > 0 else 0.0,
        residual_cv_over_eps=abs(dcv) / eps if eps > 0 else 0.0,
        generator_identity_gap=abs(gen - rhs),
    )
