"""Maximum-principle scan: Hamiltonian gaps with the M and R corrections.

For a node k and a candidate value v the scanned quantity is

    E^Q[ dH + P1 dsigma^2 / 2 + M dsigma^2 + R dh1^2 | F_t^Y ]

(conditional-law mode) or E^Q[ dH + P1 dsigma^2 / 2 | F_t^Y ] (state-
functional mode). At an optimal control it must be <= 0. Quantities that are
F_t-measurable are averaged over the inner samples of a path, which is their
F_t^Y conditional mean. M and R look into the future of Y; per-path values
are regressed on Y-path features at t.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adjoint import basis, regress_conditional
from .core import BlockPolicy, Mode
from .errors import ConfigurationError, UnsupportedModeError
from .forward import ev, picard_forward
from .noise import default_threads

MAX_POLICIES = 4096


def hamiltonian(t, x, l, mu, v, q1, q2, coeffs):
    """H = sigma q1 + h l q2 - f."""
    return (
        np.asarray(coeffs.sigma(t, x, mu, v), dtype=float) * q1
        + np.asarray(coeffs.h(t, x, mu, v), dtype=float) * l * q2
        - np.asarray(coeffs.f(t, x, mu, v), dtype=float)
    )


def _h_increments(forward, coeffs):
    """Per-sample increments h_x dY - h h_x dt, shape (M, N, K)."""
    grid = forward.plan.grid
    K, dt = grid.steps, grid.dt
    out = np.zeros(forward.X.shape[:2] + (K,))
    for k in range(K):
        t, x, mu, u = grid.t(k), forward.X[:, :, k], forward.mu[k], forward.u[:, k : k + 1]
        hx = ev(coeffs.h_x, t, x, mu, u)
        hv = ev(coeffs.h, t, x, mu, u)
        out[:, :, k] = hx * forward.plan.dY[:, k : k + 1] - hv * hx * dt
    return out


def h_window(forward, coeffs, s_index: int, t_index: int) -> np.ndarray:
    """h(s, t) = int_s^t h_x dY - int_s^t h h_x dr on the grid, per sample."""
    K = forward.plan.grid.steps
    if not 0 <= s_index <= t_index <= K:
        raise ConfigurationError(f"need 0 <= s <= t <= {K}, got s={s_index}, t={t_index}", module="mfsmp")
    inc = _h_increments(forward, coeffs)
    return inc[:, :, s_index:t_index].sum(axis=2)


def y_features(Y, k) -> np.ndarray:
    """F_t^Y regression features {1, Y_t, Y_t^2, running max of Y}, one row per path."""
    y = Y[:, k]
    return np.stack([np.ones_like(y), y, y * y, Y[:, : k + 1].max(axis=1)], axis=1)


@dataclass(frozen=True, eq=False)
class MR:
    M: np.ndarray  # (M_outer, K+1), regressed on F_t^Y features
    R: np.ndarray
    M_raw: np.ndarray  # per-path F_T^Y values before the tower regression
    R_raw: np.ndarray
    M_r2: np.ndarray
    R_r2: np.ndarray


def compute_MR(coeffs, forward, first_adjoint, ridge: float = 1e-8) -> MR:
    """M_t and R_t per outer path and node.

    M_t = -E~[Phi~*_mu(T)] L_T E^P[h(t,T)|F_T^Y]
          + int_t^T (E~[H~*_mu(s)] + E^Q[h_x q2 | F_s^Y]) L_s E^P[h(t,s)|F_s^Y] ds
    (H_x + f_x = h_x L q2 under the structural split.) R_t is the two-block
    expression in phi(X_t) with A_s = E^P[(X_s - U_s) phi(X_t) | F_s^Y].
    The outer E^Q[. | F_t^Y] is an inner average followed by regression.
    """
    if coeffs.mode is not Mode.CONDITIONAL_LAW:
        raise UnsupportedModeError("M and R are defined for the conditional-law mode", module="mfsmp")
    if not coeffs.has_h3:
        raise UnsupportedModeError("M and R need the structural split (sigma x-free, h = h0 + phi h1)", module="mfsmp")
    grid = forward.plan.grid
    K, dt = grid.steps, grid.dt
    X, L = forward.X, forward.L
    Mo, N = X.shape[:2]
    Lbar = forward.Lbar  # (M, K+1)
    U = forward.U_samples
    adj = first_adjoint
    # per-path constants: E~ terms are functions of the own U only
    EPhi = adj.E_Phi[:, 0]
    EzPhi = adj.Ez_Phi[:, 0]
    EH = adj.E_H[:, 0, :]
    EzH = adj.Ez_H[:, 0, :]

    # ---- M
    C = np.concatenate([np.zeros((Mo, N, 1)), np.cumsum(_h_increments(forward, coeffs), axis=2)], axis=2)
    # mean_i L_s h(t, s) = mean_i L_s C_s - mean_i L_s C_t
    LC_ss = (L * C).mean(axis=1)  # (M, s)
    LC_ts = np.einsum("mis,mit->mts", L, C) / N  # (M, t, s)
    LH = LC_ss[:, None, :] - LC_ts
    hxq2 = np.zeros((Mo, K + 1))
    for k in range(K):
        t, x, mu, u = grid.t(k), X[:, :, k], forward.mu[k], forward.u[:, k : k + 1]
        hxq2[:, k] = (ev(coeffs.h_x, t, x, mu, u) * adj.q2[:, :, k]).mean(axis=1)
    weight = (EH + hxq2) * dt  # (M, s); s = K carries no dt mass
    weight[:, K] = 0.0
    upper = np.triu(np.ones((K + 1, K + 1)))  # s >= t
    M_raw = -EPhi[:, None] * LH[:, :, K] + np.einsum("mts,ms,ts->mt", LH, weight, upper)

    # ---- R
    phi = np.asarray(coeffs.phi_h(X), dtype=float)
    phi = np.broadcast_to(phi, X.shape)
    m = np.einsum("mis,mit->mts", L, phi) / N  # mean_i L_s phi(X_t)
    A = np.einsum("mis,mit->mts", L * (X - U), phi) / N / Lbar[:, None, :]
    Pphi = m / Lbar[:, None, :]

    def block(Eval, Ezval, s):
        a = A[:, :, s]
        brace = Eval[:, None] * m[:, :, s] - Eval[:, None] * Lbar[:, None, s] * Pphi[:, :, s]
        return a * brace + 0.5 * a * a * Ezval[:, None] * Lbar[:, None, s]

    R_raw = -block(EPhi, EzPhi, K)
    for s in range(K):
        R_raw[:, : s + 1] += dt * block(EH[:, s], EzH[:, s], s)[:, : s + 1]

    Mr = np.empty_like(M_raw)
    Rr = np.empty_like(R_raw)
    m_r2 = np.zeros(K + 1)
    r_r2 = np.zeros(K + 1)
    Y = forward.Y
    for k in range(K + 1):
        F = y_features(Y, k)
        fit, r2 = regress_conditional(np.stack([M_raw[:, k], R_raw[:, k]], axis=1), F, ridge, return_r2=True)
        Mr[:, k], Rr[:, k] = fit[:, 0], fit[:, 1]
        m_r2[k], r_r2[k] = r2
    return MR(Mr, Rr, M_raw, R_raw, m_r2, r_r2)


@dataclass(frozen=True, eq=False)
class SMPReport:
    candidates: np.ndarray
    gap: np.ndarray  # (V, K) P-weighted mean over paths
    gap_stderr: np.ndarray  # path dispersion and regression error in quadrature
    gap_path_max: np.ndarray
    gap_paths: np.ndarray  # (V, M, K)
    M: np.ndarray | None
    R: np.ndarray | None
    Gamma1: np.ndarray
    Gamma: np.ndarray
    verdict: float
    verdict_at: tuple
    mode: Mode
    diagnostics: dict = field(default_factory=dict)
    label: str = "optimality relative to piecewise-constant block policies"

    def passes(self, tol: float = 0.02, n_se: float = 3.0) -> bool:
        return bool(np.all(self.gap <= tol + n_se * self.gap_stderr))


def weighted_mean_se(values, weights):
    """P-weighted mean over paths with the self-normalised standard error."""
    w = np.asarray(weights, dtype=float)
    g = np.asarray(values, dtype=float)
    sw = w.sum(axis=-1)
    mean = (w * g).sum(axis=-1) / sw
    dev = g - mean[..., None]
    se = np.sqrt((w * w * dev * dev).sum(axis=-1)) / sw
    return mean, se


def _influence(F, c, e):
    """Per-row influence of OLS estimation error on sum(c * fitted).

    The fitted coefficients deviate by (F'F)^+ F' e, so sum(c * fitted)
    deviates by sum_s z_s with z_s = (F (F'F)^+ F' c)_s e_s.
    """
    a = F.T @ c
    return (F @ (np.linalg.pinv(F.T @ F) @ a)) * e


def smp_scan(coeffs, forward, adjoints, candidates, mode=None, mr: MR | None = None) -> SMPReport:
    """Conditional Hamiltonian gap for every candidate and node k < K."""
    mode = coeffs.mode if mode is None else Mode.parse(mode)
    if mode is not coeffs.mode or adjoints.mode is not coeffs.mode or forward.coeffs.mode is not coeffs.mode:
        raise ConfigurationError("scan mode, coefficients, forward and adjoint must agree", module="mfsmp")
    if adjoints.P1 is None:
        raise ConfigurationError("second adjoint not solved", module="mfsmp")
    cands = np.asarray(sorted(set(float(c) for c in candidates)), dtype=float)
    U_set = set(float(u) for u in forward.control.U_set) if hasattr(forward.control, "U_set") else None
    if U_set is not None and not set(cands) <= U_set:
        raise ConfigurationError(f"candidates {sorted(set(cands) - U_set)} are not in U_set", module="mfsmp")
    grid = forward.plan.grid
    K = grid.steps
    X, L = forward.X, forward.L
    Mo = X.shape[0]
    main = mode is Mode.CONDITIONAL_LAW
    if main and mr is None:
        mr = compute_MR(coeffs, forward, adjoints)
    N = X.shape[1]
    paths = np.zeros((cands.size, Mo, K))
    reg_var = np.zeros((cands.size, K))
    w_all = forward.Lbar
    e1 = adjoints.extras.get("q1_resid")
    e2 = adjoints.extras.get("q2_resid")
    eP = adjoints.extras.get("P1_resid")
    for k in range(K):
        t, x, l, mu = grid.t(k), X[:, :, k], L[:, :, k], forward.mu[k]
        u = forward.u[:, k : k + 1]
        q1, q2, P1 = adjoints.q1[:, :, k], adjoints.q2[:, :, k], adjoints.P1[:, :, k]
        Hu = hamiltonian(t, x, l, mu, u, q1, q2, coeffs)
        su = np.broadcast_to(np.asarray(coeffs.sigma(t, x, mu, u), dtype=float), x.shape)
        for c, v in enumerate(cands):
            vv = np.full_like(u, v)
            dH = hamiltonian(t, x, l, mu, vv, q1, q2, coeffs) - Hu
            ds = np.broadcast_to(np.asarray(coeffs.sigma(t, x, mu, vv), dtype=float), x.shape) - su
            g = (dH + 0.5 * P1 * ds * ds).mean(axis=1)
            if main:
                dh1 = np.broadcast_to(
                    np.asarray(coeffs.h1(t, mu, vv), dtype=float) - np.asarray(coeffs.h1(t, mu, u), dtype=float),
                    (Mo, 1),
                )[:, 0]
                ds_path = ds[:, 0]
                g = g + mr.M[:, k] * ds_path**2 + mr.R[:, k] * dh1**2
            paths[c, :, k] = g
            # regression error shared across paths, clustered by outer path
            if e1 is not None and eP is not None:
                F = basis(forward, k)
                wn = (w_all[:, k] / w_all[:, k].sum())[:, None] / N * np.ones_like(x)
                ds_s = ds
                dh_s = np.broadcast_to(
                    np.asarray(coeffs.h(t, x, mu, vv), dtype=float) - np.asarray(coeffs.h(t, x, mu, u), dtype=float),
                    x.shape,
                )
                z = (
                    _influence(F, (wn * ds_s).ravel(), e1[:, :, k].ravel())
                    + _influence(F, (wn * dh_s * l).ravel(), e2[:, :, k].ravel())
                    + _influence(F, (0.5 * wn * ds_s * ds_s).ravel(), eP[:, :, k].ravel())
                ).reshape(Mo, N).sum(axis=1)
                if main:
                    Fy = y_features(forward.Y, k)
                    wp = w_all[:, k] / w_all[:, k].sum()
                    z = z + _influence(Fy, wp * ds_path**2, mr.M_raw[:, k] - mr.M[:, k])
                    z = z + _influence(Fy, wp * dh1**2, mr.R_raw[:, k] - mr.R[:, k])
                reg_var[c, k] = float(np.sum(z * z))
    w = forward.Lbar[:, :K]
    gap = np.zeros((cands.size, K))
    se = np.zeros((cands.size, K))
    for c in range(cands.size):
        gap[c], se[c] = weighted_mean_se(paths[c].T, w.T)
    path_se = se.copy()
    se = np.sqrt(se * se + reg_var)
    idx = np.unravel_index(int(np.argmax(gap)), gap.shape)
    Lb = forward.Lbar[:, None, :]
    diag = {"path_stderr": path_se, "regression_stderr": np.sqrt(reg_var)}
    if main:
        diag.update(M_r2=mr.M_r2, R_r2=mr.R_r2)
    return SMPReport(
        cands,
        gap,
        se,
        paths.max(axis=1),
        paths,
        None if mr is None else mr.M,
        None if mr is None else mr.R,
        L / Lb,
        np.broadcast_to(1.0 / Lb, L.shape),
        float(gap[idx]),
        (float(cands[idx[0]]), int(idx[1])),
        mode,
        diag,
    )


def brute_force_control(
    coeffs,
    plan,
    U_set,
    blocks: int,
    tol: float = 1e-3,
    max_iter: int = 25,
    scheme: str = "log",
    threads: int | None = None,
):
    """Enumerate block-constant deterministic policies; return (argmin, cost table).

    The table maps each value tuple to (cost, stderr) and is ordered
    lexicographically; ties go to the lexicographically first tuple.
    """
    vals = sorted(set(float(u) for u in U_set))
    if not vals:
        raise ConfigurationError("U_set is empty", module="mfsmp")
    if blocks < 1:
        raise ConfigurationError("blocks must be >= 1", module="mfsmp")
    if len(vals) ** blocks > MAX_POLICIES:
        raise ConfigurationError(
            f"|U_set|^blocks = {len(vals) ** blocks} exceeds the cap of {MAX_POLICIES}", module="mfsmp"
        )
    combos = list(itertools.product(vals, repeat=blocks))

    def run(c):
        fw = picard_forward(coeffs, BlockPolicy(c, tuple(vals)), plan, tol=tol, max_iter=max_iter, scheme=scheme)
        return fw.cost, fw.cost_stderr

    n = threads or default_threads()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(run, combos))
    else:
        results = [run(c) for c in combos]
    table = dict(zip(combos, results))
    best = combos[0]
    for c in combos[1:]:
        if table[c][0] < table[best][0]:
            best = c
    return BlockPolicy(best, tuple(vals)), table
