"""Shared per-node machinery for the mean-field cross terms.

Both the variational solver and the adjoint solver build their y-grids here,
so the two sides of the duality pairing see the same quadrature operator.
"""

from __future__ import annotations

import numpy as np

from .meanfield import MeasureGrid


def measure_grids(forward) -> list[MeasureGrid]:
    """One y-grid per node, spanning every U value and every atom of mu_k."""
    cache = forward.__dict__.get("_grids")
    if cache is not None:
        return cache
    U = forward.U
    grids = []
    for k in range(forward.X.shape[2]):
        pts = np.concatenate([np.ravel(U[..., k]), forward.mu[k].samples])
        grids.append(MeasureGrid(pts))
    object.__setattr__(forward, "_grids", grids)
    return grids


def own_U(forward, k: int) -> np.ndarray:
    """U at node k broadcast to (M, N)."""
    return forward.U_samples[:, :, k]


def theta_per_sample(forward, k, Y1, K1):
    """First-order perturbation of U at node k, one value per sample.

    Conditional-law mode: theta(Y1, K1) per path; state-functional mode:
    phi_x * Y1.
    """
    from .core import Mode, theta_functional

    X, L = forward.X[:, :, k], forward.L[:, :, k]
    if forward.coeffs.mode is Mode.CONDITIONAL_LAW:
        v = theta_functional(Y1, K1, X, L)
        return np.broadcast_to(v[:, None], X.shape), v
    phix = np.broadcast_to(
        np.asarray(forward.coeffs.state_fn_x(forward.plan.grid.t(k), X, forward.Y[:, : k + 1]), dtype=float), X.shape
    )
    v = phix * Y1
    return v, v


def state_fn_x(forward, k):
    X = forward.X[:, :, k]
    return np.broadcast_to(
        np.asarray(forward.coeffs.state_fn_x(forward.plan.grid.t(k), X, forward.Y[:, : k + 1]), dtype=float), X.shape
    )
