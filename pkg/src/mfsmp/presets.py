"""Built-in coefficient sets.

The mean-field channel of the richer presets goes through the second moment
v(mu) = int y^2 mu(dy), squashed by g(v) = v / (1 + v). A dependence on the
mean of mu alone would be inert here: X has no drift, so the P-mean of U
stays at x0 for every control.
"""

from __future__ import annotations

import numpy as np

from .core import CoefficientSet, Mode
from .errors import ConfigurationError

PRESETS = (
    "zero-h",
    "control-only-sigma",
    "mean-feedback",
    "linear-filtering",
    "smp-reference",
    "appendix-compatible",
)

# per-block targets of the control penalty; optimum is (0, 1, 1, 0)
REFERENCE_TARGETS = (-0.5, 1.5, 1.5, -0.5)


def _v(mu):
    return mu.moment(2)


def _g(v):
    return v / (1.0 + v)


def _g1(v):
    return 1.0 / (1.0 + v) ** 2


def _zero(*args):
    return 0.0


def _one(*args):
    return 1.0


def block_target(t, targets, horizon=1.0):
    nb = len(targets)
    b = np.minimum((np.asarray(t) / horizon * nb).astype(int), nb - 1)
    return np.asarray(targets, dtype=float)[b]


def zero_h(x0: float = 0.5) -> CoefficientSet:
    """No observation drift, so L = 1; sigma feeds back on the second moment."""
    return CoefficientSet(
        x0=x0,
        sigma=lambda t, x, mu, u: 0.5 + 0.3 * u + 0.2 * _g(_v(mu)),
        sigma_mu=lambda t, x, mu, u, y: 0.2 * _g1(_v(mu)) * 2.0 * y,
        sigma_zmu=lambda t, x, mu, u, y: 0.4 * _g1(_v(mu)) + 0.0 * y,
        f=lambda t, x, mu, u: 0.5 * x * x,
        f_x=lambda t, x, mu, u: x,
        f_xx=_one,
        Phi=lambda x, mu: 0.5 * x * x,
        Phi_x=lambda x, mu: x,
        Phi_xx=_one,
        sigma_x_is_zero=True,
        h0=_zero,
        h1=_zero,
        phi_h=_zero,
        phi_h_x=_zero,
        bound=10.0,
        name="zero-h",
    )


def control_only_sigma(c: float = 0.0, x0: float = 0.0) -> CoefficientSet:
    """sigma = sigma(t, u), h = 0, Phi(x) = x, f = c x: linear adjoint with a closed form."""
    return CoefficientSet(
        x0=x0,
        sigma=lambda t, x, mu, u: 0.5 + 0.5 * u,
        f=lambda t, x, mu, u: c * x,
        f_x=lambda t, x, mu, u: c + 0.0 * x,
        Phi=lambda x, mu: x,
        Phi_x=lambda x, mu: 1.0 + 0.0 * x,
        sigma_x_is_zero=True,
        h0=_zero,
        h1=_zero,
        phi_h=_zero,
        phi_h_x=_zero,
        bound=10.0,
        name="control-only-sigma",
    )


def mean_feedback(x0: float = 1.0) -> CoefficientSet:
    """sigma = 1 + mean(mu)/4, h = 0."""
    return CoefficientSet(
        x0=x0,
        sigma=lambda t, x, mu, u: 1.0 + 0.25 * mu.mean(),
        sigma_mu=lambda t, x, mu, u, y: 0.25 + 0.0 * y,
        f=lambda t, x, mu, u: 0.5 * x * x,
        f_x=lambda t, x, mu, u: x,
        f_xx=_one,
        Phi=lambda x, mu: 0.5 * x * x,
        Phi_x=lambda x, mu: x,
        Phi_xx=_one,
        sigma_x_is_zero=True,
        h0=_zero,
        h1=_zero,
        phi_h=_zero,
        phi_h_x=_zero,
        bound=10.0,
        name="mean-feedback",
    )


def linear_filtering(x0: float = 0.0) -> CoefficientSet:
    """sigma = 1, h(x) = x: the Kalman-Bucy setting."""
    return CoefficientSet(
        x0=x0,
        sigma=_one,
        h=lambda t, x, mu, u: x,
        h_x=lambda t, x, mu, u: 1.0 + 0.0 * x,
        f=lambda t, x, mu, u: 0.5 * x * x,
        f_x=lambda t, x, mu, u: x,
        f_xx=_one,
        Phi=lambda x, mu: 0.5 * x * x,
        Phi_x=lambda x, mu: x,
        Phi_xx=_one,
        sigma_x_is_zero=True,
        h0=lambda t, x, mu: x,
        h1=_zero,
        phi_h=lambda x: 0.0 * x,
        phi_h_x=lambda x: 0.0 * x,
        name="linear-filtering",
    )


def smp_reference(kappa: float = 0.5, targets=REFERENCE_TARGETS, x0: float = 0.2, horizon: float = 1.0) -> CoefficientSet:
    """Structured preset with mean-field terms in every coefficient.

    sigma = 0.5 + 0.3 u + 0.15 g(v)                  (x-free)
    h     = tanh(x) (0.5 + h1),  h1 = 0.5 u + 0.2 g(v)
    f     = x^2/2 + v/2 + kappa (u - a(t))^2,  Phi = x^2/2 + v/2
    with a(t) piecewise constant on four blocks.
    """

    def h1(t, mu, u):
        return 0.5 * u + 0.2 * _g(_v(mu))

    def a(t):
        return block_target(t, targets, horizon)

    return CoefficientSet(
        x0=x0,
        sigma=lambda t, x, mu, u: 0.5 + 0.3 * u + 0.15 * _g(_v(mu)) + 0.0 * x,
        sigma_mu=lambda t, x, mu, u, y: 0.3 * _g1(_v(mu)) * y + 0.0 * x,
        sigma_zmu=lambda t, x, mu, u, y: 0.3 * _g1(_v(mu)) + 0.0 * (x + y),
        h=lambda t, x, mu, u: np.tanh(x) * (0.5 + h1(t, mu, u)),
        h_x=lambda t, x, mu, u: (1.0 - np.tanh(x) ** 2) * (0.5 + h1(t, mu, u)),
        h_xx=lambda t, x, mu, u: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2) * (0.5 + h1(t, mu, u)),
        h_mu=lambda t, x, mu, u, y: np.tanh(x) * 0.4 * _g1(_v(mu)) * y,
        h_zmu=lambda t, x, mu, u, y: np.tanh(x) * 0.4 * _g1(_v(mu)) + 0.0 * y,
        f=lambda t, x, mu, u: 0.5 * x * x + 0.5 * _v(mu) + kappa * (u - a(t)) ** 2,
        f_x=lambda t, x, mu, u: x + 0.0 * u,
        f_xx=lambda t, x, mu, u: 1.0 + 0.0 * x,
        f_mu=lambda t, x, mu, u, y: y + 0.0 * x,
        f_zmu=lambda t, x, mu, u, y: 1.0 + 0.0 * (x + y),
        Phi=lambda x, mu: 0.5 * x * x + 0.5 * _v(mu),
        Phi_x=lambda x, mu: x,
        Phi_xx=lambda x, mu: 1.0 + 0.0 * x,
        Phi_mu=lambda x, mu, y: y + 0.0 * x,
        Phi_zmu=lambda x, mu, y: 1.0 + 0.0 * (x + y),
        sigma_x_is_zero=True,
        h0=lambda t, x, mu: 0.5 * np.tanh(x),
        h1=h1,
        phi_h=np.tanh,
        phi_h_x=lambda x: 1.0 - np.tanh(x) ** 2,
        bound=10.0,
        name="smp-reference",
    )


def appendix_compatible(
    kappa: float = 0.5, targets=REFERENCE_TARGETS, x0: float = 0.2, horizon: float = 1.0, mode="state-functional"
) -> CoefficientSet:
    """phi(x) = x; sigma and h depend on the control only, so both theorems apply."""

    def a(t):
        return block_target(t, targets, horizon)

    return CoefficientSet(
        x0=x0,
        sigma=lambda t, x, mu, u: 0.5 + 0.3 * u + 0.0 * x,
        h=lambda t, x, mu, u: 0.25 + 0.5 * u + 0.0 * x,
        f=lambda t, x, mu, u: 0.5 * x * x + kappa * (u - a(t)) ** 2,
        f_x=lambda t, x, mu, u: x + 0.0 * u,
        f_xx=lambda t, x, mu, u: 1.0 + 0.0 * x,
        Phi=lambda x, mu: 0.5 * x * x,
        Phi_x=lambda x, mu: x,
        Phi_xx=lambda x, mu: 1.0 + 0.0 * x,
        mode=Mode.parse(mode),
        state_fn=lambda t, x, y: x,
        state_fn_x=lambda t, x, y: 1.0 + 0.0 * x,
        sigma_x_is_zero=True,
        h0=_zero,
        h1=lambda t, mu, u: 0.25 + 0.5 * u,
        phi_h=lambda x: 1.0 + 0.0 * x,
        phi_h_x=lambda x: 0.0 * x,
        bound=10.0,
        name="appendix-compatible",
    )


_BUILDERS = {
    "zero-h": zero_h,
    "control-only-sigma": control_only_sigma,
    "mean-feedback": mean_feedback,
    "linear-filtering": linear_filtering,
    "smp-reference": smp_reference,
    "appendix-compatible": appendix_compatible,
}


def get_preset(name: str, mode=None, **params) -> CoefficientSet:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    cs = builder(**params)
    if mode is not None:
        mode = Mode.parse(mode)
        if mode is Mode.STATE_FUNCTIONAL and cs.state_fn is None:
            from dataclasses import replace

            cs = replace(cs, state_fn=lambda t, x, y: x, state_fn_x=lambda t, x, y: 1.0 + 0.0 * x, mode=mode)
        else:
            cs = cs.with_mode(mode)
    return cs
