"""Quadrature grid in the measure variable y.

Mean-field cross terms such as  E~[ int_0^{U~} d_mu sigma(y) dy * K~ ]  are
evaluated with piecewise-linear (hat function) interpolation on a fixed
grid. ``push`` is the exact transpose of ``interp``, so a pairing computed
as sum_g G_g * push(U, w)_g equals sum over samples of w * interp(G, U).
Variational and adjoint code both go through this operator, which makes the
Fubini swap in the duality relation hold sample by sample.
"""

from __future__ import annotations

import numpy as np

N_CHEB = 33


class MeasureGrid:
    def __init__(self, points, n_nodes: int = N_CHEB, pad: float = 0.01):
        pts = np.asarray(points, dtype=float).reshape(-1)
        lo = min(0.0, float(pts.min())) if pts.size else 0.0
        hi = max(0.0, float(pts.max())) if pts.size else 0.0
        width = hi - lo
        margin = pad * width if width > 0 else 0.5
        lo, hi = lo - margin, hi + margin
        # Chebyshev-Lobatto nodes (endpoints included), then 0 spliced in
        c = np.cos(np.pi * np.arange(n_nodes)[::-1] / (n_nodes - 1))
        nodes = lo + (hi - lo) * (c + 1.0) / 2.0
        nodes[0], nodes[-1] = lo, hi
        nodes = np.union1d(nodes, [0.0])
        self.nodes = nodes
        self.zero = int(np.searchsorted(nodes, 0.0))
        self.size = nodes.size

    # -- hat-function weights ------------------------------------------------
    def _locate(self, pts):
        g = self.nodes
        p = np.asarray(pts, dtype=float)
        idx = np.clip(np.searchsorted(g, p, side="right") - 1, 0, g.size - 2)
        frac = (p - g[idx]) / (g[idx + 1] - g[idx])
        return idx, np.clip(frac, 0.0, 1.0)

    def interp(self, values, pts):
        """Interpolate grid values at ``pts``.

        ``values`` is (G,) or carries leading axes matching ``pts`` plus a
        trailing grid axis.
        """
        values = np.asarray(values, dtype=float)
        idx, frac = self._locate(pts)
        if values.ndim == 1:
            return values[idx] * (1.0 - frac) + values[idx + 1] * frac
        lo = np.take_along_axis(values, idx[..., None], axis=-1)[..., 0]
        hi = np.take_along_axis(values, (idx + 1)[..., None], axis=-1)[..., 0]
        return lo * (1.0 - frac) + hi * frac

    def push(self, pts, weights):
        """Transpose of ``interp``: sum_s w_s * hat_g(pts_s), one value per node."""
        idx, frac = self._locate(pts)
        w = np.broadcast_to(np.asarray(weights, dtype=float), np.shape(idx)).reshape(-1)
        idx = idx.reshape(-1)
        frac = frac.reshape(-1)
        out = np.bincount(idx, weights=w * (1.0 - frac), minlength=self.size)
        out += np.bincount(idx + 1, weights=w * frac, minlength=self.size)
        return out

    def antideriv(self, values):
        """Trapezoid antiderivative from y = 0 along the last axis."""
        values = np.asarray(values, dtype=float)
        h = np.diff(self.nodes)
        steps = 0.5 * (values[..., 1:] + values[..., :-1]) * h
        cum = np.concatenate([np.zeros(values.shape[:-1] + (1,)), np.cumsum(steps, axis=-1)], axis=-1)
        return cum - cum[..., self.zero : self.zero + 1]
