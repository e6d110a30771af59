import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsmp.meanfield import MeasureGrid


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_push_is_transpose_of_interp(seed):
    g = np.random.default_rng(seed)
    pts = g.normal(size=50)
    mg = MeasureGrid(pts)
    vals = g.normal(size=mg.size)
    w = g.normal(size=50)
    lhs = float(vals @ mg.push(pts, w))
    rhs = float(w @ mg.interp(vals, pts))
    assert abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs))


def test_grid_contains_zero_and_range():
    mg = MeasureGrid([1.0, 2.0, 3.0])
    assert mg.nodes[mg.zero] == 0.0
    assert mg.nodes[0] <= 0.0 and mg.nodes[-1] >= 3.0


def test_antideriv_zero_at_origin_and_exact_for_linear():
    mg = MeasureGrid(np.linspace(-2, 3, 20))
    F = mg.antideriv(mg.nodes)  # d/dy (y^2/2) = y, trapezoid is exact
    assert F[mg.zero] == 0.0
    np.testing.assert_allclose(F, mg.nodes**2 / 2, atol=1e-12)


def test_interp_reproduces_linear():
    mg = MeasureGrid([-1.0, 1.0])
    pts = np.linspace(-1, 1, 7)
    np.testing.assert_allclose(mg.interp(2 * mg.nodes + 1, pts), 2 * pts + 1, atol=1e-14)
