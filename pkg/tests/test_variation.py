import numpy as np
import pytest

from mfsmp.core import ConstantPolicy, SpikeSpec, TimeGrid, theta_functional
from mfsmp.errors import ConfigurationError
from mfsmp.forward import picard_forward
from mfsmp.noise import make_plan
from mfsmp.presets import get_preset
from mfsmp.variation import (
    ladder,
    second_order_U,
    solve_first_variation,
    solve_second_variation,
    spike_control,
    taylor_orders,
)

U2 = (0.0, 1.0)
BASE, ALT = ConstantPolicy(0.0, U2), ConstantPolicy(1.0, U2)


@pytest.fixture(scope="module")
def ref():
    plan = make_plan(7, 8, 16, TimeGrid(1.0, 16))
    cs = get_preset("smp-reference")
    return cs, plan, picard_forward(cs, BASE, plan)


def test_spike_control_definition():
    g = TimeGrid(1.0, 100)
    y = np.zeros((2, 101))
    sp = spike_control(ConstantPolicy(0.0, U2), SpikeSpec(0.5, 0.1, ALT))
    assert sp.evaluate(55, y, g)[0] == 1.0 and sp.evaluate(70, y, g)[0] == 0.0
    none = spike_control(BASE, SpikeSpec(0.5, 0.0, ALT))
    assert all(none.evaluate(k, y, g)[0] == 0.0 for k in range(101))
    same = spike_control(BASE, SpikeSpec(0.5, 0.1, BASE))
    assert all(same.evaluate(k, y, g)[0] == 0.0 for k in range(101))


def test_zero_forcing_gives_zero(ref):
    cs, plan, fw = ref
    v = solve_first_variation(cs, fw, BASE, SpikeSpec(0.25, 0.25, BASE), plan)
    assert not v.Y1.any() and not v.K1.any() and not v.V1.any()
    v = solve_second_variation(cs, fw, BASE, SpikeSpec(0.25, 0.25, BASE), plan, v)
    assert not v.Y2.any() and not v.K2.any() and not v.V2.any()


def test_zero_eps_gives_zero(ref):
    cs, plan, fw = ref
    sp = SpikeSpec(0.25, 0.0, ALT)
    v = solve_second_variation(cs, fw, BASE, sp, plan, solve_first_variation(cs, fw, BASE, sp, plan))
    for a in (v.Y1, v.K1, v.V1, v.Y2, v.K2, v.V2):
        assert not a.any()
    assert v.eps == 0.0


def test_decoupled_case_is_a_stochastic_integral():
    cs = get_preset("control-only-sigma")
    plan = make_plan(3, 4, 8, TimeGrid(1.0, 16))
    fw = picard_forward(cs, BASE, plan)
    sp = SpikeSpec(0.25, 0.25, ALT)
    v = solve_first_variation(cs, fw, BASE, sp, plan)
    win = sp.window(plan.grid)[:-1]
    ds = 0.5 * (1.0 - 0.0)
    incr = np.where(win, ds, 0.0) * plan.dB1
    expect = np.concatenate([np.zeros((4, 8, 1)), np.cumsum(incr, axis=2)], axis=2)
    np.testing.assert_allclose(v.Y1, expect, rtol=0, atol=1e-15)
    assert not v.K1.any()
    # second order: no second derivatives, no h, sigma_x = 0 -> nothing to drive it
    v2 = solve_second_variation(cs, fw, BASE, sp, plan, v)
    assert not v2.Y2.any() and not v2.K2.any()


def test_linearity_in_forcing(ref):
    cs, plan, fw = ref
    sp = SpikeSpec(0.25, 0.25, ALT)
    one = solve_first_variation(cs, fw, BASE, sp, plan)
    two = solve_first_variation(cs, fw, BASE, sp, plan, forcing_scale=2.0)
    for a, b in ((one.Y1, two.Y1), (one.K1, two.K1), (one.V1, two.V1)):
        np.testing.assert_allclose(b, 2 * a, rtol=0, atol=1e-12 * (1 + np.abs(a).max()))


def test_V1_is_theta_of_Y1_K1(ref):
    cs, plan, fw = ref
    v = solve_first_variation(cs, fw, BASE, SpikeSpec(0.25, 0.25, ALT), plan)
    for k in range(plan.grid.steps + 1):
        th = theta_functional(v.Y1[:, :, k], v.K1[:, :, k], fw.X[:, :, k], fw.L[:, :, k])
        assert np.array_equal(v.V1[:, k], th)


def test_second_order_U_is_quadratic(ref):
    cs, plan, fw = ref
    g = np.random.default_rng(1)
    Y1, K1, Y2, K2 = g.normal(size=(4, 8, 16))
    lam = 1.7
    _, a = second_order_U(fw, 5, Y1, K1, Y2, K2)
    _, b = second_order_U(fw, 5, lam * Y1, lam * K1, lam**2 * Y2, lam**2 * K2)
    np.testing.assert_allclose(b, lam**2 * a, rtol=1e-12, atol=1e-14)


def test_plan_mismatch(ref):
    cs, plan, fw = ref
    other = make_plan(8, 8, 16, TimeGrid(1.0, 16))
    with pytest.raises(ConfigurationError):
        solve_first_variation(cs, fw, BASE, SpikeSpec(0.25, 0.1, ALT), other)


def test_degenerate_ladder(ref):
    cs, plan, fw = ref
    with pytest.raises(ConfigurationError):
        taylor_orders(cs, BASE, ladder(0.25, [0.2, 0.1, 0.05], ALT), plan, base=fw)
    with pytest.raises(ConfigurationError):
        taylor_orders(cs, BASE, ladder(0.25, [0.2, 0.1, 0.1, 0.05], ALT), plan, base=fw)
    # 0.02 and 0.025 land on the same number of nodes when K = 16
    with pytest.raises(ConfigurationError, match="collapses"):
        taylor_orders(cs, BASE, ladder(0.25, [0.2, 0.1, 0.025, 0.02], ALT), plan, base=fw)


def test_common_random_numbers(ref):
    cs, plan, fw = ref
    gaps = []
    for e in (0.25, 0.125, 0.0625):
        pert = picard_forward(cs, spike_control(BASE, SpikeSpec(0.25, e, ALT)), plan)
        gaps.append(np.abs(pert.X - fw.X).max())
    assert gaps[0] > gaps[1] > gaps[2]
