import numpy as np
import pytest

from mfsmp.adjoint import solve_first_adjoint, solve_second_adjoint
from mfsmp.core import CoefficientSet, ConstantPolicy, EmpiricalMeasure, TimeGrid
from mfsmp.errors import ConfigurationError, UnsupportedModeError
from mfsmp.forward import picard_forward
from mfsmp.noise import make_plan
from mfsmp.presets import control_only_sigma, get_preset
from mfsmp.smp import (
    MAX_POLICIES,
    brute_force_control,
    compute_MR,
    h_window,
    hamiltonian,
    smp_scan,
    weighted_mean_se,
)

U2 = (0.0, 1.0)
BASE = ConstantPolicy(0.0, U2)
GRID = TimeGrid(1.0, 16)
PLAN = make_plan(5, 16, 32, GRID)


def solve(cs, pol=BASE, plan=PLAN):
    fw = picard_forward(cs, pol, plan)
    a = solve_first_adjoint(cs, fw)
    return fw, solve_second_adjoint(cs, fw, pol, a)


def test_hamiltonian_examples():
    mu = EmpiricalMeasure.dirac(0.0)
    zero = CoefficientSet(x0=0.0, sigma=lambda t, x, mu, u: 0.0)
    assert hamiltonian(0.0, 1.0, 1.0, mu, 0.0, 2.0, 3.0, zero) == 0.0
    cs = CoefficientSet(
        x0=0.0,
        sigma=lambda t, x, mu, u: 1.0,
        h=lambda t, x, mu, u: 3.0,
        f=lambda t, x, mu, u: 4.0,
    )
    assert hamiltonian(0.0, 0.0, 1.0, mu, 0.0, 2.0, 1.0, cs) == 1.0
    ref = get_preset("smp-reference")
    h1 = hamiltonian(0.3, 0.2, 1.1, mu, 1.0, 0.5, -0.4, ref)
    assert h1 - hamiltonian(0.3, 0.2, 1.1, mu, 1.0, 0.5, -0.4, ref) == 0.0


def test_h_window_examples():
    fw = picard_forward(control_only_sigma(), BASE, PLAN)
    assert not h_window(fw, fw.coeffs, 2, 9).any()
    lin = get_preset("linear-filtering")
    fw = picard_forward(lin, BASE, PLAN)
    assert not h_window(fw, lin, 4, 4).any()
    k, dt = 6, GRID.dt
    expect = PLAN.dY[:, k : k + 1] - fw.X[:, :, k] * dt
    np.testing.assert_allclose(h_window(fw, lin, k, k + 1), expect, rtol=0, atol=1e-15)
    with pytest.raises(ConfigurationError):
        h_window(fw, lin, 5, 4)


def test_M_vanishes_without_measure_terms():
    fw, a = solve(control_only_sigma(0.0))
    mr = compute_MR(fw.coeffs, fw, a)
    assert not mr.M.any() and not mr.M_raw.any()
    assert not mr.R.any()


def test_R_vanishes_without_observation_channel():
    ref = get_preset("smp-reference")
    from dataclasses import replace

    cs = replace(
        ref,
        h=lambda t, x, mu, u: 0.5 * np.tanh(x),
        h_x=lambda t, x, mu, u: 0.5 * (1 - np.tanh(x) ** 2),
        h_xx=lambda t, x, mu, u: -np.tanh(x) * (1 - np.tanh(x) ** 2),
        h_mu=lambda t, x, mu, u, y: 0.0 * (x + y),
        h_zmu=lambda t, x, mu, u, y: 0.0 * (x + y),
        h1=lambda t, mu, u: 0.0 * u,
        phi_h=lambda x: 0.0 * x,
        phi_h_x=lambda x: 0.0 * x,
    )
    fw, a = solve(cs)
    mr = compute_MR(cs, fw, a)
    assert not mr.R.any() and not mr.R_raw.any()
    assert mr.M.any()
    assert np.all(np.isfinite(mr.M))


def test_MR_mode_requirements():
    fw, a = solve(get_preset("appendix-compatible"))
    with pytest.raises(UnsupportedModeError):
        compute_MR(fw.coeffs, fw, a)
    plain = CoefficientSet(x0=0.0, sigma=lambda t, x, mu, u: 0.5 + 0.5 * u, Phi_xx=lambda x, mu: 1.0 + 0.0 * x)
    fw, a = solve(plain)
    with pytest.raises(UnsupportedModeError):
        compute_MR(plain, fw, a)


@pytest.fixture(scope="module")
def ref_scan():
    cs = get_preset("smp-reference")
    fw, a = solve(cs)
    return cs, fw, a, smp_scan(cs, fw, a, U2)


def test_gap_is_zero_at_the_current_control(ref_scan):
    cs, fw, a, rep = ref_scan
    only = smp_scan(cs, fw, a, (0.0,))
    assert not only.gap.any() and not only.gap_paths.any()
    assert not rep.gap[0].any()  # candidate 0.0 is the control in use
    assert rep.verdict == rep.gap.max()


def test_report_fields(ref_scan):
    cs, fw, a, rep = ref_scan
    assert rep.gap.shape == (2, 16) and rep.gap_paths.shape == (2, 16, 16)
    assert np.all(rep.Gamma1 > 0) and np.all(np.isfinite(rep.M)) and np.all(np.isfinite(rep.R))
    np.testing.assert_allclose(rep.Gamma1.mean(axis=1), 1.0, rtol=1e-12)
    assert np.all(rep.gap_stderr >= 0)
    assert "block" in rep.label


def test_pure_cost_gap():
    # f = v^2 with sigma, h free of the control: dH = -df = -1 exactly at v = 1
    cs = CoefficientSet(
        x0=0.0,
        sigma=lambda t, x, mu, u: 0.5 + 0.0 * u,
        h=lambda t, x, mu, u: np.tanh(x),
        h_x=lambda t, x, mu, u: 1 - np.tanh(x) ** 2,
        f=lambda t, x, mu, u: u * u + 0.0 * x,
        Phi=lambda x, mu: 0.5 * x * x,
        Phi_x=lambda x, mu: x,
        Phi_xx=lambda x, mu: 1.0 + 0.0 * x,
        sigma_x_is_zero=True,
        h0=lambda t, x, mu: np.tanh(x),
        h1=lambda t, mu, u: 0.0 * u,
        phi_h=lambda x: 0.0 * x,
        phi_h_x=lambda x: 0.0 * x,
    )
    fw, a = solve(cs)
    rep = smp_scan(cs, fw, a, U2)
    np.testing.assert_allclose(rep.gap[1], -1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(rep.gap_paths[1], -1.0, rtol=0, atol=1e-12)


def test_scan_checks_inputs(ref_scan):
    cs, fw, a, rep = ref_scan
    with pytest.raises(ConfigurationError):
        smp_scan(cs, fw, a, (0.0, 2.0))
    with pytest.raises(ConfigurationError):
        smp_scan(cs, fw, solve_first_adjoint(cs, fw), U2)
    with pytest.raises(ConfigurationError):
        smp_scan(cs, fw, a, U2, mode="state-functional")


def test_weighted_mean_se():
    m, se = weighted_mean_se(np.array([1.0, 1.0, 1.0]), np.array([1.0, 2.0, 3.0]))
    assert m == 1.0 and se == 0.0
    m, se = weighted_mean_se(np.array([0.0, 2.0]), np.array([1.0, 3.0]))
    assert m == 1.5


# -- brute force ----------------------------------------------------------------------


def penalty(a):
    return CoefficientSet(
        x0=0.0,
        sigma=lambda t, x, mu, u: 1.0,
        f=lambda t, x, mu, u: (u - a) ** 2 + 0.0 * x,
    )


def test_brute_force_picks_penalty_minimiser():
    plan = make_plan(1, 4, 4, GRID)
    pol, table = brute_force_control(penalty(1.0), plan, (0.0, 1.0), 3)
    assert pol.values == (1.0, 1.0, 1.0)
    assert len(table) == 8 and list(table)[0] == (0.0, 0.0, 0.0)


def test_brute_force_single_block():
    plan = make_plan(1, 4, 4, GRID)
    pol, table = brute_force_control(penalty(0.3), plan, (0.0, 1.0), 1)
    best = min(table, key=lambda c: table[c][0])
    assert pol.values == best == (0.0,)


def test_brute_force_tie_goes_to_first():
    plan = make_plan(1, 4, 4, GRID)
    pol, table = brute_force_control(penalty(0.5), plan, (0.0, 1.0), 2)
    assert pol.values == (0.0, 0.0)


def test_brute_force_threads_agree():
    plan = make_plan(1, 4, 8, GRID)
    cs = get_preset("smp-reference")
    a = brute_force_control(cs, plan, U2, 2, threads=1)
    b = brute_force_control(cs, plan, U2, 2, threads=4)
    assert a[0].values == b[0].values and a[1] == b[1]


def test_brute_force_cap():
    with pytest.raises(ConfigurationError, match="cap"):
        brute_force_control(penalty(0.0), PLAN, (0.0, 0.5, 1.0), 8)
    assert 3**7 <= MAX_POLICIES < 3**8
