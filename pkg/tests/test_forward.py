import numpy as np
import pytest

from mfsmp.core import CoefficientSet, ConstantPolicy, EmpiricalMeasure, TimeGrid, wasserstein1, weighted_law
from mfsmp.errors import ConfigurationError, ContractionFailureError, NumericalBlowupError
from mfsmp.forward import (
    contraction_diagnostic,
    euler_forward_given_mu,
    fkk_filter,
    gap_ratios,
    kalman_bucy_mean,
    picard_forward,
)
from mfsmp.noise import make_plan
from mfsmp.presets import get_preset
from oracles import plain_mckean_vlasov

POL = ConstantPolicy(0.0, (0.0, 1.0))


def test_zero_h_density_is_one_and_matches_plain_run():
    cs = get_preset("zero-h")
    plan = make_plan(7, 8, 16, TimeGrid(1.0, 16))
    fw = picard_forward(cs, POL, plan)
    assert np.all(fw.L == 1.0)
    X, mus = plain_mckean_vlasov(cs, plan, np.zeros((8, 1)))
    assert np.array_equal(fw.X, X)
    for a, b in zip(fw.mu, mus):
        assert np.array_equal(a.samples, b.samples) and np.array_equal(a.weights, b.weights)


def test_zero_diffusion_gives_dirac():
    cs = CoefficientSet(x0=2.0, sigma=lambda t, x, mu, u: 0.0, h=lambda t, x, mu, u: np.tanh(x))
    plan = make_plan(7, 4, 4, TimeGrid(1.0, 8))
    fw = picard_forward(cs, POL, plan)
    assert np.all(fw.X == 2.0) and np.all(fw.U == 2.0)
    for m in fw.mu:
        assert list(m.samples) == [2.0]


def test_constant_h_density_closed_form():
    c = 0.7
    cs = CoefficientSet(x0=0.0, sigma=lambda t, x, mu, u: 1.0, h=lambda t, x, mu, u: c)
    grid = TimeGrid(1.0, 64)
    plan = make_plan(3, 4, 4, grid)
    fw = picard_forward(cs, POL, plan)
    exact = np.exp(c * plan.Y - 0.5 * c * c * grid.nodes)[:, None, :]
    np.testing.assert_allclose(fw.L, np.broadcast_to(exact, fw.L.shape), rtol=1e-12)


def test_measure_free_coefficients_converge_in_two():
    cs = CoefficientSet(x0=0.0, sigma=lambda t, x, mu, u: 1.0, h=lambda t, x, mu, u: np.tanh(x))
    plan = make_plan(3, 4, 8, TimeGrid(1.0, 16))
    fw = picard_forward(cs, POL, plan)
    assert fw.iterations == 2 and fw.history[1] == 0.0
    d = contraction_diagnostic(cs, POL, plan, 4)
    assert d[1] == 0.0
    assert gap_ratios(d)[1:] == [0.0, 0.0]


def test_mean_feedback_keeps_mean():
    cs = get_preset("mean-feedback")
    plan = make_plan(7, 32, 32, TimeGrid(1.0, 16))
    fw = picard_forward(cs, POL, plan)
    for k in range(0, 17, 4):
        per = fw.U[:, k]
        se = per.std(ddof=1) / np.sqrt(per.size) + 1e-15
        assert abs(fw.mu[k].mean() - 1.0) <= 5 * se


def test_density_positive_martingale_and_P_consistency():
    cs = get_preset("smp-reference")
    plan = make_plan(7, 32, 32, TimeGrid(1.0, 16))
    fw = picard_forward(cs, POL, plan)
    assert np.all(fw.L > 0)
    for k in range(17):
        per = fw.L[:, :, k].mean(axis=1)
        assert abs(per.mean() - 1) <= 5 * per.std(ddof=1) / np.sqrt(per.size) + 1e-15
    g = np.cos(fw.X[:, :, -1])
    a = (fw.L[:, :, -1] * g).mean(axis=1)
    b = np.sum(fw.Lbar[:, -1] * (a / fw.Lbar[:, -1])) / fw.Lbar[:, -1].sum()
    assert abs(a.mean() - b) <= 5 * a.std(ddof=1) / np.sqrt(a.size)


def test_euler_scheme_available_and_positive():
    cs = get_preset("smp-reference")
    plan = make_plan(7, 8, 8, TimeGrid(1.0, 16))
    fw = picard_forward(cs, POL, plan, scheme="euler")
    assert np.all(fw.L > 0)
    with pytest.raises(ConfigurationError):
        picard_forward(cs, POL, plan, scheme="midpoint")


def test_fkk_trivial_cases():
    plan = make_plan(7, 4, 16, TimeGrid(1.0, 16))
    cs = CoefficientSet(x0=0.3, sigma=lambda t, x, mu, u: 1.0, h=lambda t, x, mu, u: 0.7 + 0.0 * x)
    fw = picard_forward(cs, POL, plan)
    np.testing.assert_allclose(fkk_filter(cs, POL, fw, plan), 0.3, atol=1e-12)
    cs = CoefficientSet(x0=0.3, sigma=lambda t, x, mu, u: 0.0, h=lambda t, x, mu, u: x)
    fw = picard_forward(cs, POL, plan)
    np.testing.assert_allclose(fkk_filter(cs, POL, fw, plan), 0.3, atol=1e-12)


def test_kalman_bucy_zero_observation():
    g = TimeGrid(1.0, 8)
    np.testing.assert_array_equal(kalman_bucy_mean(np.zeros((2, 8)), g, 0.0), 0.0)


def test_blowup_names_sample():
    cs = CoefficientSet(x0=0.0, sigma=lambda t, x, mu, u: np.where(t > 0.4, np.nan, 1.0) + 0.0 * x)
    plan = make_plan(7, 2, 2, TimeGrid(1.0, 8))
    mus = [EmpiricalMeasure.dirac(0.0)] * 9
    with pytest.raises(NumericalBlowupError, match=r"j=0, i=0, k=5"):
        euler_forward_given_mu(cs, POL, plan, mus)


def test_contraction_failure_keeps_history():
    cs = get_preset("mean-feedback")
    plan = make_plan(7, 8, 8, TimeGrid(1.0, 8))
    with pytest.raises(ContractionFailureError) as info:
        picard_forward(cs, POL, plan, tol=1e-300, max_iter=3)
    assert len(info.value.history) == 3


def test_gap_ratios_conventions():
    assert gap_ratios([1.0, 0.5, 0.0, 0.0]) == [0.5, 0.0, 0.0]
