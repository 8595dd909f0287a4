import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from bayespec.model import (
    BackgroundKind, Basis, ConstantBackground, ModelSpec, Peak, ShirleyBackground, Theta, background_curve,
    cumulative_signal, eval_basis, eval_model, eval_signal, peak_components, sort_vector_by_mu, uniform_grid,
)
from bayespec.vma import synthetic_truth

PV = ModelSpec(Basis.PSEUDO_VOIGT, BackgroundKind.CONSTANT, 1)


def _pv(d2b):
    return math.exp(-0.3 * math.log(2.0) * d2b) / (1.0 + 0.7 * d2b)


def test_gaussian_apex_and_unit_exponent():
    assert eval_basis(161.0, Peak(1.0, 161.0, 9.0), Basis.GAUSSIAN) == 1.0
    # (x - mu)^2 tau = 1
    assert eval_basis(161.5, Peak(1.0, 161.0, 4.0), Basis.GAUSSIAN) == pytest.approx(0.6065306597126334, rel=1e-15)


def test_pseudo_voigt_unit_argument():
    # high-precision value of exp(-0.3 ln2) / 1.7
    assert eval_basis(161.5, Peak(1.0, 161.0, 4.0), Basis.PSEUDO_VOIGT) == pytest.approx(0.47779552727, rel=1e-10)
    assert eval_basis(3.0, Peak(1.0, 3.0, 2.0), Basis.PSEUDO_VOIGT) == 1.0


@pytest.mark.parametrize("x, tau", [(math.nan, 1.0), (math.inf, 1.0), (1.0, 0.0), (1.0, -2.0)])
def test_eval_basis_rejects_bad_arguments(x, tau):
    with pytest.raises(ValueError):
        eval_basis(x, Peak(1.0, 0.0, tau), Basis.GAUSSIAN)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 100), st.floats(0, 10), st.sampled_from(list(Basis)))
def test_basis_bounded_and_symmetric(mu, tau, d, basis):
    peak = Peak(1.0, mu, tau)
    up = eval_basis(mu + d, peak, basis)
    down = eval_basis(mu - d, peak, basis)
    assert 0.0 <= up <= 1.0
    assert up == pytest.approx(down, rel=1e-12, abs=1e-300)


def test_signal_apex_and_zero_amplitudes():
    spec = ModelSpec(K=1)
    assert eval_signal(160.0, Theta([Peak(2.0, 160.0, 3.0)]), spec) == 2.0
    zero = Theta([Peak(0.0, 161.0, 5.0), Peak(0.0, 162.0, 5.0)])
    assert eval_signal(161.3, zero, ModelSpec(K=2)) == 0.0


def test_truth_signal_at_middle_peak():
    # reference from an independent mpmath evaluation of the three-Gaussian truth
    truth = synthetic_truth(1.0)
    assert eval_signal(161.851, truth.theta_star, truth.spec) == pytest.approx(1.5624216337, rel=1e-9)
    f = eval_model([161.851, 162.0], synthetic_truth(1000.0).theta_star, truth.spec)
    assert f[0] == pytest.approx(1662.4216337, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.just(0.0) | st.floats(1e-6, 50), min_size=1, max_size=4), st.floats(159, 163))
def test_signal_linear_in_amplitudes(amps, x):
    K = len(amps)
    peaks = [Peak(a, 160.0 + 0.7 * k, 2.0 + k) for k, a in enumerate(amps)]
    doubled = [Peak(2 * p.amplitude, p.mu, p.tau) for p in peaks]
    spec = ModelSpec(K=K)
    assert eval_signal(x, Theta(doubled), spec) == 2.0 * eval_signal(x, Theta(peaks), spec)


def _random_theta(rng, K, spread=2.0):
    return Theta([Peak(rng.uniform(0, 10), 162.0 + rng.uniform(-spread, spread), rng.uniform(1, 40))
                  for _ in range(K)])


def test_gaussian_cumulative_matches_quadrature():
    rng = np.random.default_rng(0)
    grid = uniform_grid(158.0, 166.0, 0.5)
    for _ in range(20):
        K = int(rng.integers(1, 6))
        theta = _random_theta(rng, K)
        spec = ModelSpec(K=K)
        got = cumulative_signal(grid, theta, spec)
        for i in (0, 5, 8, 12, 16):
            want = sum(p.amplitude * quad(lambda u, p=p: math.exp(-0.5 * p.tau * (u - p.mu) ** 2),
                                          -np.inf, grid[i], epsabs=0, epsrel=1e-12, limit=200)[0]
                       for p in theta.peaks)
            assert got[i] == pytest.approx(want, rel=1e-8, abs=1e-300)


def test_gaussian_cumulative_total_mass():
    theta = Theta([Peak(3.0, 160.0, 4.0), Peak(1.5, 161.0, 25.0)])
    total = cumulative_signal([150.0, 180.0], theta, ModelSpec(K=2))[-1]
    want = sum(p.amplitude * p.sigma * math.sqrt(2 * math.pi) for p in theta.peaks)
    assert total == pytest.approx(want, rel=1e-13)


def test_pseudo_voigt_cumulative_matches_quadrature():
    # error measured against the peak area, which is what the Shirley term adds
    rng = np.random.default_rng(1)
    grid = uniform_grid(158.0, 166.0, 0.04)
    for _ in range(8):
        peak = Peak(rng.uniform(1, 5), 162.0 + rng.uniform(-3, 3), rng.uniform(1, 60))
        area = peak.amplitude * cumulative_signal([-1e4, 1e4], Theta([peak]), PV)[-1]
        got = cumulative_signal(grid, Theta([peak]), PV)
        for i in (0, 30, 50, 80, 100, 120, 150, 200):
            lo = peak.mu - 60 / math.sqrt(peak.tau)
            want = peak.amplitude * quad(lambda u: _pv(peak.tau * (u - peak.mu) ** 2), lo, grid[i],
                                         points=[peak.mu] if lo < peak.mu < grid[i] else None,
                                         epsabs=0, epsrel=1e-13, limit=500)[0]
            assert abs(got[i] - want) < 1e-8 * area
            assert got[i] == pytest.approx(want, rel=1e-3, abs=1e-300)


def test_pseudo_voigt_total_mass():
    peak = Peak(1.0, 0.0, 9.0)
    want = quad(lambda u: _pv(9.0 * u * u), -np.inf, np.inf, epsabs=0, epsrel=1e-13, limit=500)[0]
    assert cumulative_signal([-1e4, 1e4], Theta([peak]), PV)[-1] == pytest.approx(want, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Basis)))
def test_cumulative_nondecreasing(seed, basis):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 6))
    out = cumulative_signal(uniform_grid(), _random_theta(rng, K, spread=5.0), ModelSpec(basis, K=K))
    assert np.all(np.diff(out) >= 0)


def test_zero_amplitudes_give_zero_cumulative():
    theta = Theta([Peak(0.0, 161.0, 5.0)])
    assert np.all(cumulative_signal(uniform_grid(), theta, ModelSpec(K=1)) == 0.0)


def test_constant_background_only():
    theta = Theta([Peak(0.0, 161.0, 5.0)], ConstantBackground(0.1 * 7.0))
    assert np.all(eval_model(uniform_grid(), theta, ModelSpec(K=1)) == 0.1 * 7.0)


def test_shirley_with_zero_coefficient_is_offset():
    spec = ModelSpec(Basis.PSEUDO_VOIGT, BackgroundKind.SHIRLEY, 2)
    theta = Theta([Peak(5.0, 162.0, 10.0), Peak(2.0, 163.2, 10.0)], ShirleyBackground(0.0, 3.5))
    grid = uniform_grid()
    assert np.array_equal(eval_model(grid, theta, spec), peak_components(grid, theta, spec).sum(axis=0) + 3.5)


def test_shirley_background_is_scaled_cumulative():
    spec = ModelSpec(Basis.GAUSSIAN, BackgroundKind.SHIRLEY, 1)
    theta = Theta([Peak(5.0, 162.0, 10.0)], ShirleyBackground(0.3, 1.0))
    grid = uniform_grid()
    np.testing.assert_allclose(background_curve(grid, theta, spec),
                               0.3 * cumulative_signal(grid, theta, spec) + 1.0, rtol=1e-15)


def test_components_sum_to_model():
    truth = synthetic_truth(10.0)
    grid = truth.grid
    total = peak_components(grid, truth.theta_star, truth.spec).sum(axis=0) \
        + background_curve(grid, truth.theta_star, truth.spec)
    np.testing.assert_array_equal(total, eval_model(grid, truth.theta_star, truth.spec))


def test_theta_vector_round_trip_and_sort():
    spec = ModelSpec(Basis.GAUSSIAN, BackgroundKind.SHIRLEY, 2)
    theta = Theta([Peak(1.0, 163.0, 2.0), Peak(2.0, 161.0, 3.0)], ShirleyBackground(0.5, 4.0))
    assert Theta.from_vector(theta.to_vector(), spec) == theta
    assert [p.mu for p in theta.sorted().peaks] == [161.0, 163.0]
    np.testing.assert_array_equal(sort_vector_by_mu(theta.to_vector(), 2), theta.sorted().to_vector())
    assert spec.coordinate_names() == ["a_1", "mu_1", "tau_1", "a_2", "mu_2", "tau_2", "c", "h_start"]


def test_spec_and_grid_validation():
    with pytest.raises(ValueError):
        ModelSpec(K=0)
    with pytest.raises(ValueError):
        eval_model([1.0, 1.0], Theta([Peak(1, 1, 1)]), ModelSpec(K=1))
    with pytest.raises(ValueError):
        eval_model([1.0], Theta([Peak(1, 1, 1)]), ModelSpec(K=1))
    with pytest.raises(ValueError):
        eval_model([1.0, 2.0], Theta([Peak(1, 1, 1)]), ModelSpec(K=2))


def test_default_grid():
    grid = uniform_grid()
    assert grid.size == 201 and grid[0] == 158.0 and grid[-1] == pytest.approx(166.0)
