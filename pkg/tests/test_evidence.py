import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayespec.evidence import (
    estimate_log_z, intervals_overlap, map_estimate, posterior_histograms, posterior_over_K, relabeled_samples,
)
from bayespec.model import ModelSpec
from bayespec.sampler import ChainRecord, build_ladder


def _record(energies, params=None, log_prior=None, n=50, K=1):
    energies = np.asarray(energies, dtype=np.float64)
    M, R = energies.shape
    spec = ModelSpec(K=K)
    P = spec.n_params
    if params is None:
        params = np.ones((M, R, P))
    if log_prior is None:
        log_prior = np.zeros((M, R))
    return ChainRecord(spec=spec, betas=build_ladder(M, 1.5).betas, n=n, params=np.asarray(params, float),
                       energies=energies, log_prior=np.asarray(log_prior, float), exchange_rates=np.zeros(M - 1),
                       accept_rates=np.zeros((M, P)), steps=np.ones((M, P)), free=np.ones(P, bool))


def test_constant_energy_gives_n_E0():
    rec = _record(np.full((8, 40), 1.37), n=50)
    ev = estimate_log_z(rec)
    assert ev.F == pytest.approx(50 * 1.37, rel=1e-12)
    assert ev.log_z_steps.shape == (7,)
    assert ev.F == -ev.log_z_steps.sum()
    assert ev.mc_se == pytest.approx(0.0, abs=1e-10)


def test_zero_data_points_give_zero_free_energy():
    rec = _record(np.random.default_rng(0).normal(size=(5, 30)), n=0)
    assert estimate_log_z(rec).F == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 5))
def test_energy_shift_moves_F_by_n_c(seed, c0):
    E = np.random.default_rng(seed).gamma(2.0, 1.0, size=(6, 25))
    a = estimate_log_z(_record(E, n=30))
    b = estimate_log_z(_record(E + c0, n=30))
    assert b.F - a.F == pytest.approx(30 * c0, abs=1e-9)


def test_empty_or_bad_chains_rejected():
    with pytest.raises(ValueError):
        estimate_log_z(_record(np.zeros((4, 0))))
    E = np.ones((4, 5))
    E[2, 1] = np.inf
    with pytest.raises(ValueError):
        estimate_log_z(_record(E))


def test_posterior_over_K_example():
    post = posterior_over_K({1: 10.0, 2: 5.0, 3: 8.0})
    assert post.probabilities[2] == pytest.approx(0.9464991226, rel=1e-9)
    assert post.selected == 2
    assert sum(post.probabilities.values()) == pytest.approx(1.0, abs=1e-12)


def test_posterior_over_K_uniform_and_errors():
    post = posterior_over_K({1: 3.0, 2: 3.0, 3: 3.0, 4: 3.0})
    assert all(p == pytest.approx(0.25) for p in post.probabilities.values())
    with pytest.raises(ValueError):
        posterior_over_K({})
    with pytest.raises(ValueError):
        posterior_over_K({1: 1.0, 2: 2.0}, {1: 0.7, 2: 0.7})


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.integers(1, 8), st.floats(-1e4, 1e4), min_size=1, max_size=8), st.floats(-1e5, 1e5))
def test_posterior_over_K_shift_invariant(F, shift):
    a = posterior_over_K(F)
    b = posterior_over_K({k: v + shift for k, v in F.items()})
    assert a.selected == b.selected
    for k in F:
        assert a.probabilities[k] == pytest.approx(b.probabilities[k], abs=1e-9)
    assert math.fsum(a.probabilities.values()) == pytest.approx(1.0, abs=1e-12)


def test_map_single_sample_and_prior_tiebreak():
    params = np.zeros((3, 1, 4))
    params[-1, 0] = [5.0, 161.0, 4.0, 0.2]
    assert map_estimate(_record(np.ones((3, 1)), params)).to_vector().tolist() == [5.0, 161.0, 4.0, 0.2]

    params = np.zeros((3, 2, 4))
    params[-1, 0] = [5.0, 161.0, 4.0, 0.2]
    params[-1, 1] = [6.0, 162.0, 4.0, 0.2]
    lp = np.zeros((3, 2))
    lp[-1] = [-3.0, -1.0]
    theta = map_estimate(_record(np.ones((3, 2)), params, lp))
    assert theta.peaks[0].mu == 162.0


def test_map_relabels_and_ignores_label_order():
    a = np.array([[1.0, 163.0, 4.0, 2.0, 161.0, 9.0, 0.3]])
    b = np.array([[2.0, 161.0, 9.0, 1.0, 163.0, 4.0, 0.3]])
    E = np.ones((2, 1))
    ta = map_estimate(_record(E, np.stack([a, a]), K=2))
    tb = map_estimate(_record(E, np.stack([b, b]), K=2))
    assert ta == tb
    assert [p.mu for p in ta.peaks] == [161.0, 163.0]


def test_histograms_and_intervals():
    rng = np.random.default_rng(2)
    R = 4000
    params = np.zeros((2, R, 7))
    params[-1, :, 1] = rng.normal(163.0, 0.05, R)
    params[-1, :, 4] = rng.normal(161.0, 0.05, R)
    rec = _record(np.ones((2, R)), params, K=2)
    h = posterior_histograms(rec, "mu", bins=40)
    assert h.counts.shape == (2, 40)
    assert np.all(h.counts.sum(axis=1) == R)
    assert h.intervals[0, 1] < h.intervals[1, 0]
    assert intervals_overlap(h.intervals) == [False]
    assert np.all(np.diff(relabeled_samples(rec)[:, [1, 4]], axis=1) >= 0)
    with pytest.raises(ValueError):
        posterior_histograms(rec, "width")


def test_intervals_overlap():
    assert intervals_overlap(np.array([[0.0, 1.0], [0.5, 2.0], [3.0, 4.0]])) == [True, False]
