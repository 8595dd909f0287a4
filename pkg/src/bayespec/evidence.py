"""Free energy from the replica chains, posterior over K, MAP and posterior summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np
from scipy.special import logsumexp

from bayespec.likelihood import Spectrum
from bayespec.model import ModelSpec, Theta, sort_vector_by_mu
from bayespec.priors import PriorHyper, uniform_K_prior
from bayespec.sampler import ChainRecord, Ladder, SamplerConfig, derive_seed, run_emc

JACKKNIFE_BLOCKS = 20


@dataclass(frozen=True, eq=False)
class EvidenceResult:
    F: float
    log_z_steps: np.ndarray
    mc_se: float


@dataclass(frozen=True)
class ModelPosterior:
    F: dict
    probabilities: dict
    selected: int


def _bridges(energies: np.ndarray, betas: np.ndarray, n: int) -> np.ndarray:
    """log < exp(-n (beta_{m+1} - beta_m) E) > over the samples of replica m, for each m < M."""
    dbeta = np.diff(betas)
    w = -n * dbeta[:, None] * energies[:-1]
    return logsumexp(w, axis=1) - math.log(energies.shape[1])


def estimate_log_z(chains: ChainRecord, ladder: Optional[Ladder] = None, n: Optional[int] = None) -> EvidenceResult:
    """Telescoping estimate of F = -log z(1) with a block-jackknife standard error."""
    betas = chains.betas if ladder is None else ladder.betas
    n = chains.n if n is None else n
    E = np.asarray(chains.energies, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] != betas.size:
        raise ValueError(f"energies of shape {E.shape} do not match a ladder of {betas.size}")
    if E.shape[1] == 0:
        raise ValueError("every replica needs at least one recorded sample")
    if not np.all(np.isfinite(E)):
        raise ValueError("recorded energies must be finite")
    steps = _bridges(E, betas, n)
    F = float(-steps.sum())

    R = E.shape[1]
    nb = min(JACKKNIFE_BLOCKS, R)
    if nb < 2:
        return EvidenceResult(F, steps, math.nan)
    blocks = np.array_split(np.arange(R), nb)
    loo = np.empty(nb)
    for b, idx in enumerate(blocks):
        keep = np.ones(R, dtype=bool)
        keep[idx] = False
        loo[b] = -_bridges(E[:, keep], betas, n).sum()
    se = math.sqrt((nb - 1) / nb * np.sum((loo - loo.mean()) ** 2))
    return EvidenceResult(F, steps, se)


def posterior_over_K(F_by_K: Mapping[int, float], prior_K: Optional[Mapping[int, float]] = None) -> ModelPosterior:
    """p(K|D) proportional to p(K) exp(-F(K)); uniform p(K) when none is given."""
    if not F_by_K:
        raise ValueError("no free energies given")
    ks = sorted(F_by_K)
    if prior_K is None:
        prior_K = {k: 1.0 / len(ks) for k in ks}
    missing = set(ks) - set(prior_K)
    if missing:
        raise ValueError(f"no prior mass for K in {sorted(missing)}")
    total = sum(prior_K[k] for k in ks)
    if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError(f"prior over K sums to {total}, not 1")
    with np.errstate(divide="ignore"):
        logp = np.array([math.log(prior_K[k]) if prior_K[k] > 0 else -math.inf for k in ks]) \
            - np.array([F_by_K[k] for k in ks], dtype=np.float64)
    logp -= logp.max()
    p = np.exp(logp)
    p /= p.sum()
    probs = {k: float(v) for k, v in zip(ks, p)}
    selected = ks[int(np.argmax(p))]
    return ModelPosterior({k: float(F_by_K[k]) for k in ks}, probs, selected)


def log_posterior_samples(chains: ChainRecord, slot: int = -1) -> np.ndarray:
    """Unnormalized log posterior -n E + log p(theta|K) of each recorded sample at a slot."""
    return -chains.n * chains.energies[slot] + chains.log_prior[slot]


def map_estimate(chains: ChainRecord, spectrum: Optional[Spectrum] = None, spec: Optional[ModelSpec] = None,
                 hyper: Optional[PriorHyper] = None) -> Theta:
    """Highest-posterior recorded beta = 1 sample, peaks relabeled by ascending position.

    The recorded energies and log priors are used directly; ``spectrum``, ``spec``
    and ``hyper`` are accepted for symmetry with the other entry points and only
    checked for consistency.
    """
    spec = chains.spec if spec is None else spec
    if spec != chains.spec:
        raise ValueError(f"spec {spec} does not match chains {chains.spec}")
    if spectrum is not None and spectrum.n != chains.n:
        raise ValueError("spectrum length does not match the chains")
    if chains.params.shape[1] == 0:
        raise ValueError("no recorded beta = 1 samples")
    score = log_posterior_samples(chains)
    best = int(np.argmax(score))
    vec = sort_vector_by_mu(chains.params[-1, best], spec.K)
    return Theta.from_vector(vec, spec)


def relabeled_samples(chains: ChainRecord, slot: int = -1) -> np.ndarray:
    """Recorded parameter vectors at a slot with peaks sorted by ascending position."""
    return sort_vector_by_mu(chains.params[slot], chains.spec.K)


_FIELDS = {"a": 0, "amplitude": 0, "mu": 1, "tau": 2}


@dataclass(frozen=True, eq=False)
class Histogram:
    """Per-peak histogram table; ``counts`` has shape (K, n_bins)."""

    param: str
    edges: np.ndarray
    counts: np.ndarray
    intervals: np.ndarray  # (K, 2) central 95% credible intervals
    medians: np.ndarray


def posterior_histograms(chains: ChainRecord, param: str = "mu", bins=50, level: float = 0.95) -> Histogram:
    """Histograms of one peak parameter from the relabeled beta = 1 chain, with credible intervals."""
    if param not in _FIELDS:
        raise ValueError(f"unknown peak parameter {param!r}; expected one of {sorted(_FIELDS)}")
    samples = relabeled_samples(chains)
    if samples.shape[0] == 0:
        raise ValueError("no recorded beta = 1 samples")
    K = chains.spec.K
    values = samples[:, [3 * k + _FIELDS[param] for k in range(K)]]
    edges = np.histogram_bin_edges(values, bins=bins)
    counts = np.stack([np.histogram(values[:, k], bins=edges)[0] for k in range(K)])
    tail = 50.0 * (1.0 - level)
    intervals = np.percentile(values, [tail, 100.0 - tail], axis=0).T
    return Histogram(param, edges, counts, intervals, np.median(values, axis=0))


def intervals_overlap(intervals: np.ndarray) -> list[bool]:
    """For each adjacent pair of (sorted) intervals, whether they overlap."""
    return [bool(intervals[k, 1] >= intervals[k + 1, 0]) for k in range(len(intervals) - 1)]


@dataclass(eq=False)
class ScanResult:
    """Per-K chains and free energies for one spectrum."""

    chains: dict
    evidence: dict
    posterior: ModelPosterior
    seeds: dict

    @property
    def selected(self) -> int:
        return self.posterior.selected

    def map_theta(self, K: Optional[int] = None) -> Theta:
        return map_estimate(self.chains[self.selected if K is None else K])


def evidence_scan(spectrum: Spectrum, spec: ModelSpec, hyper: PriorHyper, config: SamplerConfig, k_range: tuple[int, int],
                  fixed: Optional[Mapping[str, float]] = None) -> ScanResult:
    """Run the sampler for every K in ``k_range`` and compare free energies under a uniform p(K).

    The sampler seed for peak count K is derived from ``config.seed`` and K.
    """
    prior_K = uniform_K_prior(k_range)
    chains, ev, seeds = {}, {}, {}
    for K in prior_K:
        seeds[K] = derive_seed(config.seed, K)
        chains[K] = run_emc(spectrum, spec.with_K(K), hyper, replace(config, seed=seeds[K]), fixed=fixed)
        ev[K] = estimate_log_z(chains[K])
    posterior = posterior_over_K({K: e.F for K, e in ev.items()}, prior_K)
    return ScanResult(chains, ev, posterior, seeds)
