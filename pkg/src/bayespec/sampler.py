"""Exchange Monte Carlo (parallel tempering) over the tempered posteriors.

Each temperature slot owns a PCG64 stream spawned from the run seed. Random
variates are drawn per slot in blocks before the compiled sweep runs, so the
serial and the multithreaded schedules consume identical numbers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit

from bayespec import _kernels
from bayespec.likelihood import Spectrum
from bayespec.model import ModelSpec, Theta
from bayespec.priors import PriorHyper, coordinate_priors, proposal_scales, sample_prior_vector

log = logging.getLogger(__name__)

ADAPT_INTERVAL = 100
ADAPT_FACTOR = 1.2
ADAPT_HIGH = 0.5
ADAPT_LOW = 0.2
STEP_CLAMP = (1e-6, 1e3)
INITIAL_STEP_FRACTION = 0.1
MAX_INIT_TRIES = 10000


@dataclass(frozen=True, eq=False)
class Ladder:
    betas: np.ndarray
    gamma: float

    @property
    def M(self) -> int:
        return self.betas.size


def build_ladder(M: int, gamma: float) -> Ladder:
    """beta_1 = 0 and beta_m = gamma**(m - M) for m >= 2 (1-based m)."""
    if int(M) != M or M < 2:
        raise ValueError(f"need at least 2 replicas, got M={M}")
    if not (gamma > 1 and math.isfinite(gamma)):
        raise ValueError(f"ladder ratio must exceed 1, got {gamma}")
    M = int(M)
    betas = np.zeros(M)
    m = np.arange(2, M + 1)
    betas[1:] = float(gamma) ** (m - M).astype(np.float64)
    betas[-1] = 1.0
    return Ladder(betas, float(gamma))


@dataclass(frozen=True)
class SamplerConfig:
    replicas: int = 32
    gamma: float = 1.5
    iterations: int = 20000
    burn_in: int = 10000
    exchange_period: int = 1
    seed: int = 0
    thin: int = 10
    parallel: bool = False
    debug: bool = False

    def __post_init__(self):
        if self.replicas < 2:
            raise ValueError("replicas must be >= 2")
        if not self.gamma > 1:
            raise ValueError("gamma must be > 1")
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ValueError(f"need 0 <= burn_in < iterations, got {self.burn_in}, {self.iterations}")
        if self.exchange_period < 1 or self.thin < 1:
            raise ValueError("exchange_period and thin must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_records(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass
class ReplicaState:
    """Sampler state of one replica, with cached loss and log prior."""

    theta: Theta
    energy: float
    log_prior: float
    steps: np.ndarray
    accept_counts: np.ndarray
    attempt_counts: np.ndarray


@dataclass(eq=False)
class ChainRecord:
    """Thinned post-burn-in samples for every temperature slot.

    ``params`` has shape (M, R, P) in flat coordinate order, ``energies`` and
    ``log_prior`` have shape (M, R). Peaks are stored as sampled (unrelabeled).
    """

    spec: ModelSpec
    betas: np.ndarray
    n: int
    params: np.ndarray
    energies: np.ndarray
    log_prior: np.ndarray
    exchange_rates: np.ndarray
    accept_rates: np.ndarray
    steps: np.ndarray
    free: np.ndarray
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.betas.size

    @property
    def coordinate_names(self) -> list[str]:
        return self.spec.coordinate_names()


def _new_rng(seed_seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_seq))


def slot_streams(seed: int, M: int) -> tuple[list[np.random.Generator], np.random.Generator]:
    """One stream per temperature slot plus one for exchange decisions."""
    children = np.random.SeedSequence(seed).spawn(M + 1)
    return [_new_rng(c) for c in children[:M]], _new_rng(children[M])


def _log_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    # log of a uniform on (0, 1]
    return np.log1p(-rng.random(shape))


def _fixed_mask(spec: ModelSpec, fixed: Optional[Mapping[str, float]]):
    names = spec.coordinate_names()
    free = np.ones(len(names), dtype=np.bool_)
    values = np.zeros(len(names))
    for name, value in (fixed or {}).items():
        if name not in names:
            raise ValueError(f"unknown coordinate {name!r}; known: {names}")
        j = names.index(name)
        free[j] = False
        values[j] = value
    if not free.any():
        raise ValueError("at least one coordinate must be free")
    return free, values


class _Buffers:
    """Per-state caches and per-slot scratch arrays for the compiled kernels."""

    def __init__(self, M: int, spec: ModelSpec, n: int):
        K, P = spec.K, spec.n_params
        self.params = np.zeros((M, P))
        self.prof = np.zeros((M, K, n))
        self.cprof = np.zeros((M, K, n))
        self.f = np.zeros((M, n))
        self.ll = np.zeros(M)
        self.lp = np.zeros(M)
        self.s_prof = np.zeros((M, n))
        self.s_cprof = np.zeros((M, n))
        self.s_f = np.zeros((M, n))
        self.s_params = np.zeros((M, P))
        self.s_lbuf = np.zeros((M, n))
        self.s_ibuf = np.zeros((M, n), dtype=np.int64)

    def load(self, s: int, vec: np.ndarray, spec: ModelSpec, x, y, prior_table) -> float:
        self.params[s] = vec
        self.ll[s] = _kernels.init_state(self.params[s], spec.K, spec.basis.code, spec.background_kind.code,
                                         x, y, self.prof[s], self.cprof[s], self.f[s])
        self.lp[s] = _kernels.log_prior_total(self.params[s], *prior_table)
        return self.ll[s]


def _initial_vector(K, hyper, rng, free, fixed_values, spec, buf, s, x, y, table) -> None:
    for _ in range(MAX_INIT_TRIES):
        vec = sample_prior_vector(K, hyper, rng)
        vec = np.where(free, vec, fixed_values)
        ll = buf.load(s, vec, spec, x, y, table)
        if np.isfinite(ll) and np.isfinite(buf.lp[s]):
            return
    raise FloatingPointError(f"no prior draw with positive model rates in {MAX_INIT_TRIES} tries")


def adapt_step_sizes(steps: np.ndarray, rates: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Grow steps whose windowed acceptance is above 0.5, shrink those below 0.2."""
    out = np.where(rates > ADAPT_HIGH, steps * ADAPT_FACTOR, steps)
    out = np.where(rates < ADAPT_LOW, steps / ADAPT_FACTOR, out)
    out = np.where(np.isnan(rates), steps, out)
    return np.clip(out, STEP_CLAMP[0] * scales, STEP_CLAMP[1] * scales)


def adapt_steps(state: ReplicaState, scales: np.ndarray) -> ReplicaState:
    """Apply the step rule using the counts accumulated in ``state`` as the window, then reset them."""
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = state.accept_counts / state.attempt_counts
    steps = adapt_step_sizes(state.steps, rates, scales)
    return replace(state, steps=steps, accept_counts=np.zeros_like(state.accept_counts),
                   attempt_counts=np.zeros_like(state.attempt_counts))


def _tables(spectrum: Spectrum, spec: ModelSpec, hyper: PriorHyper):
    if hyper.background_kind is not spec.background_kind:
        raise ValueError(f"prior background {hyper.background_kind} does not match spec {spec.background_kind}")
    x = spectrum.x
    y = spectrum.y.astype(np.float64)
    return x, y, coordinate_priors(spec.K, hyper)


def replica_state(theta: Theta, spectrum: Spectrum, spec: ModelSpec, hyper: PriorHyper,
                  steps: Optional[np.ndarray] = None) -> ReplicaState:
    """Build a state with fresh caches; steps default to 0.1 x prior sd per coordinate."""
    theta.check(spec)
    x, y, table = _tables(spectrum, spec, hyper)
    buf = _Buffers(1, spec, spectrum.n)
    ll = buf.load(0, theta.to_vector(), spec, x, y, table)
    energy = (spectrum.log_factorial_sum - ll) / spectrum.n if np.isfinite(ll) else math.inf
    if steps is None:
        steps = INITIAL_STEP_FRACTION * proposal_scales(spec.K, hyper)
    P = spec.n_params
    return ReplicaState(theta, float(energy), float(buf.lp[0]), np.asarray(steps, dtype=np.float64).copy(),
                        np.zeros(P, dtype=np.int64), np.zeros(P, dtype=np.int64))


def metropolis_update(state: ReplicaState, beta: float, spectrum: Spectrum, spec: ModelSpec,
                      hyper: PriorHyper, rng: np.random.Generator) -> ReplicaState:
    """One sweep of single-coordinate random-walk Metropolis over every coordinate of theta."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    x, y, table = _tables(spectrum, spec, hyper)
    P = spec.n_params
    buf = _Buffers(1, spec, spectrum.n)
    buf.load(0, state.theta.to_vector(), spec, x, y, table)
    buf.lp[0] = state.log_prior
    z = rng.standard_normal(P)
    log_u = _log_uniform(rng, P)
    acc = state.accept_counts.reshape(1, P).astype(np.int64).copy()
    att = state.attempt_counts.reshape(1, P).astype(np.int64).copy()
    steps = state.steps.reshape(1, P).astype(np.float64)
    _kernels.sweep_state(0, 0, float(beta), steps, np.ones(P, dtype=np.bool_), z, log_u, buf.params,
                         buf.prof, buf.cprof, buf.f, buf.ll, buf.lp, spec.K, spec.basis.code,
                         spec.background_kind.code, x, y, *table, buf.s_prof, buf.s_cprof, buf.s_f,
                         buf.s_params, buf.s_lbuf, buf.s_ibuf, acc, att)
    ll = buf.ll[0]
    energy = (spectrum.log_factorial_sum - ll) / spectrum.n if np.isfinite(ll) else math.inf
    return ReplicaState(Theta.from_vector(buf.params[0], spec), float(energy), float(buf.lp[0]),
                        state.steps.copy(), acc[0], att[0])


def exchange_sweep(states: Sequence[ReplicaState], ladder: Ladder, n: int, rng: np.random.Generator,
                   parity: int = 0) -> tuple[list[ReplicaState], np.ndarray]:
    """Attempt swaps on neighbour pairs starting at ``parity`` (0 even, 1 odd).

    Swaps move theta and its cached energies; step sizes stay with the temperature.
    Returns the new states and a per-pair array (1 accepted, 0 rejected, -1 not attempted).
    """
    M = ladder.M
    if len(states) != M:
        raise ValueError(f"{len(states)} states for a ladder of {M}")
    order = np.arange(M)
    ll = np.array([-n * s.energy for s in states], dtype=np.float64)
    u = _log_uniform(rng, M - 1)
    xacc = np.zeros(M - 1, dtype=np.int64)
    xatt = np.zeros(M - 1, dtype=np.int64)
    _kernels.exchange_pairs(order, ll, ladder.betas, u, parity % 2, xacc, xatt)
    outcome = np.where(xatt > 0, xacc, -1)
    new = []
    for m in range(M):
        src = states[order[m]]
        new.append(replace(states[m], theta=src.theta, energy=src.energy, log_prior=src.log_prior))
    return new, outcome


def _check_caches(buf: _Buffers, spec: ModelSpec, x, y, table, sweep: int) -> None:
    M = buf.params.shape[0]
    scratch = _Buffers(1, spec, x.size)
    for s in range(M):
        ll = scratch.load(0, buf.params[s], spec, x, y, table)
        if not math.isclose(ll, buf.ll[s], rel_tol=1e-10, abs_tol=1e-10):
            raise AssertionError(f"cached log-likelihood drifted at sweep {sweep}: {buf.ll[s]} vs {ll}")
        if not math.isclose(scratch.lp[0], buf.lp[s], rel_tol=1e-10, abs_tol=1e-8):
            raise AssertionError(f"cached log prior drifted at sweep {sweep}: {buf.lp[s]} vs {scratch.lp[0]}")


def run_emc(spectrum: Spectrum, spec: ModelSpec, hyper: PriorHyper, config: SamplerConfig,
            fixed: Optional[Mapping[str, float]] = None) -> ChainRecord:
    """Run exchange Monte Carlo for one peak count and record every replica.

    ``fixed`` maps coordinate names (``"mu_1"``, ``"B"``, ...) to values held
    constant; those coordinates are never proposed.
    """
    x, y, table = _tables(spectrum, spec, hyper)
    ladder = build_ladder(config.replicas, config.gamma)
    M, P, K = ladder.M, spec.n_params, spec.K
    free, fixed_values = _fixed_mask(spec, fixed)
    rngs, xrng = slot_streams(config.seed, M)

    buf = _Buffers(M, spec, spectrum.n)
    for m in range(M):
        _initial_vector(K, hyper, rngs[m], free, fixed_values, spec, buf, m, x, y, table)

    scales = proposal_scales(K, hyper)
    steps = np.tile(INITIAL_STEP_FRACTION * scales, (M, 1))
    order = np.arange(M, dtype=np.int64)
    acc = np.zeros((M, P), dtype=np.int64)
    att = np.zeros((M, P), dtype=np.int64)
    xacc = np.zeros(M - 1, dtype=np.int64)
    xatt = np.zeros(M - 1, dtype=np.int64)
    exch_count = np.zeros(1, dtype=np.int64)
    R = config.n_records
    rec_params = np.zeros((M, R, P))
    rec_ll = np.zeros((M, R))
    rec_lp = np.zeros((M, R))
    rec_count = np.zeros(1, dtype=np.int64)
    run_block = _kernels.run_block_parallel if config.parallel else _kernels.run_block_serial

    sweep = 0
    while sweep < config.iterations:
        B = min(ADAPT_INTERVAL, config.iterations - sweep)
        z = np.empty((M, B, P))
        log_u = np.empty((M, B, P))
        for m in range(M):
            z[m] = rngs[m].standard_normal((B, P))
            log_u[m] = _log_uniform(rngs[m], (B, P))
        log_ux = _log_uniform(xrng, (B, M - 1))
        acc0 = acc.copy()
        att0 = att.copy()
        run_block(order, buf.params, buf.prof, buf.cprof, buf.f, buf.ll, buf.lp, K, spec.basis.code,
                  spec.background_kind.code, x, y, *table, ladder.betas, steps, free, z, log_u,
                  log_ux, sweep, config.exchange_period, exch_count, config.burn_in, config.thin,
                  rec_params, rec_ll, rec_lp, rec_count, acc, att, xacc, xatt, buf.s_prof,
                  buf.s_cprof, buf.s_f, buf.s_params, buf.s_lbuf, buf.s_ibuf)
        sweep += B
        if sweep <= config.burn_in and B == ADAPT_INTERVAL:
            with np.errstate(invalid="ignore", divide="ignore"):
                rates = (acc - acc0) / (att - att0)
            steps = adapt_step_sizes(steps, rates, scales)
        if config.debug and sweep % 1000 == 0:
            _check_caches(buf, spec, x, y, table, sweep)

    if rec_count[0] != R:
        raise RuntimeError(f"recorded {rec_count[0]} samples, expected {R}")
    energies = (spectrum.log_factorial_sum - rec_ll) / spectrum.n
    with np.errstate(invalid="ignore", divide="ignore"):
        post = max(config.iterations - config.burn_in, 1)
        accept_rates = acc / np.maximum(att, 1)
        exchange_rates = xacc / np.maximum(xatt, 1)
    log.debug("run_emc K=%d seed=%d done: %d sweeps, %d records (post-burn-in sweeps %d)",
              K, config.seed, config.iterations, R, post)
    return ChainRecord(spec=spec, betas=ladder.betas.copy(), n=spectrum.n, params=rec_params,
                       energies=energies, log_prior=rec_lp, exchange_rates=exchange_rates,
                       accept_rates=accept_rates, steps=steps, free=free, seed=config.seed)


@njit(cache=True)
def _discrete_emc(E, n, betas, sweeps, flip_u, exch_u, counts):
    M = betas.size
    state = np.zeros(M, dtype=np.int64)
    order = np.arange(M)
    ll = np.zeros(M)
    xacc = np.zeros(M - 1, dtype=np.int64)
    xatt = np.zeros(M - 1, dtype=np.int64)
    for m in range(M):
        ll[m] = -n * E[0]
    for t in range(sweeps):
        for m in range(M):
            s = order[m]
            proposal = 1 - state[s]
            new_ll = -n * E[proposal]
            if _kernels.metropolis_accept(betas[m] * (new_ll - ll[s]), flip_u[t, m]):
                state[s] = proposal
                ll[s] = new_ll
        _kernels.exchange_pairs(order, ll, betas, exch_u[t], t % 2, xacc, xatt)
        for m in range(M):
            counts[m, t] = state[order[m]]
    return xacc, xatt


def run_discrete_emc(energies: Sequence[float], ladder: Ladder, n: int, sweeps: int, seed: int) -> np.ndarray:
    """Exchange Monte Carlo on a two-state target p_beta(s) ~ exp(-n beta E[s]).

    Uses the same acceptance rule and neighbour-exchange kernel as :func:`run_emc`.
    Returns the state trajectory per temperature slot, shape (M, sweeps).
    """
    E = np.asarray(energies, dtype=np.float64)
    if E.shape != (2,):
        raise ValueError("two-state target needs exactly 2 energies")
    rng = np.random.default_rng(seed)
    M = ladder.M
    flip_u = _log_uniform(rng, (sweeps, M))
    exch_u = _log_uniform(rng, (sweeps, M - 1))
    traj = np.zeros((M, sweeps), dtype=np.int64)
    _discrete_emc(E, float(n), ladder.betas, sweeps, flip_u, exch_u, traj)
    return traj


def derive_seed(master: int, *key: int) -> int:
    """Deterministic 64-bit seed for a sub-run identified by an integer key path."""
    ss = np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))
    lo, hi = ss.generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)
