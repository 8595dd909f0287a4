"""Poisson measurement model and the tempered log target."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from bayespec.model import ModelSpec, Theta, as_grid, eval_model
from bayespec.priors import PriorHyper, log_prior_density


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Observed energies and integer counts."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = as_grid(self.x)
        y = np.asarray(self.y)
        if y.shape != x.shape:
            raise ValueError(f"counts have shape {y.shape}, energies {x.shape}")
        yf = y.astype(np.float64)
        if not np.all(np.isfinite(yf)) or np.any(yf < 0) or np.any(yf != np.round(yf)):
            raise ValueError("counts must be nonnegative integers")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", yf.astype(np.int64))

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def log_factorial_sum(self) -> float:
        return float(gammaln(self.y + 1.0).sum())


# Below this count the Stirling remainder is taken from lgamma directly.
_STIRLING_SERIES_MIN = 16.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _stirling_remainder(y: np.ndarray) -> np.ndarray:
    """log(y!) - (y + 1/2) log y + y - log(2 pi)/2 for y >= 1."""
    out = np.empty_like(y)
    small = y < _STIRLING_SERIES_MIN
    ys = y[small]
    out[small] = gammaln(ys + 1.0) - (ys + 0.5) * np.log(ys) + ys - _HALF_LOG_2PI
    yl = y[~small]
    r2 = 1.0 / (yl * yl)
    out[~small] = (1.0 / 12 - r2 * (1.0 / 360 - r2 * (1.0 / 1260 - r2 * (1.0 / 1680 - r2 / 1188)))) / yl
    return out


def _deviance_term(y: np.ndarray, f: np.ndarray) -> np.ndarray:
    """y log(y/f) + f - y, with a series near y = f to avoid cancellation."""
    out = y * np.log(y / f) + f - y
    near = np.abs(y - f) < 0.1 * (y + f)
    if np.any(near):
        yn, fn = y[near], f[near]
        v = (yn - fn) / (yn + fn)
        s = (yn - fn) * v
        ej = 2.0 * yn * v
        v2 = v * v
        for j in range(1, 12):
            ej = ej * v2
            s = s + ej / (2 * j + 1)
        out[near] = s
    return out


def _neg_log_pmf(y: np.ndarray, f: np.ndarray) -> np.ndarray:
    """-log Poisson(y | f) per point as a sum of nonnegative pieces, accurate when y and f are large."""
    out = f.copy()
    pos = y > 0
    if np.any(pos):
        yp, fp = y[pos], f[pos]
        out[pos] = _stirling_remainder(yp) + _deviance_term(yp, fp) + 0.5 * np.log(2.0 * math.pi * yp)
    return out


def poisson_log_pmf(y: int, rate: float) -> float:
    """log( rate^y exp(-rate) / y! )."""
    if not rate > 0:
        raise ValueError(f"Poisson rate must be positive, got {rate!r}")
    if y < 0 or int(y) != y:
        raise ValueError(f"count must be a nonnegative integer, got {y!r}")
    if y == 0:
        return -rate
    return -float(_neg_log_pmf(np.array([float(y)]), np.array([float(rate)]))[0])


def loss_from_rates(y: np.ndarray, f: np.ndarray) -> float:
    """Mean negative log-likelihood per point for rates f; +inf if any rate <= 0."""
    y = np.asarray(y, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if not np.all(f > 0):
        return math.inf
    return float(math.fsum(_neg_log_pmf(y, f)) / y.size)


def loss_E(spectrum: Spectrum, theta: Theta, spec: ModelSpec) -> float:
    """E(theta) = -(1/n) sum_i log p(y_i | f(x_i)), so that exp(-n E) is the likelihood."""
    return loss_from_rates(spectrum.y, eval_model(spectrum.x, theta, spec))


def tempered_neg_log_target(spectrum: Spectrum, theta: Theta, spec: ModelSpec, beta: float, prior: PriorHyper) -> float:
    """n * beta * E(theta) - log p(theta | K). +inf outside the likelihood or prior support."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    lp = log_prior_density(theta, spec.K, prior)
    if not np.isfinite(lp):
        return math.inf
    E = loss_E(spectrum, theta, spec)
    if not np.isfinite(E):
        return math.inf
    return spectrum.n * beta * E - lp
