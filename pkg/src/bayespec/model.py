"""Spectral model: peak basis functions, signal, Shirley cumulative and full spectrum."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from bayespec import _kernels


class Basis(enum.Enum):
    GAUSSIAN = "gaussian"
    PSEUDO_VOIGT = "pseudo_voigt"

    @property
    def code(self) -> int:
        return _kernels.GAUSSIAN if self is Basis.GAUSSIAN else _kernels.PSEUDO_VOIGT


class BackgroundKind(enum.Enum):
    CONSTANT = "constant"
    SHIRLEY = "shirley"

    @property
    def code(self) -> int:
        return _kernels.CONSTANT if self is BackgroundKind.CONSTANT else _kernels.SHIRLEY

    @property
    def n_params(self) -> int:
        return 1 if self is BackgroundKind.CONSTANT else 2


@dataclass(frozen=True)
class Peak:
    """One peak. ``tau`` is the inverse squared width (1/sigma^2 or b), in eV^-2."""

    amplitude: float
    mu: float
    tau: float

    @property
    def sigma(self) -> float:
        return 1.0 / math.sqrt(self.tau)


@dataclass(frozen=True)
class ConstantBackground:
    B: float


@dataclass(frozen=True)
class ShirleyBackground:
    c: float
    h_start: float


Background = Union[ConstantBackground, ShirleyBackground]


@dataclass(frozen=True)
class ModelSpec:
    basis: Basis = Basis.GAUSSIAN
    background_kind: BackgroundKind = BackgroundKind.CONSTANT
    K: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")

    @property
    def n_params(self) -> int:
        return 3 * self.K + self.background_kind.n_params

    def coordinate_names(self) -> list[str]:
        names = []
        for k in range(1, self.K + 1):
            names += [f"a_{k}", f"mu_{k}", f"tau_{k}"]
        if self.background_kind is BackgroundKind.CONSTANT:
            names.append("B")
        else:
            names += ["c", "h_start"]
        return names

    def with_K(self, K: int) -> "ModelSpec":
        return ModelSpec(self.basis, self.background_kind, K)


@dataclass(frozen=True)
class Theta:
    peaks: tuple[Peak, ...]
    background: Background = field(default_factory=lambda: ConstantBackground(0.0))

    def __post_init__(self):
        object.__setattr__(self, "peaks", tuple(self.peaks))

    @property
    def K(self) -> int:
        return len(self.peaks)

    def to_vector(self) -> np.ndarray:
        vec = [v for p in self.peaks for v in (p.amplitude, p.mu, p.tau)]
        if isinstance(self.background, ConstantBackground):
            vec.append(self.background.B)
        else:
            vec += [self.background.c, self.background.h_start]
        return np.asarray(vec, dtype=np.float64)

    @classmethod
    def from_vector(cls, vec: Sequence[float], spec: ModelSpec) -> "Theta":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != spec.n_params:
            raise ValueError(f"expected {spec.n_params} parameters for {spec}, got {vec.size}")
        K = spec.K
        peaks = tuple(Peak(float(vec[3 * k]), float(vec[3 * k + 1]), float(vec[3 * k + 2])) for k in range(K))
        if spec.background_kind is BackgroundKind.CONSTANT:
            bg: Background = ConstantBackground(float(vec[3 * K]))
        else:
            bg = ShirleyBackground(float(vec[3 * K]), float(vec[3 * K + 1]))
        return cls(peaks, bg)

    def sorted(self) -> "Theta":
        """Relabel peaks by ascending position."""
        return Theta(tuple(sorted(self.peaks, key=lambda p: p.mu)), self.background)

    def check(self, spec: ModelSpec) -> None:
        if self.K != spec.K:
            raise ValueError(f"theta has {self.K} peaks but spec.K = {spec.K}")
        want = ConstantBackground if spec.background_kind is BackgroundKind.CONSTANT else ShirleyBackground
        if not isinstance(self.background, want):
            raise ValueError(f"background {type(self.background).__name__} does not match {spec.background_kind}")


def sort_vector_by_mu(vec: np.ndarray, K: int) -> np.ndarray:
    """Relabel a flat parameter vector (or a stack of them) by ascending peak position."""
    vec = np.asarray(vec, dtype=np.float64)
    flat = vec.reshape(-1, vec.shape[-1])
    out = flat.copy()
    peaks = flat[:, : 3 * K].reshape(-1, K, 3)
    order = np.argsort(peaks[:, :, 1], axis=1, kind="stable")
    out[:, : 3 * K] = np.take_along_axis(peaks, order[:, :, None], axis=1).reshape(-1, 3 * K)
    return out.reshape(vec.shape)


def as_grid(x) -> np.ndarray:
    """Validate and return an energy grid (strictly increasing, at least 2 points)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("grid needs at least 2 points")
    if not np.all(np.isfinite(x)):
        raise ValueError("grid contains non-finite energies")
    if np.any(np.diff(x) <= 0):
        raise ValueError("grid must be strictly increasing")
    return x


def uniform_grid(start: float = 158.0, stop: float = 166.0, step: float = 0.04) -> np.ndarray:
    n = int(round((stop - start) / step)) + 1
    return as_grid(start + step * np.arange(n))


def eval_basis(x: float, peak: Peak, basis: Basis) -> float:
    """Unit-height basis value at x; equals 1 exactly at ``peak.mu``."""
    if not math.isfinite(x):
        raise ValueError(f"non-finite energy {x!r}")
    if not (peak.tau > 0 and math.isfinite(peak.tau)):
        raise ValueError(f"tau must be positive and finite, got {peak.tau!r}")
    d = x - peak.mu
    return float(_kernels.basis_value(d * d * peak.tau, basis.code))


def eval_signal(x: float, theta: Theta, spec: ModelSpec) -> float:
    theta.check(spec)
    return float(sum(p.amplitude * eval_basis(x, p, spec.basis) for p in theta.peaks))


def _profiles(grid: np.ndarray, theta: Theta, basis: Basis, cumulative: bool) -> np.ndarray:
    out = np.empty((theta.K, grid.size))
    for k, p in enumerate(theta.peaks):
        if not (p.tau > 0 and math.isfinite(p.tau)):
            raise ValueError(f"tau must be positive and finite, got {p.tau!r}")
        if cumulative:
            _kernels.cumulative_profile(grid, p.mu, p.tau, basis.code, out[k])
        else:
            _kernels.profile(grid, p.mu, p.tau, basis.code, out[k], np.empty(grid.size, dtype=np.int64))
    return out


def peak_components(grid, theta: Theta, spec: ModelSpec) -> np.ndarray:
    """Per-peak signal a_k * phi_k on the grid, shape (K, n)."""
    theta.check(spec)
    grid = as_grid(grid)
    amps = np.array([p.amplitude for p in theta.peaks])
    return amps[:, None] * _profiles(grid, theta, spec.basis, cumulative=False)


def cumulative_signal(grid, theta: Theta, spec: ModelSpec) -> np.ndarray:
    """Integral of the signal from -inf to each grid point.

    Gaussian peaks use the error function; pseudo-Voigt peaks use the closed-form
    total mass for the half below the centre plus composite Simpson quadrature.
    """
    theta.check(spec)
    grid = as_grid(grid)
    if theta.K == 0:
        return np.zeros(grid.size)
    prof = _profiles(grid, theta, spec.basis, cumulative=True)
    # plain peak-by-peak sums keep the result monotone (a BLAS product need not be)
    out = np.zeros(grid.size)
    for k, p in enumerate(theta.peaks):
        out += p.amplitude * prof[k]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"cumulative signal is not finite for theta={theta}")
    return out


def background_curve(grid, theta: Theta, spec: ModelSpec) -> np.ndarray:
    theta.check(spec)
    grid = as_grid(grid)
    bg = theta.background
    if isinstance(bg, ConstantBackground):
        return np.full(grid.size, bg.B)
    return bg.c * cumulative_signal(grid, theta, spec) + bg.h_start


def eval_model(grid, theta: Theta, spec: ModelSpec) -> np.ndarray:
    """f(x_i) = G(x_i) + B(x_i) on every grid point."""
    grid = as_grid(grid)
    return peak_components(grid, theta, spec).sum(axis=0) + background_curve(grid, theta, spec)
