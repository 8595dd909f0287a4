"""Priors over peak and background parameters given K.

All Gamma distributions use the shape/rate form, density
``lam**eta / Gamma(eta) * x**(eta - 1) * exp(-lam * x)``. Widths are sampled as
``tau = 1/sigma^2`` with the Gamma density measured in tau.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Union

import numpy as np
from scipy.special import polygamma

from bayespec import _kernels
from bayespec.model import BackgroundKind, ModelSpec, Theta

PRESETS = ("Synthetic4", "MoS2_5")


@dataclass(frozen=True)
class ConstantPrior:
    nu_B: float
    xi_B: float


@dataclass(frozen=True)
class ShirleyPrior:
    eta_c: float
    lambda_c: float
    nu_start: float
    xi_start: float


@dataclass(frozen=True)
class PriorHyper:
    eta_a: float
    lambda_a: float
    nu_0: float
    xi_0: float
    eta_sigma: float
    lambda_sigma: float
    background: Union[ConstantPrior, ShirleyPrior]

    def __post_init__(self):
        positive = [self.eta_a, self.lambda_a, self.xi_0, self.eta_sigma, self.lambda_sigma]
        bg = self.background
        if isinstance(bg, ConstantPrior):
            positive.append(bg.xi_B)
        else:
            positive += [bg.eta_c, bg.lambda_c, bg.xi_start]
        if not all(math.isfinite(v) and v > 0 for v in positive):
            raise ValueError(f"shape, rate and sd hyperparameters must be positive: {self}")

    @property
    def background_kind(self) -> BackgroundKind:
        if isinstance(self.background, ConstantPrior):
            return BackgroundKind.CONSTANT
        return BackgroundKind.SHIRLEY

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"]["kind"] = self.background_kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PriorHyper":
        d = dict(d)
        bg = dict(d.pop("background"))
        kind = bg.pop("kind", None)
        if kind is None:
            kind = "constant" if "nu_B" in bg else "shirley"
        bg_obj = ConstantPrior(**bg) if kind == "constant" else ShirleyPrior(**bg)
        return cls(background=bg_obj, **d)


def preset(name: str, T: float) -> PriorHyper:
    """Named hyperparameter sets for pseudo-measurement time T.

    ``Synthetic4`` is the three-Gaussian constant-background benchmark and
    ``MoS2_5`` the pseudo-Voigt/Shirley setting for S 2p spectra. The amplitude
    rate is ``2/T`` so that the prior mean amplitude grows with T.
    """
    if not (T > 0 and math.isfinite(T)):
        raise ValueError(f"T must be positive, got {T!r}")
    if name == "Synthetic4":
        return PriorHyper(
            eta_a=2.0, lambda_a=2.0 / T,
            nu_0=160.0, xi_0=2.0,
            eta_sigma=10.0, lambda_sigma=2.5,
            background=ConstantPrior(nu_B=0.1 * T, xi_B=0.01 * T),
        )
    if name == "MoS2_5":
        return PriorHyper(
            eta_a=2.0, lambda_a=2.0 / T,
            nu_0=160.0, xi_0=5.0,
            eta_sigma=10.0, lambda_sigma=0.4,
            background=ShirleyPrior(eta_c=0.8, lambda_c=0.8, nu_start=0.35 * T, xi_start=0.1 * T),
        )
    raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")


def coordinate_priors(K: int, hyper: PriorHyper) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-coordinate prior table (kind, p1, p2) in flat parameter order.

    Gamma rows carry (shape, rate), Normal rows (mean, sd).
    """
    G, N = _kernels.PRIOR_GAMMA, _kernels.PRIOR_NORMAL
    rows = [
        (G, hyper.eta_a, hyper.lambda_a),
        (N, hyper.nu_0, hyper.xi_0),
        (G, hyper.eta_sigma, hyper.lambda_sigma),
    ] * K
    bg = hyper.background
    if isinstance(bg, ConstantPrior):
        rows.append((N, bg.nu_B, bg.xi_B))
    else:
        rows += [(G, bg.eta_c, bg.lambda_c), (N, bg.nu_start, bg.xi_start)]
    kind = np.array([r[0] for r in rows], dtype=np.int64)
    p1 = np.array([r[1] for r in rows], dtype=np.float64)
    p2 = np.array([r[2] for r in rows], dtype=np.float64)
    return kind, p1, p2


def proposal_scales(K: int, hyper: PriorHyper) -> np.ndarray:
    """Prior sd of each sampled coordinate: log-coordinate sd for Gamma rows, sd for Normal rows."""
    kind, p1, p2 = coordinate_priors(K, hyper)
    return np.where(kind == _kernels.PRIOR_GAMMA, np.sqrt(polygamma(1, p1)), p2)


def log_prior_density(theta: Theta, K: int, hyper: PriorHyper) -> float:
    """log p(theta | K); -inf outside the support."""
    if theta.K != K:
        raise ValueError(f"theta has {theta.K} peaks, expected K={K}")
    theta.check(ModelSpec(K=K, background_kind=hyper.background_kind))
    kind, p1, p2 = coordinate_priors(K, hyper)
    return float(_kernels.log_prior_total(theta.to_vector(), kind, p1, p2))


def sample_prior_vector(K: int, hyper: PriorHyper, rng: np.random.Generator) -> np.ndarray:
    kind, p1, p2 = coordinate_priors(K, hyper)
    out = np.empty(kind.size)
    for j in range(kind.size):
        if kind[j] == _kernels.PRIOR_GAMMA:
            out[j] = rng.gamma(p1[j], 1.0 / p2[j])
        else:
            out[j] = rng.normal(p1[j], p2[j])
    return out


def sample_prior(K: int, hyper: PriorHyper, rng: np.random.Generator) -> Theta:
    spec = ModelSpec(K=K, background_kind=hyper.background_kind)
    return Theta.from_vector(sample_prior_vector(K, hyper, rng), spec)


def uniform_K_prior(k_range: tuple[int, int]) -> dict[int, float]:
    """Discrete uniform prior over K in [k_min, k_max]."""
    k_min, k_max = k_range
    if k_min < 1 or k_max < k_min:
        raise ValueError(f"empty K range {k_range}")
    count = k_max - k_min + 1
    return {k: 1.0 / count for k in range(k_min, k_max + 1)}
