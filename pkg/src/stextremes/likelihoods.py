"""Gumbel, GEV and Gaussian observation models.

All densities are parameterized by a location ``mu`` (the linear predictor
enters here), a scale ``sigma > 0`` and, for the GEV, a tail ``xi``. The
first and second log-density derivatives in ``mu`` feed the inner Newton
step of the inference engine.

The GEV switches to the exact Gumbel limit expressions for |xi| below
``GEV_TAIL_SWITCH``. Scale and tail are global per likelihood block, never
spatially varying. Internally the Gumbel/GEV precision bookkeeping uses
tau = 1 / sigma^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import ndtr, ndtri

from .errors import ConfigError

GEV_TAIL_SWITCH = 1e-7
EULER_GAMMA = float(np.euler_gamma)


@dataclass(frozen=True)
class GumbelParams:
    location: float
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError(f"Gumbel scale must be positive, got {self.scale}")

    @property
    def precision(self) -> float:
        return 1.0 / self.scale**2


@dataclass(frozen=True)
class GevParams:
    location: float
    scale: float
    tail: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError(f"GEV scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class GaussianParams:
    location: float
    sd: float

    def __post_init__(self):
        if self.sd <= 0:
            raise ConfigError(f"Gaussian sd must be positive, got {self.sd}")


# ---------------------------------------------------------------------------
# vectorized kernels (mu may be an array; sigma, xi are scalars)
# ---------------------------------------------------------------------------


def _check_sigma(sigma) -> None:
    if np.any(np.asarray(sigma) <= 0):
        raise ConfigError("scale must be positive")


def gumbel_cdf_values(x, mu, sigma):
    _check_sigma(sigma)
    z = (np.asarray(x, dtype=float) - mu) / sigma
    with np.errstate(over="ignore"):
        return np.exp(-np.exp(-z))


def gumbel_logpdf_values(x, mu, sigma):
    _check_sigma(sigma)
    z = (np.asarray(x, dtype=float) - mu) / sigma
    with np.errstate(over="ignore"):
        return -np.log(sigma) - z - np.exp(-z)


def gumbel_quantile_values(p, mu, sigma):
    _check_sigma(sigma)
    p = np.asarray(p, dtype=float)
    return mu - sigma * np.log(-np.log(p))


def gev_cdf_values(x, mu, sigma, xi):
    _check_sigma(sigma)
    x = np.asarray(x, dtype=float)
    if abs(xi) < GEV_TAIL_SWITCH:
        return gumbel_cdf_values(x, mu, sigma)
    t = 1.0 + xi * (x - mu) / sigma
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        inner = np.where(t > 0, t, 1.0) ** (-1.0 / xi)
        cdf = np.exp(-inner)
    if xi > 0:
        cdf = np.where(t > 0, cdf, 0.0)  # below the lower endpoint
    else:
        cdf = np.where(t > 0, cdf, 1.0)  # above the upper endpoint
    return cdf


def gev_logpdf_values(x, mu, sigma, xi):
    _check_sigma(sigma)
    x = np.asarray(x, dtype=float)
    if abs(xi) < GEV_TAIL_SWITCH:
        return gumbel_logpdf_values(x, mu, sigma)
    t = 1.0 + xi * (x - mu) / sigma
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        ts = np.where(t > 0, t, 1.0)
        logpdf = -np.log(sigma) - (1.0 + 1.0 / xi) * np.log(ts) - ts ** (-1.0 / xi)
    return np.where(t > 0, logpdf, -np.inf)


def gev_quantile_values(p, mu, sigma, xi):
    _check_sigma(sigma)
    p = np.asarray(p, dtype=float)
    if abs(xi) < GEV_TAIL_SWITCH:
        return gumbel_quantile_values(p, mu, sigma)
    return mu + sigma * ((-np.log(p)) ** (-xi) - 1.0) / xi


def gaussian_cdf_values(x, mu, sigma):
    _check_sigma(sigma)
    return ndtr((np.asarray(x, dtype=float) - mu) / sigma)


def gaussian_logpdf_values(x, mu, sigma):
    _check_sigma(sigma)
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return -0.5 * z**2 - np.log(sigma) - 0.5 * np.log(2.0 * np.pi)


def gaussian_quantile_values(p, mu, sigma):
    _check_sigma(sigma)
    return mu + sigma * ndtri(np.asarray(p, dtype=float))


def gumbel_mu_derivs(x, mu, sigma):
    """(d/dmu, d2/dmu2) of the Gumbel log-density; strictly concave."""
    z = (np.asarray(x, dtype=float) - mu) / sigma
    with np.errstate(over="ignore"):
        emz = np.exp(-z)
    d1 = (1.0 - emz) / sigma
    d2 = -emz / sigma**2
    return d1, d2


def gev_mu_derivs(x, mu, sigma, xi):
    """(d/dmu, d2/dmu2) of the GEV log-density on its support.

    For xi > 0 the second derivative can turn positive; the inner
    optimizer handles that with a damped-step fallback.
    """
    if abs(xi) < GEV_TAIL_SWITCH:
        return gumbel_mu_derivs(x, mu, sigma)
    x = np.asarray(x, dtype=float)
    t = 1.0 + xi * (x - mu) / sigma
    if np.any(t <= 0):
        raise ConfigError("GEV derivative requested outside the support")
    d1 = (1.0 + xi) / (sigma * t) - t ** (-1.0 / xi - 1.0) / sigma
    d2 = (
        xi * (1.0 + xi) / (sigma**2 * t**2)
        - (1.0 + xi) * t ** (-1.0 / xi - 2.0) / sigma**2
    )
    return d1, d2


def gaussian_mu_derivs(x, mu, sigma):
    x = np.asarray(x, dtype=float)
    d1 = (x - mu) / sigma**2
    d2 = np.full_like(d1, -1.0 / sigma**2)
    return d1, d2


# ---------------------------------------------------------------------------
# family dispatch used by the inference engine
# ---------------------------------------------------------------------------


class Family:
    """Vectorized observation-model interface for one likelihood family.

    ``scale`` below is (sigma,) for gumbel/gaussian and (sigma, xi) for gev.
    """

    def __init__(self, name: str):
        if name not in ("gumbel", "gev", "gaussian"):
            raise ConfigError(f"unknown likelihood family '{name}'")
        self.name = name

    @property
    def n_scale_params(self) -> int:
        return 2 if self.name == "gev" else 1

    def logpdf(self, y, mu, scale):
        if self.name == "gumbel":
            return gumbel_logpdf_values(y, mu, scale[0])
        if self.name == "gev":
            return gev_logpdf_values(y, mu, scale[0], scale[1])
        return gaussian_logpdf_values(y, mu, scale[0])

    def cdf(self, y, mu, scale):
        if self.name == "gumbel":
            return gumbel_cdf_values(y, mu, scale[0])
        if self.name == "gev":
            return gev_cdf_values(y, mu, scale[0], scale[1])
        return gaussian_cdf_values(y, mu, scale[0])

    def quantile(self, p, mu, scale):
        if self.name == "gumbel":
            return gumbel_quantile_values(p, mu, scale[0])
        if self.name == "gev":
            return gev_quantile_values(p, mu, scale[0], scale[1])
        return gaussian_quantile_values(p, mu, scale[0])

    def mu_derivs(self, y, mu, scale):
        if self.name == "gumbel":
            return gumbel_mu_derivs(y, mu, scale[0])
        if self.name == "gev":
            return gev_mu_derivs(y, mu, scale[0], scale[1])
        return gaussian_mu_derivs(y, mu, scale[0])

    def mean_given_mu(self, mu, scale):
        """Conditional response mean E[Y | mu]."""
        if self.name == "gumbel":
            return mu + EULER_GAMMA * scale[0]
        if self.name == "gev":
            sigma, xi = scale
            if abs(xi) < GEV_TAIL_SWITCH:
                return mu + EULER_GAMMA * sigma
            if xi >= 1:
                return np.full_like(np.asarray(mu, dtype=float), np.inf)
            return mu + sigma * (gamma_fn(1.0 - xi) - 1.0) / xi
        return np.asarray(mu, dtype=float)

    def var_given_mu(self, scale):
        """Conditional response variance Var[Y | mu] (mu-free)."""
        if self.name == "gumbel":
            return np.pi**2 * scale[0] ** 2 / 6.0
        if self.name == "gev":
            sigma, xi = scale
            if abs(xi) < GEV_TAIL_SWITCH:
                return np.pi**2 * sigma**2 / 6.0
            if xi >= 0.5:
                return np.inf
            g1 = gamma_fn(1.0 - xi)
            g2 = gamma_fn(1.0 - 2.0 * xi)
            return sigma**2 * (g2 - g1**2) / xi**2
        return scale[0] ** 2

    def draw(self, rng, mu, scale):
        """Inverse-CDF draws, one per entry of mu."""
        mu = np.asarray(mu, dtype=float)
        u = rng.uniform(size=mu.shape)
        return self.quantile(u, mu, scale)


GUMBEL = Family("gumbel")
GEV = Family("gev")
GAUSSIAN = Family("gaussian")
FAMILIES = {"gumbel": GUMBEL, "gev": GEV, "gaussian": GAUSSIAN}


# ---------------------------------------------------------------------------
# scalar parameter-object API
# ---------------------------------------------------------------------------


def gumbel_cdf(x, params: GumbelParams):
    return gumbel_cdf_values(x, params.location, params.scale)


def gumbel_logpdf(x, params: GumbelParams):
    return gumbel_logpdf_values(x, params.location, params.scale)


def gev_cdf(x, params: GevParams):
    return gev_cdf_values(x, params.location, params.scale, params.tail)


def gev_logpdf(x, params: GevParams):
    return gev_logpdf_values(x, params.location, params.scale, params.tail)


def gaussian_cdf(x, params: GaussianParams):
    return gaussian_cdf_values(x, params.location, params.sd)


def gaussian_logpdf(x, params: GaussianParams):
    return gaussian_logpdf_values(x, params.location, params.sd)


def loglik_derivs(x, family: str, params):
    """First and second log-density derivatives in the location parameter."""
    if family == "gumbel":
        return gumbel_mu_derivs(x, params.location, params.scale)
    if family == "gev":
        t = 1.0 + params.tail * (np.asarray(x, dtype=float) - params.location) / params.scale
        if abs(params.tail) >= GEV_TAIL_SWITCH and np.any(t <= 0):
            raise ConfigError(f"x={x} outside GEV support")
        return gev_mu_derivs(x, params.location, params.scale, params.tail)
    if family == "gaussian":
        return gaussian_mu_derivs(x, params.location, params.sd)
    raise ConfigError(f"unknown likelihood family '{family}'")
