"""Merton market model: parameters, CRRA utility and closed-form benchmarks."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
import torch

from .errors import ConfigError, DomainError, NumericError


@dataclass(frozen=True)
class MarketParams:
    """Market and preference constants (rates per year, horizon in years)."""

    r: float = 0.03
    mu: float = 0.12
    sigma: float = 0.2
    rho: float = 0.02
    gamma: float = 2.0
    kappa: float = 0.01
    T: float = 1.0

    def __post_init__(self):
        for name in ("r", "mu", "sigma", "rho", "gamma", "kappa", "T"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(name, "must be finite")
        if self.sigma <= 0:
            raise ConfigError("sigma", "must be > 0")
        if self.gamma <= 0:
            raise ConfigError("gamma", "must be > 0")
        if self.gamma == 1:
            raise ConfigError("gamma", "log utility (gamma = 1) is not supported")
        if self.T <= 0:
            raise ConfigError("T", "must be > 0")
        if self.kappa < 0:
            raise ConfigError("kappa", "must be >= 0")
        if self.rho < 0:
            raise ConfigError("rho", "must be >= 0")
        if self.mu <= self.r:
            warnings.warn("mu <= r: the risky asset carries no excess return", stacklevel=3)

    @property
    def epsilon(self) -> float:
        return self.kappa ** (1.0 / self.gamma)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Domain:
    """Rectangle of initial (time, wealth) nodes."""

    t_min: float = 0.0
    t_max: float = 1.0
    x_min: float = 0.1
    x_max: float = 2.0

    def __post_init__(self):
        if not (0.0 <= self.t_min <= self.t_max):
            raise ConfigError("t_min", "need 0 <= t_min <= t_max")
        if not (0.0 < self.x_min <= self.x_max):
            raise ConfigError("x_min", "need 0 < x_min <= x_max")

    def check(self, p: MarketParams) -> None:
        if self.t_max > p.T:
            raise ConfigError("t_max", f"exceeds the horizon T={p.T}")

    def to_dict(self) -> dict:
        return asdict(self)


def kappa_from_epsilon(epsilon: float, gamma: float) -> float:
    """Bequest weight kappa = epsilon ** gamma."""
    if epsilon <= 0:
        raise DomainError("epsilon must be > 0")
    return epsilon**gamma


def utility(c, gamma: float):
    """CRRA utility c^(1-gamma) / (1-gamma).

    Accepts floats, numpy arrays, torch tensors or autodiff Vars.
    """
    _positive(c)
    return c ** (1.0 - gamma) / (1.0 - gamma)


def utility_prime(c, gamma: float):
    _positive(c)
    return c ** (-gamma)


def _positive(c) -> None:
    if isinstance(c, torch.Tensor):
        bad = not bool((c > 0).all())
    elif isinstance(c, np.ndarray):
        bad = not bool((c > 0).all())
    else:
        bad = not float(c) > 0
    if bad:
        raise DomainError("utility needs strictly positive consumption")


def _exact(p: MarketParams):
    # Parameters are decimal literals (0.12, 0.03, ...); their shortest repr
    # recovers the decimal exactly, so the rational result is rounded once.
    return tuple(Fraction(repr(float(v))) for v in (p.r, p.mu, p.sigma, p.rho, p.gamma))


def closed_form_pi(p: MarketParams) -> float:
    """Merton fraction (mu - r) / (gamma sigma^2), correctly rounded."""
    r, mu, sigma, _, g = _exact(p)
    return float((mu - r) / (g * sigma**2))


def closed_form_nu(p: MarketParams) -> float:
    """Infinite-horizon consumption rate, correctly rounded."""
    r, mu, sigma, rho, g = _exact(p)
    return float((rho - (1 - g) * ((mu - r) ** 2 / (2 * sigma**2 * g) + r)) / g)


def consumption_rate(p: MarketParams, t):
    """Optimal finite-horizon consumption per unit of wealth at time t."""
    if p.kappa <= 0:
        raise DomainError("finite-horizon consumption formula needs kappa > 0")
    nu = closed_form_nu(p)
    eps = p.epsilon
    # 1 + (nu eps - 1) e^{-nu tau}, arranged to avoid cancellation near t = T
    if isinstance(t, torch.Tensor):
        a = -nu * (p.T - t)
        denom = nu * eps * torch.exp(a) - torch.expm1(a)
        ok = bool((denom > 0).all())
    else:
        a = -nu * (p.T - np.asarray(t, dtype=np.float64))
        denom = nu * eps * np.exp(a) - np.expm1(a)
        ok = bool(np.all(denom > 0))
        if np.ndim(denom) == 0:
            denom = float(denom)
    if not ok:
        raise NumericError("closed-form consumption denominator is not positive")
    return nu / denom


def closed_form_consumption(p: MarketParams, t, x):
    return consumption_rate(p, t) * x


def closed_form_policies(p: MarketParams):
    """(investment, consumption) as :class:`~merton_pgdpo.nn.ClosedFormPolicy` modules."""
    from .nn import CONSUME, INVEST, ClosedFormPolicy

    pi_star = closed_form_pi(p)

    def invest(t, x):
        if isinstance(x, torch.Tensor):
            return torch.full_like(x, pi_star)
        if isinstance(x, np.ndarray):
            return np.full_like(x, pi_star)
        return pi_star

    def consume(t, x):
        return closed_form_consumption(p, t, x)

    return ClosedFormPolicy(invest, INVEST), ClosedFormPolicy(consume, CONSUME)
