"""Exponential-family kernels for claim frequency and severity regression.

Four response distributions are supported, all paired with a log link:

- Poisson and Negative Binomial (NB2) for claim counts,
- Gamma and Inverse-Gaussian for average claim severities.

Every density is written in dispersion form

    p(y | theta, phi) = h(y, w, phi) * exp(w / phi * (theta * y - A(theta)))

so that ``variance(mu) = A''(theta)``.  All functions are vectorised over
numpy arrays and free of side effects.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import gammaln

MU_MIN = 1e-12
MU_MAX = 1e12


class DomainError(ValueError):
    """Argument outside the support of a distribution or function."""


class DegreesOfFreedomError(ValueError):
    """Not enough observations left to estimate a dispersion."""


class DegenerateDispersionWarning(RuntimeWarning):
    pass


class FamilyKind(str, enum.Enum):
    POISSON = "poisson"
    NEGATIVE_BINOMIAL = "negative_binomial"
    GAMMA = "gamma"
    INVERSE_GAUSSIAN = "inverse_gaussian"


@dataclass(frozen=True)
class Family:
    """A response distribution.

    ``nb_size`` is the NB2 size parameter r in ``v(mu) = mu + mu**2 / r``;
    it must be set for the Negative Binomial and left ``None`` otherwise.
    """

    kind: FamilyKind
    nb_size: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FamilyKind(self.kind))
        if self.kind is FamilyKind.NEGATIVE_BINOMIAL:
            if self.nb_size is None or not self.nb_size > 0:
                raise DomainError("negative binomial needs a positive nb_size")
        elif self.nb_size is not None:
            raise DomainError(f"nb_size only applies to the negative binomial, not {self.kind.value}")

    @property
    def is_count(self) -> bool:
        return self.kind in (FamilyKind.POISSON, FamilyKind.NEGATIVE_BINOMIAL)

    @property
    def has_free_dispersion(self) -> bool:
        """True when phi is estimated rather than fixed at one."""
        return self.kind in (FamilyKind.GAMMA, FamilyKind.INVERSE_GAUSSIAN)

    def with_size(self, size: float) -> Family:
        return Family(self.kind, float(size))

    @property
    def short(self) -> str:
        return {
            FamilyKind.POISSON: "P",
            FamilyKind.NEGATIVE_BINOMIAL: "NB",
            FamilyKind.GAMMA: "G",
            FamilyKind.INVERSE_GAUSSIAN: "IG",
        }[self.kind]


def poisson() -> Family:
    return Family(FamilyKind.POISSON)


def negative_binomial(size: float = 1.0) -> Family:
    return Family(FamilyKind.NEGATIVE_BINOMIAL, size)


def gamma() -> Family:
    return Family(FamilyKind.GAMMA)


def inverse_gaussian() -> Family:
    return Family(FamilyKind.INVERSE_GAUSSIAN)


class LogLink:
    """g(mu) = log(mu)."""

    name = "log"

    @staticmethod
    def link(mu: ArrayLike) -> NDArray:
        return np.log(mu)

    @staticmethod
    def inverse(eta: ArrayLike) -> NDArray:
        return np.exp(eta)

    @staticmethod
    def derivative(mu: ArrayLike) -> NDArray:
        """g'(mu)."""
        return 1.0 / np.asarray(mu, dtype=float)


def clamp_mu(mu: ArrayLike) -> NDArray:
    return np.clip(np.asarray(mu, dtype=float), MU_MIN, MU_MAX)


def _check_mu(mu: ArrayLike) -> NDArray:
    mu = np.asarray(mu, dtype=float)
    if np.any(~(mu > 0)):
        raise DomainError("mu must be strictly positive")
    return mu


def _check_y(family: Family, y: ArrayLike) -> NDArray:
    y = np.asarray(y, dtype=float)
    if family.is_count:
        if np.any(~(y >= 0)) or np.any(np.abs(y - np.round(y)) > 1e-9):
            raise DomainError(f"{family.kind.value} responses must be nonnegative integers")
    elif np.any(~(y > 0)):
        raise DomainError(f"{family.kind.value} responses must be strictly positive")
    return y


def _check_positive(name: str, value: ArrayLike) -> NDArray:
    value = np.asarray(value, dtype=float)
    if np.any(~(value > 0)):
        raise DomainError(f"{name} must be strictly positive")
    return value


def variance(family: Family, mu: ArrayLike) -> NDArray | float:
    mu = _check_mu(mu)
    kind = family.kind
    if kind is FamilyKind.POISSON:
        out = mu.copy()
    elif kind is FamilyKind.NEGATIVE_BINOMIAL:
        out = mu + mu**2 / family.nb_size
    elif kind is FamilyKind.GAMMA:
        out = mu**2
    else:
        out = mu**3
    return out if out.ndim else float(out)


def theta(family: Family, mu: ArrayLike) -> NDArray:
    """Canonical parameter as a function of the mean."""
    mu = np.asarray(mu, dtype=float)
    kind = family.kind
    if kind is FamilyKind.POISSON:
        return np.log(mu)
    if kind is FamilyKind.NEGATIVE_BINOMIAL:
        return np.log(mu / (mu + family.nb_size))
    if kind is FamilyKind.GAMMA:
        return -1.0 / mu
    return -0.5 / mu**2


def cumulant(family: Family, th: ArrayLike) -> NDArray:
    """A(theta)."""
    th = np.asarray(th, dtype=float)
    kind = family.kind
    if kind is FamilyKind.POISSON:
        return np.exp(th)
    if kind is FamilyKind.NEGATIVE_BINOMIAL:
        return -family.nb_size * np.log1p(-np.exp(th))
    if kind is FamilyKind.GAMMA:
        return -np.log(-th)
    return -np.sqrt(-2.0 * th)


def mean_from_theta(family: Family, th: ArrayLike) -> NDArray:
    """A'(theta), the inverse of :func:`theta`."""
    th = np.asarray(th, dtype=float)
    kind = family.kind
    if kind is FamilyKind.POISSON:
        return np.exp(th)
    if kind is FamilyKind.NEGATIVE_BINOMIAL:
        e = np.exp(th)
        return family.nb_size * e / (1.0 - e)
    if kind is FamilyKind.GAMMA:
        return -1.0 / th
    return 1.0 / np.sqrt(-2.0 * th)


def kernel(family: Family, y: ArrayLike, mu: ArrayLike) -> NDArray:
    """theta(mu) * y - A(theta(mu)), the mu-dependent part of the log-density."""
    th = theta(family, mu)
    return th * np.asarray(y, dtype=float) - cumulant(family, th)


def log_density(
    family: Family,
    y: ArrayLike,
    mu: ArrayLike,
    phi: ArrayLike = 1.0,
    w: ArrayLike = 1.0,
) -> NDArray | float:
    """Exact log-density (or log-mass) including normalising terms.

    For the severity families ``w`` is the number of claims averaged into
    ``y`` so that the variance is ``phi * v(mu) / w``.  For the count
    families ``phi`` is fixed at one and ``w`` multiplies the
    log-likelihood contribution as a frequency weight.
    """
    y = _check_y(family, y)
    mu = _check_mu(mu)
    phi = _check_positive("phi", phi)
    w = _check_positive("w", w)
    kind = family.kind
    if kind is FamilyKind.POISSON:
        out = w * (y * np.log(mu) - mu - gammaln(y + 1.0))
    elif kind is FamilyKind.NEGATIVE_BINOMIAL:
        r = family.nb_size
        out = w * (
            gammaln(y + r)
            - gammaln(r)
            - gammaln(y + 1.0)
            + r * np.log(r / (r + mu))
            + _xlogy(y, mu / (r + mu))
        )
    elif kind is FamilyKind.GAMMA:
        shape = w / phi
        out = shape * np.log(shape / mu) + (shape - 1.0) * np.log(y) - shape * y / mu - gammaln(shape)
    else:
        lam = w / phi
        out = 0.5 * np.log(lam / (2.0 * np.pi * y**3)) - lam * (y - mu) ** 2 / (2.0 * mu**2 * y)
    return out if np.ndim(out) else float(out)


def _xlogy(x, y):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x == 0, 0.0, x * np.log(y))


def deviance(family: Family, y: ArrayLike, mu: ArrayLike, w: ArrayLike = 1.0) -> NDArray | float:
    """Weighted unit deviance ``2 w [l(y; y) - l(y; mu)]``."""
    y = _check_y(family, y)
    mu = _check_mu(mu)
    w = _check_positive("w", w)
    kind = family.kind
    if kind is FamilyKind.POISSON:
        dev = 2.0 * w * (_xlogy(y, y / mu) - (y - mu))
    elif kind is FamilyKind.NEGATIVE_BINOMIAL:
        r = family.nb_size
        dev = 2.0 * w * (_xlogy(y, y / mu) - (y + r) * np.log((y + r) / (mu + r)))
    elif kind is FamilyKind.GAMMA:
        dev = 2.0 * w * (-np.log(y / mu) + (y - mu) / mu)
    else:
        dev = w * (y - mu) ** 2 / (mu**2 * y)
    dev = np.maximum(dev, 0.0)
    return dev if dev.ndim else float(dev)


def estimate_dispersion(
    family: Family,
    observations: ArrayLike,
    fitted_means: ArrayLike,
    weights: ArrayLike | None = None,
    model_dof: int = 0,
) -> float:
    """Pearson estimate ``sum w (y - mu)^2 / v(mu) / (n - model_dof)``.

    The Poisson dispersion is one by definition.  A zero Pearson statistic
    (a perfect fit) is returned as 0.0 with a
    :class:`DegenerateDispersionWarning`.
    """
    y = np.asarray(observations, dtype=float)
    mu = np.asarray(fitted_means, dtype=float)
    n = y.size
    if n <= model_dof:
        raise DegreesOfFreedomError(f"{n} observations leave no residual degrees of freedom for {model_dof} parameters")
    if family.kind is FamilyKind.POISSON:
        return 1.0
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    pearson = float(np.sum(w * (y - mu) ** 2 / variance(family, mu)))
    if pearson == 0.0:
        warnings.warn("zero Pearson residuals; dispersion is degenerate", DegenerateDispersionWarning, stacklevel=2)
        return 0.0
    return pearson / (n - model_dof)
