"""B-spline bases for claim-score effects.

Bases are evaluated with the Cox-de Boor recursion, the roughness penalty
is the Gram matrix of second derivatives, and :func:`constrain` removes one
degree of freedom so that every representable function vanishes at the
entry level of the claim score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .families import DomainError

DOMAIN_TOL = 1e-9


class DegenerateAnchorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """``k`` B-splines of a given degree on a nondecreasing knot vector.

    The evaluation domain defaults to ``[knots[degree], knots[k]]``, the
    interval on which the basis is a partition of unity.
    """

    degree: int
    knots: NDArray
    domain: tuple[float, float] = field(default=None)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or np.any(np.diff(knots) < 0):
            raise ValueError("knots must be a nondecreasing vector")
        if self.degree < 0 or knots.size < self.degree + 2:
            raise ValueError(f"need at least {self.degree + 2} knots for degree {self.degree}")
        object.__setattr__(self, "knots", knots)
        k = knots.size - self.degree - 1
        if self.domain is None:
            object.__setattr__(self, "domain", (float(knots[self.degree]), float(knots[k])))
        lo, hi = self.domain
        if not lo < hi:
            raise ValueError("empty spline domain")
        if lo < knots[0] or hi > knots[-1]:
            raise ValueError("spline domain extends beyond the knots")

    @classmethod
    def clamped(cls, degree: int, k: int, lo: float, hi: float) -> SplineBasis:
        """Equally spaced breakpoints on [lo, hi] with end knots repeated."""
        if k < degree + 1:
            raise ValueError(f"k={k} is too small for degree {degree}")
        inner = np.linspace(lo, hi, k - degree + 1)
        knots = np.concatenate([np.full(degree, lo), inner, np.full(degree, hi)])
        return cls(degree, knots, (float(lo), float(hi)))

    @property
    def num_params(self) -> int:
        return self.knots.size - self.degree - 1

    def __call__(self, x: ArrayLike, deriv: int = 0) -> NDArray:
        return evaluate_basis(self, x, deriv)


def _spans(basis: SplineBasis, x: NDArray) -> NDArray:
    t = basis.knots
    lo, hi = basis.domain
    span = np.searchsorted(t, x, side="right") - 1
    # the right end of the domain belongs to the last non-empty span
    right = np.searchsorted(t, hi, side="left") - 1
    return np.where(x >= hi, right, span)


def evaluate_basis(basis: SplineBasis, x: ArrayLike, deriv: int = 0) -> NDArray:
    """Values (or derivatives) of all basis functions at ``x``.

    Returns shape ``(k,)`` for scalar ``x`` and ``(n, k)`` otherwise.
    Points within a tiny tolerance of the domain are clamped onto it.
    """
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = basis.domain
    tol = DOMAIN_TOL * max(1.0, hi - lo)
    if np.any(x < lo - tol) or np.any(x > hi + tol) or np.any(np.isnan(x)):
        raise DomainError(f"x outside spline domain [{lo}, {hi}]")
    x = np.clip(x, lo, hi)
    t = basis.knots
    p = basis.degree
    nk = t.size

    # degree-zero indicators on every knot span
    B = np.zeros((x.size, nk - 1))
    B[np.arange(x.size), _spans(basis, x)] = 1.0

    order = p - deriv
    for d in range(1, max(order, 0) + 1):
        B = _raise_degree(B, t, x, d)
    if order < 0:
        return np.zeros((basis.num_params,) if scalar else (x.size, basis.num_params))
    for d in range(order + 1, p + 1):
        B = _differentiate(B, t, d)
    return B[0] if scalar else B


def _ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den == 0, 0.0, num / np.where(den == 0, 1.0, den))


def _raise_degree(B: NDArray, t: NDArray, x: NDArray, d: int) -> NDArray:
    n = B.shape[1] - 1
    i = np.arange(n)
    left = _ratio(x[:, None] - t[i], t[i + d] - t[i])
    right = _ratio(t[i + d + 1] - x[:, None], t[i + d + 1] - t[i + 1])
    return left * B[:, :-1] + right * B[:, 1:]


def _differentiate(B: NDArray, t: NDArray, d: int) -> NDArray:
    # derivative of degree-d splines from degree-(d-1) values (or derivatives)
    n = B.shape[1] - 1
    i = np.arange(n)
    a = _ratio(d, t[i + d] - t[i])
    b = _ratio(d, t[i + d + 1] - t[i + 1])
    return a * B[:, :-1] - b * B[:, 1:]


def penalty_matrix(basis: SplineBasis) -> NDArray:
    """Gram matrix of second derivatives over the domain.

    Integrated exactly with Gauss-Legendre quadrature on each knot span.
    Zero for bases of degree below two.
    """
    k = basis.num_params
    if basis.degree < 2:
        return np.zeros((k, k))
    lo, hi = basis.domain
    breaks = np.unique(np.concatenate([[lo, hi], basis.knots[(basis.knots > lo) & (basis.knots < hi)]]))
    nodes, weights = np.polynomial.legendre.leggauss(basis.degree)
    S = np.zeros((k, k))
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        xs = a + half * (nodes + 1.0)
        D = evaluate_basis(basis, xs, deriv=2)
        S += (D * (half * weights)[:, None]).T @ D
    return 0.5 * (S + S.T)


@dataclass(frozen=True, eq=False)
class ConstrainedBasis:
    """A basis reparameterised so every function is zero at ``anchor``.

    ``transform`` is a ``k x (k-1)`` matrix with orthonormal columns
    spanning the null space of the basis row at the anchor.
    """

    base: SplineBasis
    anchor: float
    transform: NDArray

    @property
    def num_params(self) -> int:
        return self.transform.shape[1]

    def __call__(self, x: ArrayLike, deriv: int = 0) -> NDArray:
        return evaluate_basis(self.base, x, deriv) @ self.transform

    def penalty(self) -> NDArray:
        S = self.transform.T @ penalty_matrix(self.base) @ self.transform
        return 0.5 * (S + S.T)


def constrain(basis: SplineBasis, anchor: float) -> ConstrainedBasis:
    row = evaluate_basis(basis, float(anchor))
    norm = np.linalg.norm(row)
    if norm == 0.0:
        raise DegenerateAnchorError(f"no basis function is active at {anchor}")
    Q, _ = np.linalg.qr(row[:, None], mode="complete")
    Z = Q[:, 1:]
    return ConstrainedBasis(basis, float(anchor), Z)
