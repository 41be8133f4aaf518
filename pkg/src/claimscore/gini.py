"""Ordered Lorenz curves and ratio Gini indices for comparing rate structures.

Policies are sorted by the relativity ``R = P_alt / P_bench``.  The curve
plots the cumulative share of benchmark premium against the cumulative
share of losses; an alternative that orders risks better than the
benchmark pushes the curve below the diagonal and yields a positive Gini.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .families import DomainError


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LorenzCurve:
    premium_share: NDArray
    loss_share: NDArray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.premium_share.tolist(), self.loss_share.tolist()))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LorenzCurve)
            and np.array_equal(self.premium_share, other.premium_share)
            and np.array_equal(self.loss_share, other.loss_share)
        )


@dataclass(frozen=True)
class GiniResult:
    gini: float
    std_error: float
    curve: LorenzCurve
    degenerate: bool = False

    @property
    def profit_potential(self) -> float:
        """Average profit gain of the alternative ordering, half the ratio Gini."""
        return self.gini / 2.0

    def interval(self, z: float = 1.959963984540054) -> tuple[float, float]:
        return (self.gini - z * self.std_error, self.gini + z * self.std_error)


def relativities(premium_alt: ArrayLike, premium_bench: ArrayLike) -> NDArray:
    alt = np.asarray(premium_alt, dtype=float)
    bench = np.asarray(premium_bench, dtype=float)
    if alt.shape != bench.shape:
        raise ValueError("premium vectors differ in length")
    if np.any(~(bench > 0)):
        raise DomainError("benchmark premia must be positive")
    return alt / bench


def _check(premium_bench, losses, rel):
    P = np.asarray(premium_bench, dtype=float)
    L = np.asarray(losses, dtype=float)
    R = np.asarray(rel, dtype=float)
    if not (P.shape == L.shape == R.shape) or P.ndim != 1:
        raise ValueError("premia, losses and relativities must be equal-length vectors")
    if np.any(L < 0) or np.any(P < 0):
        raise DomainError("losses and premia must be nonnegative")
    if not L.sum() > 0 or not P.sum() > 0:
        raise DegenerateInputError("total losses and total premium must be positive")
    return P, L, R


def _grouped(P, L, R):
    """Premium and loss totals per distinct relativity, in increasing order."""
    unique, inverse = np.unique(R, return_inverse=True)
    return np.bincount(inverse, weights=P), np.bincount(inverse, weights=L), inverse


def ordered_lorenz(premium_bench: ArrayLike, losses: ArrayLike, rel: ArrayLike) -> LorenzCurve:
    P, L, R = _check(premium_bench, losses, rel)
    gp, gl, _ = _grouped(P, L, R)
    x = np.concatenate([[0.0], np.cumsum(gp) / P.sum()])
    y = np.concatenate([[0.0], np.cumsum(gl) / L.sum()])
    x[-1] = y[-1] = 1.0
    return LorenzCurve(x, y)


def gini_index(curve: LorenzCurve) -> float:
    """One minus twice the trapezoidal area under the curve."""
    x, y = curve.premium_share, curve.loss_share
    return float(1.0 - np.sum(np.diff(x) * (y[1:] + y[:-1])))


def gini_std_error(premium_bench: ArrayLike, losses: ArrayLike, rel: ArrayLike) -> tuple[float, bool]:
    """Asymptotic standard error of the ratio Gini from moment estimators.

    Returns ``(std_error, degenerate)``; ``degenerate`` flags a zero
    estimated variance, e.g. when all policies are identical.
    """
    P, L, R = _check(premium_bench, losses, rel)
    H = P.size
    if H < 2:
        raise ValueError("need at least two policies")
    gp, gl, inverse = _grouped(P, L, R)
    F_P = (np.cumsum(gp) / P.sum())[inverse]
    F_L = (np.cumsum(gl) / L.sum())[inverse]
    mu_L, mu_P = L.mean(), P.mean()
    h = 0.5 * (mu_L * P * F_L + L * mu_P * (1.0 - F_P))
    mu_h = h.mean()
    cov = np.cov(np.vstack([h, L, P]), bias=True)
    s_h, s_L, s_P = cov[0, 0], cov[1, 1], cov[2, 2]
    s_hL, s_hP, s_LP = cov[0, 1], cov[0, 2], cov[1, 2]
    sigma = (4.0 / (mu_L**2 * mu_P**2)) * (
        4.0 * s_h
        + mu_h**2 / mu_L**2 * s_L
        + mu_h**2 / mu_P**2 * s_P
        - 4.0 * mu_h / mu_L * s_hL
        - 4.0 * mu_h / mu_P * s_hP
        + 2.0 * mu_h**2 / (mu_L * mu_P) * s_LP
    )
    scale = 1e-12 * (4.0 * mu_h / (mu_L * mu_P)) ** 2
    if sigma <= scale:
        return 0.0, True
    return float(np.sqrt(sigma / H)), False


def ratio_gini(premium_alt: ArrayLike, premium_bench: ArrayLike, losses: ArrayLike) -> GiniResult:
    rel = relativities(premium_alt, premium_bench)
    curve = ordered_lorenz(premium_bench, losses, rel)
    se, degenerate = gini_std_error(premium_bench, losses, rel)
    return GiniResult(gini_index(curve), se, curve, degenerate)


def gini_matrix(premia: dict[str, NDArray], losses: ArrayLike, jobs: int = 1) -> tuple[list[str], NDArray, NDArray]:
    """Ratio Gini of every alternative (columns) against every benchmark (rows).

    Returns ``(names, gini, std_error)``; the diagonal is zero.
    """
    names = list(premia)
    m = len(names)
    pairs = [(i, j) for i in range(m) for j in range(m) if i != j]

    def one(pair):
        i, j = pair
        res = ratio_gini(premia[names[j]], premia[names[i]], losses)
        return res.gini, res.std_error

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(pair) for pair in pairs]
    G, S = np.zeros((m, m)), np.zeros((m, m))
    for (i, j), (g, s) in zip(pairs, results):
        G[i, j], S[i, j] = g, s
    return names, G, S


def _row_maxima(gini_matrix: ArrayLike) -> NDArray:
    G = np.asarray(gini_matrix, dtype=float)
    if G.ndim != 2 or G.size == 0:
        raise ValueError("Gini matrix must be a non-empty 2-D array")
    masked = G.copy()
    d = min(G.shape)
    masked[np.arange(d), np.arange(d)] = -np.inf
    return masked.max(axis=1)


def minimax_select(gini_matrix: ArrayLike) -> int:
    """Benchmark (row) whose largest Gini against any alternative is smallest.

    Self-comparisons on the diagonal are ignored; ties go to the lowest index.
    """
    return int(np.argmin(_row_maxima(gini_matrix)))


def minimax_ranks(gini_matrix: ArrayLike) -> tuple[NDArray, NDArray]:
    """Row maxima and their ranks (1 = least vulnerable, ties by index)."""
    maxima = _row_maxima(gini_matrix)
    order = np.argsort(maxima, kind="stable")
    ranks = np.empty(maxima.size, dtype=int)
    ranks[order] = np.arange(1, maxima.size + 1)
    return maxima, ranks
