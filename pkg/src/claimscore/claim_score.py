"""Bonus-malus claim score: a +1 / -psi system on the levels [1, s].

A claim-free period raises the score by its exposure; every claim lowers
it by ``psi / exposure``.  The result is truncated to ``[1, s]``.  New
customers enter at ``entry_level`` unless earlier claims history is
available.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .families import DomainError


class OrderingError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ClaimScoreConfig:
    """The triple (psi, s, l0): jump per claim, top level and entry level."""

    psi: int
    max_level: int
    entry_level: int

    def __post_init__(self):
        s, psi, l0 = self.max_level, self.psi, self.entry_level
        if s < 3:
            raise ValueError(f"max_level must be at least 3, got {s}")
        if not 1 <= psi <= s - 1:
            raise ValueError(f"psi must lie in [1, {s - 1}], got {psi}")
        if not 2 <= l0 <= s - 1:
            raise ValueError(f"entry_level must lie in [2, {s - 1}], got {l0}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.psi, self.max_level, self.entry_level)

    def __str__(self) -> str:
        return f"({self.psi},{self.max_level},{self.entry_level})"


def step(level: float, exposure: float, claims: float, cfg: ClaimScoreConfig) -> float:
    """Score entering the next period given this period's exposure and claims."""
    if not exposure > 0:
        raise DomainError(f"exposure must be positive, got {exposure}")
    moved = level + (exposure if claims == 0 else 0.0) - cfg.psi * claims / exposure
    return min(max(moved, 1.0), float(cfg.max_level))


def trajectory(
    records: Sequence[tuple[int, float, float]],
    cfg: ClaimScoreConfig,
    initial: float | None = None,
) -> list[float]:
    """Scores entering each period for one customer and product.

    ``records`` holds ``(period, exposure, claims)`` in increasing period
    order.  Element ``t`` of the result prices period ``t``; the final
    element is the score after the last period, so the result is one
    longer than ``records``.
    """
    level = float(cfg.entry_level if initial is None else initial)
    out = [level]
    last = None
    for period, exposure, claims in records:
        if last is not None and period <= last:
            raise OrderingError(f"period {period} does not follow {last}")
        last = period
        level = step(level, exposure, claims, cfg)
        out.append(level)
    return out


def initialize_from_history(history: Iterable[tuple[int, float, float]], cfg: ClaimScoreConfig) -> float:
    """Score after running the system from the entry level over prior years."""
    return trajectory(list(history), cfg)[-1]


def step_array(level: NDArray, exposure: NDArray, claims: NDArray, cfg: ClaimScoreConfig) -> NDArray:
    """Vectorised :func:`step`; entries with zero exposure are left unchanged."""
    active = exposure > 0
    safe = np.where(active, exposure, 1.0)
    with np.errstate(over="ignore"):  # tiny exposures send the penalty to -inf, then to the floor
        moved = level + np.where(claims == 0, safe, 0.0) - cfg.psi * claims / safe
    moved = np.clip(moved, 1.0, float(cfg.max_level))
    return np.where(active, moved, level)


def score_panel(
    exposure: NDArray,
    claims: NDArray,
    cfg: ClaimScoreConfig,
    initial: NDArray | None = None,
) -> NDArray:
    """Scores entering each period for a panel of trajectories.

    ``exposure`` and ``claims`` are ``(n, T)`` arrays with zero exposure
    marking periods without coverage, during which the score is frozen.
    Returns an ``(n, T)`` array of scores entering each period.
    """
    n, T = exposure.shape
    level = np.full(n, float(cfg.entry_level)) if initial is None else np.asarray(initial, dtype=float).copy()
    out = np.empty((n, T))
    for t in range(T):
        out[:, t] = level
        level = step_array(level, exposure[:, t], claims[:, t], cfg)
    return out


def bucket_levels(scores: NDArray, cfg: ClaimScoreConfig) -> NDArray:
    """Integer level of each score, truncated towards the entry level."""
    scores = np.asarray(scores, dtype=float)
    l0 = cfg.entry_level
    # tolerance guards levels such as 2.9999999999 produced by fractional exposures
    up = np.floor(scores + 1e-9)
    down = np.ceil(scores - 1e-9)
    levels = np.where(scores >= l0, up, down)
    return np.clip(levels, 1, cfg.max_level).astype(int)
