"""Penalized maximum likelihood by Fisher scoring (PIRLS).

Each iteration solves ``I(delta) step = J(delta)`` where ``J`` is the
gradient of the penalized log-likelihood and ``I`` the expected
information plus the penalty.  A step is halved until the penalized
log-likelihood does not decrease.  The dispersion is held at one while
iterating and estimated once afterwards.  For the Negative Binomial the
size parameter is profiled between scoring runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .families import (
    Family,
    FamilyKind,
    LogLink,
    clamp_mu,
    estimate_dispersion,
    log_density,
    variance,
)

MEAN_FLOOR = 1e-6
LOG_SIZE_BOUNDS = (-10.0, 10.0)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, delta: NDArray, gradient_norm: float):
        super().__init__(f"{message} (gradient max-norm {gradient_norm:.3e})")
        self.delta = delta
        self.gradient_norm = gradient_norm


class RankError(ValueError):
    def __init__(self, column: int, name: str | None = None):
        label = f"{column} ({name})" if name else str(column)
        super().__init__(f"design is rank deficient at column {label}")
        self.column = column
        self.name = name


@dataclass
class Design:
    """A penalized GLM problem with log link.

    ``penalties`` lists ``(columns, S)`` pairs, one per smooth term, where
    ``S`` is the term's penalty on the coefficients in ``columns``.
    """

    X: NDArray
    y: NDArray
    offset: NDArray
    weights: NDArray
    columns: list[str] = field(default_factory=list)
    penalties: list[tuple[slice, NDArray]] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        n, p = self.X.shape
        self.y = np.asarray(self.y, dtype=float).reshape(n)
        self.offset = np.broadcast_to(np.asarray(self.offset, dtype=float), (n,)).copy()
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (n,)).copy()
        if not self.columns:
            self.columns = [f"x{i}" for i in range(p)]
        if len(self.columns) != p:
            raise ValueError(f"{len(self.columns)} column names for {p} columns")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def take(self, rows) -> Design:
        return replace(self, X=self.X[rows], y=self.y[rows], offset=self.offset[rows], weights=self.weights[rows])


@dataclass
class FitSettings:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    step_halving_max: int = 30
    penalties: float | Sequence[float] = 0.0
    ridge_guard: float = 1e-10
    profile_nb: bool = True
    nb_tolerance: float = 1e-7
    nb_max_rounds: int = 50

    def __post_init__(self):
        if not (self.gradient_tolerance > 0 and self.max_iterations > 0 and self.nb_tolerance > 0):
            raise ValueError("tolerances and iteration limits must be positive")
        if self.ridge_guard < 0 or np.any(np.asarray(self.penalties) < 0):
            raise ValueError("penalties and ridge guard must be nonnegative")


@dataclass
class FittedModel:
    coefficients: NDArray
    std_errors: NDArray
    columns: list[str]
    family: Family
    dispersion: float
    loglik: float
    penalized_loglik: float
    information: NDArray
    covariance: NDArray
    iterations: int
    gradient_norm: float
    loglik_trace: list[float]
    n_obs: int
    spec: Any = None
    terms: Any = None

    @property
    def num_params(self) -> int:
        return self.coefficients.size

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.columns.index(name)])


def penalty_total(design: Design, penalties: float | Sequence[float]) -> NDArray:
    """``sum_j lambda_j S_j`` padded to the full coefficient vector."""
    p = design.p
    S = np.zeros((p, p))
    lams = np.broadcast_to(np.asarray(penalties, dtype=float), (len(design.penalties),))
    for lam, (cols, block) in zip(lams, design.penalties):
        if lam:
            S[cols, cols] += lam * block
    return S


def _mean(delta: NDArray, design: Design) -> NDArray:
    return clamp_mu(LogLink.inverse(design.offset + design.X @ delta))


def penalized_loglik(delta: NDArray, design: Design, family: Family, S: NDArray | None = None, phi: float = 1.0) -> float:
    mu = _mean(delta, design)
    ll = float(np.sum(log_density(family, design.y, mu, phi, design.weights)))
    if S is not None:
        ll -= 0.5 * float(delta @ S @ delta)
    return ll


def score_vector(delta: NDArray, design: Design, family: Family, S: NDArray | None = None) -> NDArray:
    """Gradient of the penalized log-likelihood with the dispersion at one."""
    delta = np.asarray(delta, dtype=float)
    mu = _mean(delta, design)
    working = design.weights * (design.y - mu) / (variance(family, mu) * LogLink.derivative(mu))
    grad = design.X.T @ working
    if S is not None:
        grad = grad - S @ delta
    return grad


def fisher_information(delta: NDArray, design: Design, family: Family, S: NDArray | None = None) -> NDArray:
    """Expected information ``X' W X + S`` with ``W = w / (v(mu) g'(mu)^2)``."""
    mu = _mean(np.asarray(delta, dtype=float), design)
    W = design.weights / (variance(family, mu) * LogLink.derivative(mu) ** 2)
    info = design.X.T @ (design.X * W[:, None])
    if S is not None:
        info = info + S
    return 0.5 * (info + info.T)


def starting_values(design: Design, family: Family) -> NDArray:
    """Intercept at the link of the mean response, all else zero.

    The first column is taken to be the intercept.  Offsets are honoured so
    that a count model starts at the overall claim rate.
    """
    w = design.weights
    scale = np.sum(w * np.exp(design.offset))
    mean = np.sum(w * design.y) / scale if scale > 0 else 0.0
    delta = np.zeros(design.p)
    delta[0] = math.log(max(mean, MEAN_FLOOR))
    return delta


def check_rank(info: NDArray, columns: Sequence[str] | None = None, tol: float = 1e-10) -> None:
    """Raise :class:`RankError` at the first column dependent on earlier ones."""
    d = np.sqrt(np.clip(np.diag(info), 0, None))
    p = info.shape[0]
    for j in range(p):
        if d[j] == 0:
            raise RankError(j, columns[j] if columns else None)
    A = info / np.outer(d, d)
    L = np.zeros_like(A)
    for j in range(p):
        pivot = A[j, j] - L[j, :j] @ L[j, :j]
        if pivot <= tol:
            raise RankError(j, columns[j] if columns else None)
        L[j, j] = math.sqrt(pivot)
        L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]


def _solve(info: NDArray, rhs: NDArray, ridge: float) -> NDArray:
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(info), rhs)
    except np.linalg.LinAlgError:
        guard = ridge * max(1.0, float(np.max(np.abs(np.diag(info)))))
        return scipy.linalg.solve(info + guard * np.eye(info.shape[0]), rhs, assume_a="sym")


def _inverse(info: NDArray, ridge: float) -> NDArray:
    inv = _solve(info, np.eye(info.shape[0]), ridge)
    return 0.5 * (inv + inv.T)


def _scoring(design: Design, family: Family, S: NDArray, settings: FitSettings, delta: NDArray, trace: list[float]):
    """Fisher scoring at fixed family parameters; returns (delta, iterations, gradient norm).

    ``trace`` receives the penalized log-likelihood after every step that
    passed the line search.
    """
    obj = penalized_loglik(delta, design, family, S)
    trace.append(obj)
    for iteration in range(settings.max_iterations + 1):
        grad = score_vector(delta, design, family, S)
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if gnorm < settings.gradient_tolerance:
            return delta, iteration, gnorm
        if iteration == settings.max_iterations:
            break
        info = fisher_information(delta, design, family, S)
        step = _solve(info, grad, settings.ridge_guard)
        if float(grad @ step) <= 1e-13 * max(1.0, abs(obj)):
            # the predicted gain is below the objective's rounding error, so
            # the line search cannot judge the step; the gradient decides
            candidate = delta + step
            cand_grad = score_vector(candidate, design, family, S)
            if float(np.max(np.abs(cand_grad))) >= gnorm:
                return delta, iteration, gnorm
            delta, obj = candidate, penalized_loglik(candidate, design, family, S)
            continue
        t = 1.0
        for _ in range(settings.step_halving_max + 1):
            candidate = delta + t * step
            cand_obj = penalized_loglik(candidate, design, family, S)
            if cand_obj >= obj:
                break
            t *= 0.5
        else:
            # no ascent along the scoring direction: stationary up to rounding
            decrement = float(grad @ step)
            if decrement <= 1e-12 * max(1.0, abs(obj)):
                return delta, iteration, gnorm
            raise ConvergenceError("step halving failed to increase the penalized log-likelihood", delta, gnorm)
        delta, obj = candidate, cand_obj
        trace.append(obj)
    raise ConvergenceError(f"no convergence after {settings.max_iterations} iterations", delta, gnorm)


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - ratio * (b - a), a + ratio * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = f(d)
    best = [(f(lo), lo), (fc, c), (fd, d), (f(hi), hi)]
    return max(best)[1]


def profile_nb_size(mu: NDArray, design: Design, family: Family, tol: float = 1e-7) -> float:
    """NB size maximising the log-likelihood at fixed means (golden section on log size)."""
    def ll(log_size: float) -> float:
        return float(np.sum(log_density(family.with_size(math.exp(log_size)), design.y, mu, 1.0, design.weights)))

    return math.exp(_golden_max(ll, *LOG_SIZE_BOUNDS, tol))


def fit_pirls(
    design: Design,
    family: Family,
    settings: FitSettings | None = None,
    start: NDArray | None = None,
) -> FittedModel:
    settings = settings or FitSettings()
    S = penalty_total(design, settings.penalties)
    delta = starting_values(design, family) if start is None else np.array(start, dtype=float)
    check_rank(fisher_information(delta, design, family, S), design.columns)

    trace: list[float] = []
    delta, iterations, gnorm = _scoring(design, family, S, settings, delta, trace)
    if family.kind is FamilyKind.NEGATIVE_BINOMIAL and settings.profile_nb:
        for _ in range(settings.nb_max_rounds):
            size = profile_nb_size(_mean(delta, design), design, family, settings.nb_tolerance)
            if penalized_loglik(delta, design, family.with_size(size)) < penalized_loglik(delta, design, family):
                size = family.nb_size
            moved = abs(math.log(size) - math.log(family.nb_size))
            family = family.with_size(size)
            delta, extra, gnorm = _scoring(design, family, S, settings, delta, trace)
            iterations += extra
            if moved < 10 * settings.nb_tolerance:
                break

    mu = _mean(delta, design)
    info = fisher_information(delta, design, family, S)
    phi = estimate_dispersion(family, design.y, mu, design.weights, design.p) if design.n > design.p else 1.0
    scale = phi if family.has_free_dispersion and phi > 0 else 1.0
    info = info / scale
    cov = _inverse(info, settings.ridge_guard)
    ll_phi = phi if family.has_free_dispersion and phi > 0 else 1.0
    loglik = penalized_loglik(delta, design, family, None, ll_phi)
    pen = loglik - 0.5 * float(delta @ S @ delta)
    return FittedModel(
        coefficients=delta,
        std_errors=np.sqrt(np.clip(np.diag(cov), 0, None)),
        columns=list(design.columns),
        family=family,
        dispersion=phi,
        loglik=loglik,
        penalized_loglik=pen,
        information=info,
        covariance=cov,
        iterations=iterations,
        gradient_norm=gnorm,
        loglik_trace=trace,
        n_obs=design.n,
    )


def predict_mean(fit: FittedModel, X: NDArray, offset: NDArray | float = 0.0) -> NDArray | float:
    """``exp(offset + X delta)`` for one row or a matrix of rows."""
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != fit.coefficients.size:
        raise ValueError(f"row has {X.shape[-1]} entries, model has {fit.coefficients.size} coefficients")
    out = clamp_mu(np.exp(np.asarray(offset, dtype=float) + X @ fit.coefficients))
    return out if np.ndim(out) else float(out)
