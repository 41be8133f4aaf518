"""Grid search over claim-score parameters (psi, s, l0) for one product.

Every feasible configuration is scored by the out-of-sample ratio Gini of
a dynamic frequency model against a fixed static benchmark.  A
configuration is feasible when each integer score level holds at least a
minimum share of the training exposure.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .claim_score import ClaimScoreConfig, bucket_levels
from .fitter import ConvergenceError, Design, FitSettings, RankError, fit_pirls, predict_mean
from .gini import ratio_gini
from .model import FittedPair, ModelSpec, ScorePanel, ScoreTerm, Structure, build_design
from .portfolio import Portfolio

log = logging.getLogger(__name__)

LOG_COLUMNS = ["config_psi", "config_s", "config_l0", "feasible", "gini", "gini_se", "fit_iterations", "loglik"]


class InfeasibleSearchError(RuntimeError):
    def __init__(self, message: str, tightest: list[tuple[ClaimScoreConfig, int, float]]):
        super().__init__(message)
        self.tightest = tightest


@dataclass(frozen=True)
class GridSpec:
    s_values: tuple[int, ...] = tuple(range(3, 26))
    psi_values: tuple[int, ...] | None = None
    entry_values: tuple[int, ...] | None = None
    min_exposure_share: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.min_exposure_share < 1.0:
            raise ValueError("min_exposure_share must lie in [0, 1)")
        if any(s < 3 for s in self.s_values):
            raise ValueError("max levels start at 3")


def enumerate_grid(spec: GridSpec) -> list[ClaimScoreConfig]:
    """All (psi, s, l0) with psi in 1..s-1 and l0 in 2..s-1, ordered by (s, psi, l0).

    ``psi_values`` and ``entry_values`` optionally restrict the inner ranges.
    """
    out = []
    for s in sorted(set(spec.s_values)):
        for psi in range(1, s):
            if spec.psi_values is not None and psi not in spec.psi_values:
                continue
            for l0 in range(2, s):
                if spec.entry_values is not None and l0 not in spec.entry_values:
                    continue
                out.append(ClaimScoreConfig(psi, s, l0))
    return out


def level_exposure(scores: np.ndarray, exposure: np.ndarray, cfg: ClaimScoreConfig) -> np.ndarray:
    """Training exposure per integer level 1..s."""
    levels = bucket_levels(scores, cfg)
    return np.bincount(levels - 1, weights=exposure, minlength=cfg.max_level)


def feasible(
    config: ClaimScoreConfig,
    scores: np.ndarray,
    exposure: np.ndarray,
    min_exposure_share: float = 1e-4,
) -> bool:
    """Every level carries at least ``min_exposure_share`` of the exposure."""
    return _tightest(config, scores, exposure, min_exposure_share)[0]


def _tightest(config, scores, exposure, share):
    exposure = np.asarray(exposure, dtype=float)
    if exposure.size == 0:
        raise ValueError("empty training portfolio")
    per_level = level_exposure(scores, exposure, config)
    shares = per_level / exposure.sum()
    worst = int(np.argmin(shares))
    return bool(np.all(shares >= share)), worst + 1, float(shares[worst])


def feasible_for_portfolio(config: ClaimScoreConfig, train: Portfolio, product: str, min_exposure_share: float = 1e-4, history=None) -> bool:
    if len(train.for_product(product)) == 0:
        raise ValueError("empty training portfolio")
    panel = ScorePanel(train, product, history)
    mask = (train.records["product"] == product).to_numpy()
    scores = panel.for_records(config)[mask]
    return feasible(config, scores, train.records["exposure"].to_numpy()[mask], min_exposure_share)


@dataclass
class Evaluation:
    config: ClaimScoreConfig
    feasible: bool
    gini: float = math.nan
    gini_se: float = math.nan
    fit_iterations: int = 0
    loglik: float = math.nan
    error: str = ""


@dataclass
class SearchResult:
    product: str
    best_config: ClaimScoreConfig
    best_gini: float
    best_se: float
    evaluations: list[Evaluation] = field(default_factory=list)

    def log_frame(self) -> pd.DataFrame:
        rows = []
        for ev in self.evaluations:
            rows.append({
                "config_psi": ev.config.psi,
                "config_s": ev.config.max_level,
                "config_l0": ev.config.entry_level,
                "feasible": ev.feasible,
                "gini": ev.gini,
                "gini_se": ev.gini_se,
                "fit_iterations": ev.fit_iterations,
                "loglik": ev.loglik,
                "best": ev.config == self.best_config,
            })
        return pd.DataFrame(rows, columns=LOG_COLUMNS + ["best"])

    def write_csv(self, path) -> None:
        self.log_frame().to_csv(path, index=False, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)


class _Problem:
    """Everything a worker needs to score one configuration."""

    def __init__(self, portfolio, product, template, benchmark, test_years, history, min_share, settings):
        self.product = product
        self.template = template
        self.min_share = min_share
        self.settings = settings
        self.panel = ScorePanel(portfolio, product, history)
        mask = (portfolio.records["product"] == product).to_numpy()
        self.mask = mask
        records = portfolio.records[mask]
        is_test = records["calendar_year"].isin(test_years).to_numpy()
        self.train_rows, self.test_rows = ~is_test, is_test

        # covariate columns are shared by every configuration
        static = ModelSpec(product, template.frequency_family, template.severity_family, products=portfolio.products)
        ds = build_design(portfolio.subset(mask), static, encoder=benchmark.encoder)
        self.X = ds.frequency.X
        self.offset = ds.frequency.offset
        self.y = ds.frequency.y
        self.columns = ds.frequency.columns
        self.exposure = ds.exposure
        self.losses = records["claim_total"].to_numpy(dtype=float)
        test_X = self.X[self.test_rows]
        self.bench_counts = predict_mean(benchmark.frequency, test_X, self.offset[self.test_rows])
        self.severity = predict_mean(benchmark.severity, ds.severity_all[self.test_rows])

    def evaluate(self, cfg: ClaimScoreConfig) -> Evaluation:
        scores = self.panel.for_records(cfg)[self.mask]
        ok, _, _ = _tightest(cfg, scores[self.train_rows], self.exposure[self.train_rows], self.min_share)
        if not ok:
            return Evaluation(cfg, False)
        term = ScoreTerm.build(self.product, self.template.score_effect, cfg, self.template.spline_k)
        Z = term.columns(scores)
        X = np.hstack([self.X, Z])
        p0 = self.X.shape[1]
        penalties = [(slice(p0, p0 + term.width), term.penalty())] if term.penalty() is not None else []
        tr = self.train_rows
        design = Design(X[tr], self.y[tr], self.offset[tr], np.ones(int(tr.sum())), self.columns + term.names(), penalties)
        try:
            fit = fit_pirls(design, self.template.frequency_family, self.settings)
        except (RankError, ConvergenceError) as exc:
            return Evaluation(cfg, True, error=str(exc))
        counts = predict_mean(fit, X[self.test_rows], self.offset[self.test_rows])
        alt = counts * self.severity
        bench = self.bench_counts * self.severity
        res = ratio_gini(alt, bench, self.losses[self.test_rows])
        return Evaluation(cfg, True, res.gini, res.std_error, fit.iterations, fit.loglik)


_WORKER: _Problem | None = None


def _init_worker(problem: _Problem) -> None:
    global _WORKER
    _WORKER = problem


def _evaluate_chunk(configs: list[ClaimScoreConfig]) -> list[Evaluation]:
    return [_WORKER.evaluate(cfg) for cfg in configs]


def optimize_claim_score(
    train: Portfolio,
    test: Portfolio,
    product: str,
    template: ModelSpec,
    benchmark: FittedPair,
    grid: GridSpec | list[ClaimScoreConfig],
    history=None,
    settings: FitSettings | None = None,
    jobs: int = 1,
) -> SearchResult:
    """Pick the configuration with the best out-of-sample ratio Gini.

    Scores are computed on the union of both sets so that test-year
    scores carry the training history; ``test`` must cover calendar years
    after those of ``train``.  ``benchmark`` is the static model fitted on
    ``train``.  The
    template fixes the families, score effect and spline size; only the
    own-product score enters the frequency predictor.  Ties prefer smaller
    s, then psi, then l0.
    """
    configs = enumerate_grid(grid) if isinstance(grid, GridSpec) else list(grid)
    min_share = grid.min_exposure_share if isinstance(grid, GridSpec) else 1e-4
    if len(train.for_product(product)) == 0:
        raise ValueError("empty training portfolio")
    test_years = test.years()
    if test_years and train.years() and min(test_years) <= max(train.years()):
        raise ValueError("test years must follow the training years")
    portfolio = Portfolio(pd.concat([train.records, test.records], ignore_index=True), train.schema)
    if template.structure is Structure.STATIC:
        raise ValueError("the search template needs a score effect")
    problem = _Problem(portfolio, product, template, benchmark, test_years, history, min_share, settings or FitSettings())

    if jobs > 1 and len(configs) > 1:
        size = max(1, math.ceil(len(configs) / (4 * jobs)))
        chunks = [configs[i:i + size] for i in range(0, len(configs), size)]
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(problem,)) as pool:
            evaluations = [ev for chunk in pool.map(_evaluate_chunk, chunks) for ev in chunk]
    else:
        evaluations = [problem.evaluate(cfg) for cfg in configs]

    scored = [ev for ev in evaluations if ev.feasible and not math.isnan(ev.gini)]
    if not scored:
        tightest = []
        for ev in evaluations:
            scores = problem.panel.for_records(ev.config)[problem.mask][problem.train_rows]
            _, level, share = _tightest(ev.config, scores, problem.exposure[problem.train_rows], min_share)
            tightest.append((ev.config, level, share))
        tightest.sort(key=lambda item: item[2])
        raise InfeasibleSearchError(f"no feasible claim score configuration for {product}", tightest)
    best = min(scored, key=lambda ev: (-ev.gini, ev.config.max_level, ev.config.psi, ev.config.entry_level))
    log.info("%s: best %s with ratio Gini %.4f", product, best.config, best.gini)
    return SearchResult(product, best.config, best.gini, best.gini_se, evaluations)
