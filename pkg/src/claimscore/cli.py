"""Batch command line: simulate, fit, optimize, evaluate, report.

Every subcommand reads an optional JSON run configuration (``--config``)
whose keys may be overridden by flags.  Human-readable tables carry four
decimals; each one has a full-precision CSV next to it.

Exit codes: 0 success, 1 invalid input, 2 fit failure, 3 infeasible search.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .claim_score import ClaimScoreConfig
from .fitter import ConvergenceError, FitSettings, RankError
from .gini import gini_matrix, minimax_ranks, minimax_select, ordered_lorenz, relativities
from .model import (
    ConfigError,
    FittedPair,
    ModelSpec,
    ScoreEffect,
    Structure,
    build_design,
    compute_scores,
    fit_design,
    fit_pirls,
    is_nested,
    lr_test,
)
from .optimizer import GridSpec, InfeasibleSearchError, optimize_claim_score
from .portfolio import (
    Portfolio,
    Schema,
    SimulationConfig,
    SplitError,
    ValidationError,
    load_csv,
    load_history,
    save_csv,
    save_history,
    simulate,
    train_test_split,
)

log = logging.getLogger("claimscore")

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_INFEASIBLE = 0, 1, 2, 3
DEFAULT_MODELS = ("GLM-PG", "GLM-PG-One", "GAM-PG-One", "GLM-PG-Multi", "GAM-PG-Multi")
DEFAULT_SCORE = ClaimScoreConfig(2, 5, 2)
OPTIMA_FILE = "optimal_configs.json"


@dataclass
class RunConfig:
    out: Path = Path("out")
    data: Path | None = None
    schema: Path | None = None
    history: Path | None = None
    seed: int | None = None
    jobs: int = 1
    models: tuple[str, ...] = DEFAULT_MODELS
    benchmark: str = "GLM-PG"
    products: tuple[str, ...] | None = None
    score_configs: dict[str, ClaimScoreConfig] = field(default_factory=dict)
    grid: GridSpec = field(default_factory=GridSpec)
    spline_k: int = 4
    simulation: dict = field(default_factory=dict)

    @property
    def data_path(self) -> Path:
        return self.data or self.out / "portfolio.csv"

    @property
    def schema_path(self) -> Path:
        return self.schema or self.out / "schema.json"

    @property
    def history_path(self) -> Path | None:
        if self.history is not None:
            return self.history
        default = self.out / "history.csv"
        return default if default.exists() else None


def _config_from_json(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key in ("out", "data", "schema", "history"):
        if data.get(key) is not None:
            setattr(cfg, key, Path(data[key]))
    if "seed" in data:
        cfg.seed = int(data["seed"])
    if "jobs" in data:
        cfg.jobs = int(data["jobs"])
    if "models" in data:
        cfg.models = tuple(data["models"])
    if "benchmark" in data:
        cfg.benchmark = data["benchmark"]
    if data.get("products"):
        cfg.products = tuple(data["products"])
    if "score_configs" in data:
        cfg.score_configs = {p: ClaimScoreConfig(*v) for p, v in data["score_configs"].items()}
    if "grid" in data:
        g = dict(data["grid"])
        for key in ("s_values", "psi_values", "entry_values"):
            if g.get(key) is not None:
                g[key] = tuple(g[key])
        cfg.grid = GridSpec(**g)
    if "spline_k" in data:
        cfg.spline_k = int(data["spline_k"])
    cfg.simulation = dict(data.get("simulation", {}))
    return cfg


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    cfg = _config_from_json(data)
    for key in ("out", "data", "schema", "history"):
        value = getattr(args, key)
        if value is not None:
            setattr(cfg, key, Path(value))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.models:
        cfg.models = tuple(m.strip() for m in args.models.split(",") if m.strip())
    if args.benchmark:
        cfg.benchmark = args.benchmark
    if cfg.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    return cfg


# ---------------------------------------------------------------------------
# shared plumbing


def _load(cfg: RunConfig) -> tuple[Portfolio, pd.DataFrame | None]:
    schema = Schema.load(cfg.schema_path)
    portfolio = load_csv(cfg.data_path, schema)
    history = load_history(cfg.history_path) if cfg.history_path else None
    return portfolio, history


def _products(cfg: RunConfig, portfolio: Portfolio) -> list[str]:
    wanted = list(cfg.products or portfolio.products)
    for p in wanted:
        if p not in portfolio.products:
            raise ConfigError(f"unknown product {p!r}")
    return wanted


def _score_configs(cfg: RunConfig, portfolio: Portfolio) -> dict[str, ClaimScoreConfig]:
    """Explicit configs first, then optimizer output, then the default."""
    found = {}
    optima = cfg.out / OPTIMA_FILE
    if optima.exists():
        with open(optima) as fh:
            found = {p: ClaimScoreConfig(*v) for p, v in json.load(fh).items()}
    found.update(cfg.score_configs)
    return {p: found.get(p, DEFAULT_SCORE) for p in portfolio.products}


def _specs(cfg: RunConfig, product: str, products, configs) -> list[ModelSpec]:
    specs, seen = [], set()
    for abbr in cfg.models:
        spec = ModelSpec.from_abbreviation(abbr, product, products, configs, cfg.spline_k)
        if spec.name in seen:
            raise ConfigError(f"model {abbr} listed twice")
        seen.add(spec.name)
        specs.append(spec)
    return specs


def _split(portfolio: Portfolio, scores: pd.DataFrame):
    years = portfolio.years()
    if len(years) < 2:
        raise SplitError("need at least two calendar years to split")
    test_mask = (portfolio.records["calendar_year"] == years[-1]).to_numpy()
    train, test = train_test_split(portfolio)
    return train, test, scores[~test_mask].reset_index(drop=True), scores[test_mask].reset_index(drop=True)


def _fit_all(specs, train, train_scores, settings) -> tuple[dict[str, FittedPair], dict[str, str]]:
    """Fit every spec on training data; one severity fit per severity family."""
    fits, failures, severity = {}, {}, {}
    for spec in specs:
        try:
            ds = build_design(train, spec, train_scores)
            key = spec.severity_family.kind
            if key not in severity:
                severity[key] = fit_pirls(ds.severity, spec.severity_family, settings)
                severity[key].terms = []
            fits[spec.name] = fit_design(ds, settings, severity[key])
        except (ConvergenceError, RankError) as exc:
            failures[spec.name] = f"{type(exc).__name__}: {exc}"
            log.warning("%s: %s", spec.name, failures[spec.name])
    return fits, failures


def _stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def coefficient_table(pair: FittedPair) -> pd.DataFrame:
    rows = []
    for component, fit in (("frequency", pair.frequency), ("severity", pair.severity)):
        z = fit.coefficients / fit.std_errors
        p = 2.0 * stats.norm.sf(np.abs(z))
        for name, est, se, pv in zip(fit.columns, fit.coefficients, fit.std_errors, p):
            rows.append((component, name, est, se, pv, _stars(pv)))
        rows.append((component, "dispersion", fit.dispersion, np.nan, np.nan, ""))
        if fit.family.nb_size is not None:
            rows.append((component, "nb_size", fit.family.nb_size, np.nan, np.nan, ""))
    return pd.DataFrame(rows, columns=["component", "term", "estimate", "std_error", "p_value", "significance"])


def _write_pair(frame: pd.DataFrame, path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path.with_suffix(".csv"), index=False, lineterminator="\n")
    path.with_suffix(".txt").write_text(text)


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(x)
    return f"{x:.4f}"


def _text_table(frame: pd.DataFrame, title: str) -> str:
    cells = [[str(c) for c in frame.columns]] + [[_fmt(v) for v in row] for row in frame.itertuples(index=False)]
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    lines = [title, ""]
    for k, row in enumerate(cells):
        lines.append("  ".join(v.rjust(w) for v, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig) -> int:
    sim = SimulationConfig.from_json(cfg.simulation)
    if cfg.seed is not None:
        sim = SimulationConfig.from_json({**cfg.simulation, "seed": cfg.seed})
    portfolio, history = simulate(sim)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_csv(portfolio, cfg.data_path)
    portfolio.schema.save(cfg.schema_path)
    save_history(history, cfg.history or cfg.out / "history.csv")
    log.info("wrote %d records for %d customers", len(portfolio), sim.num_customers)
    return EXIT_OK


def cmd_fit(cfg: RunConfig) -> int:
    portfolio, history = _load(cfg)
    configs = _score_configs(cfg, portfolio)
    scores = compute_scores(portfolio, configs, history)
    train, _, train_scores, _ = _split(portfolio, scores)
    settings = FitSettings()
    failed = []
    for product in _products(cfg, portfolio):
        specs = _specs(cfg, product, portfolio.products, configs)
        fits, failures = _fit_all(specs, train, train_scores, settings)
        for spec in specs:
            target = cfg.out / "fit" / _safe(product) / _safe(spec.name)
            if spec.name in failures:
                failed.append((product, spec.name, failures[spec.name]))
                continue
            table = coefficient_table(fits[spec.name])
            shown = table.drop(columns="p_value")
            title = f"{spec.name} for {product}: parameter estimates and standard errors"
            _write_pair(table, target, _text_table(shown, title) + "\nSignificance: * 5%, ** 1%, *** 0.1%\n")
    if failed:
        report = pd.DataFrame(failed, columns=["product", "model", "error"])
        (cfg.out / "fit").mkdir(parents=True, exist_ok=True)
        report.to_csv(cfg.out / "fit" / "failures.csv", index=False, lineterminator="\n")
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_optimize(cfg: RunConfig) -> int:
    portfolio, history = _load(cfg)
    train, test = train_test_split(portfolio)
    settings = FitSettings()
    bench_abbr = ModelSpec.from_abbreviation(cfg.benchmark, portfolio.products[0])
    if bench_abbr.structure is not Structure.STATIC:
        raise ConfigError("the benchmark must be a static model")
    rows, optima = [], {}
    for product in _products(cfg, portfolio):
        bench_spec = ModelSpec.from_abbreviation(cfg.benchmark, product, portfolio.products)
        benchmark = fit_design(build_design(train, bench_spec), settings)
        template = ModelSpec(
            product,
            bench_spec.frequency_family,
            bench_spec.severity_family,
            Structure.ONE_PRODUCT,
            ScoreEffect.CUBIC_SPLINE,
            ((product, DEFAULT_SCORE),),
            portfolio.products,
            cfg.spline_k,
        )
        result = optimize_claim_score(train, test, product, template, benchmark, cfg.grid, history, settings, cfg.jobs)
        target = cfg.out / "optimize" / f"search_{_safe(product)}.csv"
        target.parent.mkdir(parents=True, exist_ok=True)
        result.write_csv(target)
        best = result.best_config
        optima[product] = list(best.as_tuple())
        rows.append((product, best.psi, best.max_level, best.entry_level, result.best_gini, result.best_se))
    table = pd.DataFrame(rows, columns=["product", "psi", "s", "l0", "gini", "gini_se"])
    _write_pair(table, cfg.out / "optimize" / "optimal_configs", _text_table(table, "Optimal claim score parameters"))
    (cfg.out / OPTIMA_FILE).write_text(json.dumps(optima, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def lr_pairs(specs: list[ModelSpec]) -> list[tuple[ModelSpec, ModelSpec]]:
    """One-product models against their static counterpart and multi- against one-product models."""
    by_name = {s.name: s for s in specs}
    pairs = []
    for alt in specs:
        if alt.structure is Structure.ONE_PRODUCT:
            null = by_name.get(alt.static_counterpart().name)
        elif alt.structure is Structure.MULTI_PRODUCT:
            null = by_name.get(alt.name.replace("-Multi", "-One"))
        else:
            continue
        if null is not None and is_nested(null, alt):
            pairs.append((null, alt))
    return pairs


def _lr_row(product, null, alt, fits) -> tuple:
    res = lr_test(fits[null.name].frequency, fits[alt.name].frequency)
    return (product, null.name, alt.name, res["statistic"], res["dof"], res["p_value"], _stars(res["p_value"]))


def cmd_evaluate(cfg: RunConfig) -> int:
    portfolio, history = _load(cfg)
    configs = _score_configs(cfg, portfolio)
    scores = compute_scores(portfolio, configs, history)
    train, test, train_scores, test_scores = _split(portfolio, scores)
    settings = FitSettings()
    lr_rows, status = [], EXIT_OK
    out = cfg.out / "evaluate"
    for product in _products(cfg, portfolio):
        specs = _specs(cfg, product, portfolio.products, configs)
        fits, failures = _fit_all(specs, train, train_scores, settings)
        if failures:
            status = EXIT_CONVERGENCE
        names = [s.name for s in specs if s.name in fits]
        if not names:
            continue
        predictions = {n: fits[n].predict(test, test_scores) for n in names}
        losses = predictions[names[0]]["loss"].to_numpy()
        premia = {n: predictions[n]["expected_loss"].to_numpy() for n in names}

        names, G, S = gini_matrix(premia, losses, cfg.jobs)
        full = pd.DataFrame(
            [(names[i], names[j], G[i, j], S[i, j]) for i in range(len(names)) for j in range(len(names))],
            columns=["benchmark", "alternative", "gini", "std_error"],
        )
        pct = pd.DataFrame(100.0 * G, columns=names)
        pct.insert(0, "benchmark", names)
        _write_pair(full, out / f"gini_{_safe(product)}", _text_table(pct, f"Ratio Gini coefficients (%) for {product}; rows are benchmarks"))

        maxima, ranks = minimax_ranks(G)
        masked = G.copy()
        np.fill_diagonal(masked, -np.inf)
        arg = masked.argmax(axis=1) if len(names) > 1 else np.zeros(len(names), dtype=int)
        chosen = minimax_select(G)
        rank_table = pd.DataFrame({
            "model": names,
            "max_gini_pct": 100.0 * np.where(np.isfinite(maxima), maxima, 0.0),
            "std_error_pct": 100.0 * S[np.arange(len(names)), arg],
            "rank": ranks,
            "minimax": ["*" if i == chosen else "" for i in range(len(names))],
        })
        _write_pair(rank_table, out / f"minimax_{_safe(product)}", _text_table(rank_table, f"Maximal ratio Gini coefficients (%) for {product}"))

        bench = cfg.benchmark if cfg.benchmark in premia else names[0]
        curves = []
        for n in names:
            curve = ordered_lorenz(premia[bench], losses, relativities(premia[n], premia[bench]))
            curves += [(bench, n, x, y) for x, y in curve.points]
        pd.DataFrame(curves, columns=["benchmark", "alternative", "premium_share", "loss_share"]).to_csv(
            out / f"lorenz_{_safe(product)}.csv", index=False, lineterminator="\n"
        )

        for null, alt in lr_pairs([s for s in specs if s.name in fits]):
            lr_rows.append(_lr_row(product, null, alt, fits))

    lr = pd.DataFrame(lr_rows, columns=["product", "null", "alternative", "statistic", "dof", "p_value", "significance"])
    _write_pair(lr, out / "lr_tests", _text_table(lr, "Likelihood-ratio tests of nested frequency models"))
    return status


def cmd_report(cfg: RunConfig) -> int:
    """Collect every text table under the output directory into one file."""
    parts = []
    for sub in ("optimize", "fit", "evaluate"):
        for path in sorted((cfg.out / sub).rglob("*.txt")):
            parts.append(f"== {path.relative_to(cfg.out).as_posix()} ==\n\n{path.read_text()}")
    if not parts:
        raise ConfigError(f"no results found under {cfg.out}")
    (cfg.out / "report.txt").write_text("\n".join(parts))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="claimscore", description="Claim-score pricing models for multi-product portfolios.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().split("\n")[0] or None)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--data", help="portfolio CSV")
        p.add_argument("--schema", help="schema JSON")
        p.add_argument("--history", help="pre-sample claims history CSV")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--models", help="comma-separated model abbreviations, e.g. GLM-PG,GAM-PG-One")
        p.add_argument("--benchmark", help="static benchmark model for the grid search")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except InfeasibleSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for config, level, share in exc.tightest[:10]:
            print(f"  {config}: level {level} holds {share:.2e} of the exposure", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConvergenceError, RankError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValidationError, ConfigError, SplitError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
