"""Frequency/severity model structures with claim-score effects.

A model is a frequency GLM or GAM for claim counts (log-exposure offset)
and a severity GLM for the average claim size.  Dynamic structures add
claim-score terms to the frequency predictor: the own product's score
(one-product) or the scores of every product the customer holds
(multi-product).  Score effects are linear in ``score - l0`` or B-spline
functions constrained to vanish at ``l0``; a product the customer does not
hold contributes nothing.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy import stats

from . import families as fam
from .claim_score import ClaimScoreConfig, step_array
from .families import DomainError, Family
from .fitter import Design, FitSettings, FittedModel, fit_pirls, predict_mean
from .portfolio import Portfolio, Schema, ValidationError
from .splines import ConstrainedBasis, SplineBasis, constrain

INTERCEPT = "(Intercept)"


class ConfigError(ValueError):
    pass


class Structure(str, enum.Enum):
    STATIC = "static"
    ONE_PRODUCT = "one"
    MULTI_PRODUCT = "multi"


class ScoreEffect(str, enum.Enum):
    NONE = "none"
    LINEAR = "linear"
    CUBIC_SPLINE = "cubic"
    PIECEWISE_LINEAR = "piecewise_linear"


# nesting order used by the likelihood-ratio test; splines of either degree
# reproduce linear functions of the score
_RICHER = {
    ScoreEffect.NONE: {ScoreEffect.NONE, ScoreEffect.LINEAR, ScoreEffect.CUBIC_SPLINE, ScoreEffect.PIECEWISE_LINEAR},
    ScoreEffect.LINEAR: {ScoreEffect.LINEAR, ScoreEffect.CUBIC_SPLINE, ScoreEffect.PIECEWISE_LINEAR},
    ScoreEffect.CUBIC_SPLINE: {ScoreEffect.CUBIC_SPLINE},
    ScoreEffect.PIECEWISE_LINEAR: {ScoreEffect.PIECEWISE_LINEAR},
}

_FREQUENCY = {"P": fam.poisson, "NB": fam.negative_binomial}
_SEVERITY = {"G": fam.gamma, "IG": fam.inverse_gaussian}
_ABBREVIATION = re.compile(r"^(GLM|GAM)-(P|NB)(G|IG)(?:-(One|Multi))?(-PL)?$")


@dataclass(frozen=True)
class ModelSpec:
    product: str
    frequency_family: Family
    severity_family: Family
    structure: Structure = Structure.STATIC
    score_effect: ScoreEffect = ScoreEffect.NONE
    score_configs: tuple[tuple[str, ClaimScoreConfig], ...] = ()
    products: tuple[str, ...] = ()
    spline_k: int = 4
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "structure", Structure(self.structure))
        object.__setattr__(self, "score_effect", ScoreEffect(self.score_effect))
        if isinstance(self.score_configs, dict):
            object.__setattr__(self, "score_configs", tuple(self.score_configs.items()))
        if not self.frequency_family.is_count or self.severity_family.is_count:
            raise ConfigError("frequency family must be a count family and severity a positive family")
        static = self.structure is Structure.STATIC
        if static != (self.score_effect is ScoreEffect.NONE):
            raise ConfigError("static models carry no score effect and dynamic models need one")
        configs = dict(self.score_configs)
        for product in self.score_products:
            if product not in configs:
                raise ConfigError(f"no claim score configuration for product {product!r}")
        if self.spline_k < 3 and self.score_effect in (ScoreEffect.CUBIC_SPLINE, ScoreEffect.PIECEWISE_LINEAR):
            raise ConfigError("spline_k must be at least 3")
        if not self.name:
            object.__setattr__(self, "name", self.abbreviation())

    @property
    def score_products(self) -> list[str]:
        if self.structure is Structure.STATIC:
            return []
        if self.structure is Structure.ONE_PRODUCT:
            return [self.product]
        return list(self.products) if self.products else [p for p, _ in self.score_configs]

    def config_for(self, product: str) -> ClaimScoreConfig:
        configs = dict(self.score_configs)
        if product not in configs:
            raise ConfigError(f"no claim score configuration for product {product!r}")
        return configs[product]

    def abbreviation(self) -> str:
        kind = "GLM" if self.score_effect in (ScoreEffect.NONE, ScoreEffect.LINEAR) else "GAM"
        out = f"{kind}-{self.frequency_family.short}{self.severity_family.short}"
        if self.structure is Structure.ONE_PRODUCT:
            out += "-One"
        elif self.structure is Structure.MULTI_PRODUCT:
            out += "-Multi"
        if self.score_effect is ScoreEffect.PIECEWISE_LINEAR:
            out += "-PL"
        return out

    def static_counterpart(self) -> ModelSpec:
        return ModelSpec(self.product, self.frequency_family, self.severity_family, products=self.products)

    @classmethod
    def from_abbreviation(
        cls,
        abbreviation: str,
        product: str,
        products: tuple[str, ...] | list[str] = (),
        score_configs: dict[str, ClaimScoreConfig] | None = None,
        spline_k: int = 4,
    ) -> ModelSpec:
        """Parse names such as ``GLM-PG``, ``GAM-NBIG-One`` or ``GAM-PG-Multi-PL``."""
        m = _ABBREVIATION.match(abbreviation.strip())
        if not m:
            raise ConfigError(f"unknown model abbreviation {abbreviation!r}")
        kind, freq, sev, structure, pl = m.groups()
        if structure is None:
            if kind == "GAM" or pl:
                raise ConfigError(f"{abbreviation}: static models are GLMs")
            struct, effect = Structure.STATIC, ScoreEffect.NONE
        else:
            struct = Structure.ONE_PRODUCT if structure == "One" else Structure.MULTI_PRODUCT
            if pl:
                if kind != "GAM":
                    raise ConfigError(f"{abbreviation}: piecewise linear effects are GAM terms")
                effect = ScoreEffect.PIECEWISE_LINEAR
            else:
                effect = ScoreEffect.CUBIC_SPLINE if kind == "GAM" else ScoreEffect.LINEAR
        configs = dict(score_configs or {})
        wanted = [] if struct is Structure.STATIC else ([product] if struct is Structure.ONE_PRODUCT else list(products))
        return cls(
            product,
            _FREQUENCY[freq](),
            _SEVERITY[sev](),
            struct,
            effect,
            tuple((p, configs[p]) for p in wanted if p in configs),
            tuple(products),
            spline_k,
            abbreviation.strip(),
        )


@dataclass(frozen=True, eq=False)
class ScoreTerm:
    """Columns contributed by one product's claim score."""

    product: str
    effect: ScoreEffect
    config: ClaimScoreConfig
    basis: ConstrainedBasis | None = None

    @classmethod
    def build(cls, product: str, effect: ScoreEffect, config: ClaimScoreConfig, k: int = 4) -> ScoreTerm:
        if effect is ScoreEffect.LINEAR:
            return cls(product, effect, config)
        degree = 3 if effect is ScoreEffect.CUBIC_SPLINE else 1
        base = SplineBasis.clamped(degree, k, 1.0, float(config.max_level))
        return cls(product, effect, config, constrain(base, float(config.entry_level)))

    @property
    def width(self) -> int:
        return 1 if self.basis is None else self.basis.num_params

    def names(self) -> list[str]:
        if self.basis is None:
            return [f"score[{self.product}]"]
        return [f"score[{self.product}]:{h + 1}" for h in range(self.width)]

    def columns(self, scores: NDArray) -> NDArray:
        """Design columns for scores; NaN (product not held) gives zeros."""
        scores = np.asarray(scores, dtype=float)
        out = np.zeros((scores.size, self.width))
        held = ~np.isnan(scores)
        if held.any():
            s = scores[held]
            if np.any(s < 1.0 - 1e-9) or np.any(s > self.config.max_level + 1e-9):
                raise DomainError(f"claim score outside [1, {self.config.max_level}]")
            if self.basis is None:
                out[held, 0] = s - self.config.entry_level
            else:
                out[held] = self.basis(s)
        return out

    def penalty(self) -> NDArray | None:
        return None if self.basis is None else self.basis.penalty()


class CovariateEncoder:
    """Intercept, treatment-coded categoricals and raw continuous covariates.

    Category levels are sorted lexicographically and the first is the
    reference.  Levels are learned by :meth:`fit` and reused for new data.
    """

    def __init__(self, covariates):
        self.covariates = tuple(covariates)
        self.levels: dict[str, list[str]] = {}

    def fit(self, frame: pd.DataFrame) -> CovariateEncoder:
        for cov in self.covariates:
            if cov.kind == "categorical":
                labels = frame[cov.name].dropna().astype(str).unique()
                self.levels[cov.name] = sorted(labels)
        return self

    @property
    def names(self) -> list[str]:
        out = [INTERCEPT]
        for cov in self.covariates:
            if cov.kind == "categorical":
                out += [f"{cov.name}[{level}]" for level in self.levels[cov.name][1:]]
            else:
                out.append(cov.name)
        return out

    def transform(self, frame: pd.DataFrame) -> NDArray:
        blocks = [np.ones((len(frame), 1))]
        for cov in self.covariates:
            values = frame[cov.name]
            if cov.kind == "categorical":
                levels = self.levels[cov.name]
                labels = values.astype(str).to_numpy()
                unseen = ~np.isin(labels, levels)
                if unseen.any():
                    raise ValidationError(f"unseen level {labels[np.argmax(unseen)]!r}", column=cov.name)
                blocks.append((labels[:, None] == np.asarray(levels[1:], dtype=object)[None, :]).astype(float))
            else:
                x = values.to_numpy(dtype=float)
                if np.isnan(x).any():
                    raise ValidationError("missing continuous covariate", column=cov.name)
                blocks.append(x[:, None])
        return np.hstack(blocks)


class ScorePanel:
    """Claim-score trajectories of one product for every customer holding it.

    Records are grouped into customer-year cells (spells summed, exposure
    capped at one year).  Years without cover freeze the score.  Optional
    pre-sample history initialises the score in place of the entry level.
    """

    def __init__(self, portfolio: Portfolio, product: str, history: pd.DataFrame | None = None):
        frame = portfolio.records
        own = frame[frame["product"] == product]
        cells = own.groupby(["customer_id", "calendar_year"], sort=True)[["exposure", "claim_count"]].sum()
        self.customers = np.asarray(sorted(own["customer_id"].unique()), dtype=object)
        self.years = np.asarray(portfolio.years(), dtype=np.int64)
        cust_index = {c: i for i, c in enumerate(self.customers)}
        year_index = {int(y): t for t, y in enumerate(self.years)}
        n, T = len(self.customers), len(self.years)
        self.exposure = np.zeros((n, T))
        self.claims = np.zeros((n, T))
        if len(cells):
            ci = np.array([cust_index[c] for c in cells.index.get_level_values(0)], dtype=np.int64)
            ti = np.array([year_index[int(y)] for y in cells.index.get_level_values(1)], dtype=np.int64)
            self.exposure[ci, ti] = np.minimum(cells["exposure"].to_numpy(), 1.0)
            self.claims[ci, ti] = cells["claim_count"].to_numpy()

        self.history_exposure = np.zeros((n, 0))
        self.history_claims = np.zeros((n, 0))
        if history is not None and len(history):
            hist = history[(history["product"] == product) & history["customer_id"].isin(cust_index)]
            if len(hist):
                cells = hist.groupby(["customer_id", "year"], sort=True)[["exposure", "claim_count"]].sum()
                hyears = sorted(int(y) for y in cells.index.get_level_values(1).unique())
                hindex = {y: h for h, y in enumerate(hyears)}
                self.history_exposure = np.zeros((n, len(hyears)))
                self.history_claims = np.zeros((n, len(hyears)))
                ci = np.array([cust_index[c] for c in cells.index.get_level_values(0)], dtype=np.int64)
                hi = np.array([hindex[int(y)] for y in cells.index.get_level_values(1)], dtype=np.int64)
                self.history_exposure[ci, hi] = np.minimum(cells["exposure"].to_numpy(), 1.0)
                self.history_claims[ci, hi] = cells["claim_count"].to_numpy()

        # map every portfolio record to the (customer, year) cell of this product
        rec_c = frame["customer_id"].map(cust_index)
        rec_t = frame["calendar_year"].map(year_index).to_numpy(dtype=np.int64)
        held = rec_c.notna().to_numpy()
        rec_c = rec_c.fillna(-1).to_numpy(dtype=np.int64)
        cell_held = np.zeros(len(frame), dtype=bool)
        cell_held[held] = self.exposure[rec_c[held], rec_t[held]] > 0
        self._rec_c, self._rec_t, self._rec_held = rec_c, rec_t, cell_held

    def initial_levels(self, cfg: ClaimScoreConfig) -> NDArray:
        level = np.full(len(self.customers), float(cfg.entry_level))
        for h in range(self.history_exposure.shape[1]):
            level = step_array(level, self.history_exposure[:, h], self.history_claims[:, h], cfg)
        return level

    def panel(self, cfg: ClaimScoreConfig) -> NDArray:
        from .claim_score import score_panel

        return score_panel(self.exposure, self.claims, cfg, self.initial_levels(cfg))

    def for_records(self, cfg: ClaimScoreConfig) -> NDArray:
        """Score of this product entering each record's year; NaN where not held."""
        panel = self.panel(cfg)
        out = np.full(self._rec_c.size, np.nan)
        held = self._rec_held
        out[held] = panel[self._rec_c[held], self._rec_t[held]]
        return out


def compute_scores(
    portfolio: Portfolio,
    configs: dict[str, ClaimScoreConfig],
    history: pd.DataFrame | None = None,
) -> pd.DataFrame:
    """One column per configured product, aligned with ``portfolio.records``."""
    data = {}
    for product, cfg in configs.items():
        if product not in portfolio.products:
            raise ConfigError(f"unknown product {product!r}")
        data[product] = ScorePanel(portfolio, product, history).for_records(cfg)
    return pd.DataFrame(data, index=portfolio.records.index)


@dataclass
class DesignSet:
    """Frequency and severity problems for one product and model spec."""

    spec: ModelSpec
    frequency: Design
    severity: Design
    severity_all: NDArray
    exposure: NDArray
    terms: list[tuple[ScoreTerm, slice]]
    encoder: CovariateEncoder
    records: pd.DataFrame
    claim_rows: NDArray = field(default=None)


def build_design(
    portfolio: Portfolio,
    spec: ModelSpec,
    scores: pd.DataFrame | None = None,
    encoder: CovariateEncoder | None = None,
) -> DesignSet:
    """Frequency and severity designs for ``spec.product``.

    Frequency rows model the claim count with a ``log(exposure)`` offset;
    severity rows are restricted to records with claims, model the average
    claim size and are weighted by the claim count.  Pass the encoder of a
    fitted model to encode new data consistently.
    """
    if spec.product not in portfolio.products:
        raise ConfigError(f"product {spec.product!r} not in portfolio")
    mask = (portfolio.records["product"] == spec.product).to_numpy()
    records = portfolio.records[mask]
    covs = portfolio.schema.covariates.get(spec.product, ())
    if encoder is None:
        encoder = CovariateEncoder(covs).fit(records)
    X = encoder.transform(records)
    names = encoder.names

    blocks, penalties, terms = [X], [], []
    col = X.shape[1]
    for product in spec.score_products:
        if product not in portfolio.products:
            raise ConfigError(f"score product {product!r} not in portfolio")
        if scores is None or product not in scores.columns:
            raise ConfigError(f"no claim scores computed for product {product!r}")
        term = ScoreTerm.build(product, spec.score_effect, spec.config_for(product), spec.spline_k)
        values = scores.loc[records.index, product].to_numpy(dtype=float)
        blocks.append(term.columns(values))
        cols = slice(col, col + term.width)
        if term.penalty() is not None:
            penalties.append((cols, term.penalty()))
        terms.append((term, cols))
        names = names + term.names()
        col += term.width
    Xf = np.hstack(blocks)

    exposure = records["exposure"].to_numpy(dtype=float)
    counts = records["claim_count"].to_numpy(dtype=float)
    frequency = Design(Xf, counts, np.log(exposure), np.ones(len(records)), names, penalties)

    claim_rows = np.nonzero(counts > 0)[0]
    avg = records["claim_total"].to_numpy(dtype=float)[claim_rows] / counts[claim_rows]
    severity = Design(X[claim_rows], avg, np.zeros(claim_rows.size), counts[claim_rows], list(encoder.names))
    return DesignSet(spec, frequency, severity, X, exposure, terms, encoder, records, claim_rows)


@dataclass
class FittedPair:
    spec: ModelSpec
    frequency: FittedModel
    severity: FittedModel
    encoder: CovariateEncoder

    def predict(self, portfolio: Portfolio, scores: pd.DataFrame | None = None) -> pd.DataFrame:
        """Expected counts, severities, risk premia and expected losses."""
        ds = build_design(portfolio, self.spec, scores, self.encoder)
        counts = np.atleast_1d(predict_mean(self.frequency, ds.frequency.X, ds.frequency.offset))
        severity = np.atleast_1d(predict_mean(self.severity, ds.severity_all))
        rate = counts / ds.exposure
        return pd.DataFrame(
            {
                "expected_count": counts,
                "expected_severity": severity,
                "premium": rate * severity,
                "expected_loss": counts * severity,
                "exposure": ds.exposure,
                "loss": ds.records["claim_total"].to_numpy(dtype=float),
            },
            index=ds.records.index,
        )


def fit_design(ds: DesignSet, settings: FitSettings | None = None, severity: FittedModel | None = None) -> FittedPair:
    """Fit both components; a ready severity fit may be passed in to share it."""
    freq = fit_pirls(ds.frequency, ds.spec.frequency_family, settings)
    freq.spec, freq.terms = ds.spec, ds.terms
    if severity is None:
        severity = fit_pirls(ds.severity, ds.spec.severity_family, settings)
        severity.spec, severity.terms = ds.spec, []
    return FittedPair(ds.spec, freq, severity, ds.encoder)


def fit_model(
    portfolio: Portfolio,
    spec: ModelSpec,
    scores: pd.DataFrame | None = None,
    settings: FitSettings | None = None,
) -> FittedPair:
    return fit_design(build_design(portfolio, spec, scores), settings)


def relativity(fit: FittedModel, product: str, score: float | NDArray) -> float | NDArray:
    """exp(f(score)) for the given product's score effect; one at the entry level."""
    for term, cols in fit.terms or []:
        if term.product == product:
            s = np.atleast_1d(np.asarray(score, dtype=float))
            if np.any(np.isnan(s)) or np.any(s < 1.0) or np.any(s > term.config.max_level):
                raise DomainError(f"score outside [1, {term.config.max_level}]")
            out = np.exp(term.columns(s) @ fit.coefficients[cols])
            return out if np.ndim(score) else float(out[0])
    if np.any(np.asarray(score) < 1.0):
        raise DomainError("score below 1")
    return np.ones_like(np.asarray(score, dtype=float)) if np.ndim(score) else 1.0


def premium(
    freq_fit: FittedModel,
    sev_fit: FittedModel,
    freq_row: NDArray,
    sev_row: NDArray,
    exposure: float = 1.0,
) -> float:
    """Expected claim frequency per unit exposure times expected severity."""
    for fit, attr in ((freq_fit, "frequency_family"), (sev_fit, "severity_family")):
        if fit.spec is not None and getattr(fit.spec, attr).kind is not fit.family.kind:
            raise ConfigError(f"{fit.family.kind.value} fit does not match the model's {attr}")
    if freq_fit.spec is not None and sev_fit.spec is not None and freq_fit.spec.product != sev_fit.spec.product:
        raise ConfigError("frequency and severity fits belong to different products")
    rate = predict_mean(freq_fit, freq_row, np.log(exposure)) / exposure
    return float(rate * predict_mean(sev_fit, sev_row))


def _score_effects(spec: ModelSpec) -> dict[str, ScoreEffect]:
    return {p: spec.score_effect for p in spec.score_products}


def is_nested(null: ModelSpec, alt: ModelSpec) -> bool:
    if (null.product, null.frequency_family.kind) != (alt.product, alt.frequency_family.kind):
        return False
    alt_effects = _score_effects(alt)
    for product, effect in _score_effects(null).items():
        if product not in alt_effects or alt_effects[product] not in _RICHER[effect]:
            return False
        if null.config_for(product) != alt.config_for(product):
            return False
    return True


def lr_test(null_fit: FittedModel, alt_fit: FittedModel) -> dict:
    """Likelihood-ratio test of a nested frequency model against a richer one."""
    if null_fit.family.kind is not alt_fit.family.kind or null_fit.n_obs != alt_fit.n_obs:
        raise ConfigError("likelihood-ratio test needs the same family and data")
    if null_fit.spec is not None and alt_fit.spec is not None and not is_nested(null_fit.spec, alt_fit.spec):
        raise ConfigError(f"{null_fit.spec.name} is not nested in {alt_fit.spec.name}")
    dof = alt_fit.num_params - null_fit.num_params
    if dof < 0:
        raise ConfigError("alternative model has fewer parameters than the null")
    statistic = 2.0 * (alt_fit.loglik - null_fit.loglik)
    if dof == 0:
        p_value = 1.0
    else:
        p_value = float(stats.chi2.sf(max(statistic, 0.0), dof))
    return {"statistic": statistic, "dof": dof, "p_value": p_value}
