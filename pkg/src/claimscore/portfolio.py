"""Longitudinal multi-product portfolios: schema, CSV ingestion, policy-year
aggregation, ownership overlap reports and a synthetic simulator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

BASE_COLUMNS = ["customer_id", "product", "calendar_year", "exposure", "claim_count", "claim_total"]
HISTORY_COLUMNS = ["customer_id", "product", "year", "exposure", "claim_count"]
KEY = ["customer_id", "product", "calendar_year"]


class ValidationError(ValueError):
    """Input data failed validation; ``row`` is the 1-based file line when known."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str  # "categorical" or "continuous"

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise ValidationError(f"covariate {self.name!r} has unknown kind {self.kind!r}")


@dataclass(frozen=True)
class PolicyRecord:
    customer_id: str
    product: str
    calendar_year: int
    exposure: float
    claim_count: int
    claim_total: float
    covariates: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Schema:
    products: tuple[str, ...]
    covariates: dict[str, tuple[Covariate, ...]]
    units: dict[str, str] = field(default_factory=dict)

    def covariate_columns(self) -> list[str]:
        seen = []
        for product in self.products:
            for cov in self.covariates.get(product, ()):
                if cov.name not in seen:
                    seen.append(cov.name)
        return seen

    def kind_of(self, name: str) -> str:
        for covs in self.covariates.values():
            for cov in covs:
                if cov.name == name:
                    return cov.kind
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "products": list(self.products),
            "covariates": {p: [{"name": c.name, "kind": c.kind} for c in self.covariates.get(p, ())] for p in self.products},
            "units": dict(self.units),
        }

    @classmethod
    def from_json(cls, data: dict) -> Schema:
        try:
            products = tuple(str(p) for p in data["products"])
        except (KeyError, TypeError) as exc:
            raise ValidationError("schema needs a 'products' array") from exc
        if len(set(products)) != len(products) or not products:
            raise ValidationError("schema products must be a non-empty list of unique names")
        covs = {}
        for product in products:
            entries = data.get("covariates", {}).get(product, [])
            covs[product] = tuple(Covariate(str(e["name"]), str(e["kind"])) for e in entries)
        schema = cls(products, covs, dict(data.get("units", {})))
        for name in schema.covariate_columns():
            kinds = {c.kind for cs in covs.values() for c in cs if c.name == name}
            if len(kinds) > 1:
                raise ValidationError(f"covariate {name!r} declared with conflicting kinds")
        return schema

    @classmethod
    def load(cls, path) -> Schema:
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")


class Portfolio:
    """Immutable-by-convention table of customer-product-year records.

    ``records`` is a DataFrame with the base columns, one column per
    covariate and a ``spell`` index separating same-year rows whose
    covariates differ.
    """

    def __init__(self, records: pd.DataFrame, schema: Schema):
        self.records = records.reset_index(drop=True)
        self.schema = schema

    @property
    def products(self) -> tuple[str, ...]:
        return self.schema.products

    def __len__(self) -> int:
        return len(self.records)

    def years(self) -> list[int]:
        return sorted(int(y) for y in self.records["calendar_year"].unique())

    def for_product(self, product: str) -> pd.DataFrame:
        return self.records[self.records["product"] == product]

    def subset(self, mask) -> Portfolio:
        return Portfolio(self.records[np.asarray(mask, dtype=bool)].copy(), self.schema)

    def iter_records(self):
        covs = self.schema.covariate_columns()
        for row in self.records.itertuples(index=False):
            d = row._asdict()
            yield PolicyRecord(
                str(d["customer_id"]),
                str(d["product"]),
                int(d["calendar_year"]),
                float(d["exposure"]),
                int(d["claim_count"]),
                float(d["claim_total"]),
                {c: d[c] for c in covs if not _is_missing(d[c])},
            )


def _is_missing(value) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value)) or value == ""


def _empty_frame(schema: Schema) -> pd.DataFrame:
    frame = pd.DataFrame({c: pd.Series(dtype=t) for c, t in zip(BASE_COLUMNS, [object, object, "int64", float, "int64", float])})
    for name in schema.covariate_columns():
        frame[name] = pd.Series(dtype=object if schema.kind_of(name) == "categorical" else float)
    frame["spell"] = pd.Series(dtype="int64")
    return frame


def load_csv(path, schema: Schema) -> Portfolio:
    """Read and validate a records CSV.

    Errors name the file line (header is line 1) and the column.
    """
    covs = schema.covariate_columns()
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in BASE_COLUMNS + covs if c not in raw.columns]
    if missing:
        raise ValidationError(f"missing column(s) {', '.join(missing)}")
    if raw.empty:
        return Portfolio(_empty_frame(schema), schema)

    out = pd.DataFrame({"customer_id": raw["customer_id"].astype(str), "product": raw["product"].astype(str)})
    line = np.arange(len(raw)) + 2

    def numeric(column: str, integer: bool = False) -> pd.Series:
        values = pd.to_numeric(raw[column], errors="coerce")
        bad = values.isna().to_numpy()
        if integer:
            bad |= ~np.isclose(values.fillna(0.0), np.round(values.fillna(0.0)))
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(f"cannot parse {raw[column].iloc[i]!r}", int(line[i]), column)
        return values.round().astype("int64") if integer else values.astype(float)

    out["calendar_year"] = numeric("calendar_year", integer=True)
    out["exposure"] = numeric("exposure")
    out["claim_count"] = numeric("claim_count", integer=True)
    out["claim_total"] = numeric("claim_total")

    unknown = ~out["product"].isin(schema.products).to_numpy()
    if unknown.any():
        i = int(np.argmax(unknown))
        raise ValidationError(f"unknown product {out['product'].iloc[i]!r}", int(line[i]), "product")
    for column, bad, message in [
        ("exposure", ~(out["exposure"] > 0), "exposure must be positive"),
        ("claim_count", out["claim_count"] < 0, "claim_count must be nonnegative"),
        ("claim_total", out["claim_total"] < 0, "claim_total must be nonnegative"),
        ("claim_total", (out["claim_total"] > 0) & (out["claim_count"] == 0), "claim_total > 0 with claim_count = 0"),
    ]:
        bad = np.asarray(bad)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(message, int(line[i]), column)

    for name in covs:
        needed = out["product"].map(lambda p, n=name: any(c.name == n for c in schema.covariates.get(p, ()))).to_numpy()
        text = raw[name]
        blank = (text == "").to_numpy()
        if (needed & blank).any():
            i = int(np.argmax(needed & blank))
            raise ValidationError("missing covariate value", int(line[i]), name)
        if schema.kind_of(name) == "categorical":
            out[name] = text.where(~blank, None).astype(object)
        else:
            values = pd.to_numeric(text.where(~blank, None), errors="coerce")
            bad = (values.isna() & ~pd.Series(blank)).to_numpy()
            if bad.any():
                i = int(np.argmax(bad))
                raise ValidationError(f"cannot parse {text.iloc[i]!r}", int(line[i]), name)
            out[name] = values.astype(float)
    out["spell"] = out.groupby(KEY, sort=False).cumcount().astype("int64")
    return Portfolio(out, schema)


def save_csv(portfolio: Portfolio, path) -> None:
    """Write records in the ingestion format (full float precision)."""
    columns = BASE_COLUMNS + portfolio.schema.covariate_columns()
    frame = portfolio.records[columns]
    frame.to_csv(path, index=False, lineterminator="\n")


def load_history(path) -> pd.DataFrame:
    """Pre-sample claims history: customer_id,product,year,exposure,claim_count."""
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in ("customer_id", "product", "year", "claim_count") if c not in raw.columns]
    if missing:
        raise ValidationError(f"history file missing column(s) {', '.join(missing)}")
    out = pd.DataFrame({"customer_id": raw["customer_id"].astype(str), "product": raw["product"].astype(str)})
    for column, default in [("year", None), ("exposure", "1.0"), ("claim_count", None)]:
        text = raw[column] if column in raw.columns else pd.Series([default] * len(raw))
        if default is not None:
            text = text.where(text != "", default)
        values = pd.to_numeric(text, errors="coerce")
        if values.isna().any():
            i = int(np.argmax(values.isna().to_numpy()))
            raise ValidationError(f"cannot parse {text.iloc[i]!r}", i + 2, column)
        out[column] = values
    if (out["exposure"] <= 0).any():
        i = int(np.argmax((out["exposure"] <= 0).to_numpy()))
        raise ValidationError("exposure must be positive", i + 2, "exposure")
    out["year"] = out["year"].astype("int64")
    out["claim_count"] = out["claim_count"].astype("int64")
    return out.sort_values(["customer_id", "product", "year"], kind="mergesort").reset_index(drop=True)


def save_history(history: pd.DataFrame, path) -> None:
    history[HISTORY_COLUMNS].to_csv(path, index=False, lineterminator="\n")


def aggregate_policy_years(portfolio: Portfolio) -> Portfolio:
    """Merge same customer-product-year spells that share all covariates.

    Exposure, claim counts and claim totals are summed.  Spells whose
    covariates differ stay separate and are numbered by ``spell``.
    """
    frame = portfolio.records
    covs = portfolio.schema.covariate_columns()
    if frame.empty:
        return Portfolio(frame.copy(), portfolio.schema)
    keys = KEY + covs
    grouped = frame.groupby(keys, sort=False, dropna=False, as_index=False).agg(
        exposure=("exposure", "sum"), claim_count=("claim_count", "sum"), claim_total=("claim_total", "sum")
    )
    grouped["spell"] = grouped.groupby(KEY, sort=False).cumcount().astype("int64")
    grouped = grouped[BASE_COLUMNS + covs + ["spell"]]
    return Portfolio(grouped, portfolio.schema)


def overlap_report(portfolio: Portfolio) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Policyholder and claim counts split by the number of products owned.

    Returns ``(holders, claims)``.  ``holders`` has one row per product with
    columns ``owned_1..owned_C``, ``total`` and matching ``pct_*`` shares.
    ``claims`` splits the product's claim count the same way and adds
    ``other_*`` columns counting claims by customers who also claimed on
    another product.
    """
    products = list(portfolio.products)
    C = len(products)
    frame = portfolio.records
    owned = frame.groupby("customer_id")["product"].nunique()
    claimed_products = frame[frame["claim_count"] > 0].groupby("customer_id")["product"].unique()

    holder_rows, claim_rows = [], []
    for product in products:
        sub = frame[frame["product"] == product]
        holders = pd.Series(sub["customer_id"].unique())
        n_owned = holders.map(owned)
        counts = [int((n_owned == m).sum()) for m in range(1, C + 1)]
        holder_rows.append(_with_shares(product, counts, "owned"))

        per_customer = sub.groupby("customer_id")["claim_count"].sum()
        per_customer = per_customer[per_customer > 0]
        m_owned = per_customer.index.map(owned)
        also = per_customer.index.map(
            lambda cid: any(p != product for p in claimed_products.get(cid, ()))
        ).to_numpy(dtype=bool)
        claim_counts = [int(per_customer[(m_owned == m)].sum()) for m in range(1, C + 1)]
        other_counts = [int(per_customer[(m_owned == m) & also].sum()) for m in range(1, C + 1)]
        row = _with_shares(product, claim_counts, "owned")
        other = _with_shares(product, other_counts, "other")
        del other["product"]
        row.update(other)
        claim_rows.append(row)
    return pd.DataFrame(holder_rows), pd.DataFrame(claim_rows)


def _with_shares(product: str, counts: list[int], prefix: str) -> dict:
    total = sum(counts)
    row = {"product": product}
    for m, value in enumerate(counts, start=1):
        row[f"{prefix}_{m}"] = value
    row[f"{prefix}_total"] = total
    for m, value in enumerate(counts, start=1):
        row[f"pct_{prefix}_{m}"] = 100.0 * value / total if total else 0.0
    row[f"pct_{prefix}_total"] = 100.0 if total else 0.0
    return row


def train_test_split(portfolio: Portfolio, last_year_as_test: bool = True) -> tuple[Portfolio, Portfolio]:
    """Hold out the latest calendar year.

    Claim scores should be computed on the full portfolio before splitting:
    each record's score only uses earlier periods, so test scores see the
    training history but never their own claims.
    """
    years = portfolio.years()
    if len(years) < 2:
        raise SplitError("need at least two calendar years to split")
    held_out = years[-1] if last_year_as_test else years[0]
    mask = (portfolio.records["calendar_year"] == held_out).to_numpy()
    return portfolio.subset(~mask), portfolio.subset(mask)


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class ProductSimulation:
    """True data-generating parameters of one product.

    ``region_effects`` are log-rate effects of the categorical covariate
    ``region`` (first level is the reference); ``age_effect`` multiplies
    the standardised continuous covariate ``age``.  When ``true_score``
    is set, the claim intensity is additionally multiplied by
    ``exp(score_slope * (level - entry_level))`` with the level evolving
    under that claim score.
    """

    name: str
    ownership: float
    log_rate: float
    region_effects: tuple[float, ...] = (0.0, 0.2, -0.2)
    age_effect: float = 0.1
    severity_log_mean: float = 7.0
    severity_region_effects: tuple[float, ...] = (0.0, 0.1, -0.1)
    severity_family: str = "gamma"
    severity_shape: float = 1.5
    count_family: str = "poisson"
    nb_size: float = 2.0
    true_score: tuple[int, int, int] | None = None
    score_slope: float = 0.0


@dataclass(frozen=True)
class SimulationConfig:
    seed: int = 42
    num_customers: int = 1000
    products: tuple[ProductSimulation, ...] = (ProductSimulation("A", 1.0, -2.0),)
    start_year: int = 2012
    num_years: int = 5
    bundle_prob: float = 0.0
    frailty_variance: float = 0.0
    entry_prob: float = 0.15
    lapse_prob: float = 0.05
    partial_exposure_prob: float = 0.3
    history_years: int = 0
    history_prob: float = 0.5

    def __post_init__(self):
        for name in ("bundle_prob", "entry_prob", "lapse_prob", "partial_exposure_prob", "history_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a probability, got {value}")
        for product in self.products:
            if not 0.0 <= product.ownership <= 1.0:
                raise ValueError(f"ownership of {product.name} must be a probability")
        if self.num_years < 1 or self.num_customers < 0 or self.frailty_variance < 0:
            raise ValueError("invalid simulation size or frailty variance")

    @classmethod
    def from_json(cls, data: dict) -> SimulationConfig:
        data = dict(data)
        if "products" in data:
            products = []
            for p in data["products"]:
                p = dict(p)
                for key in ("region_effects", "severity_region_effects", "true_score"):
                    if p.get(key) is not None:
                        p[key] = tuple(p[key])
                products.append(ProductSimulation(**p))
            data["products"] = tuple(products)
        return cls(**data)


REGIONS = ("north", "south", "west")


def default_schema(config: SimulationConfig) -> Schema:
    covs = (Covariate("region", "categorical"), Covariate("age", "continuous"))
    return Schema(
        tuple(p.name for p in config.products),
        {p.name: covs for p in config.products},
        {"exposure": "years", "claim_total": "currency"},
    )


def simulate(config: SimulationConfig) -> tuple[Portfolio, pd.DataFrame]:
    """Generate a synthetic portfolio and its pre-sample claims history.

    Output depends only on ``config``: each model component draws from its
    own child of ``SeedSequence(seed)`` in a fixed order.
    """
    from .claim_score import ClaimScoreConfig, step_array

    n, T = config.num_customers, config.num_years
    P = len(config.products)
    streams = np.random.SeedSequence(config.seed).spawn(4 + 2 * P)
    rng_own, rng_cov, rng_tenure, rng_frailty = (np.random.default_rng(s) for s in streams[:4])

    own = rng_own.random((n, P)) < np.array([p.ownership for p in config.products])
    bundle = rng_own.random(n) < config.bundle_prob
    own[bundle] = True
    empty = ~own.any(axis=1)
    if P:
        own[empty, rng_own.integers(0, P, size=int(empty.sum()))] = True

    region = rng_cov.integers(0, len(REGIONS), size=n)
    age0 = rng_cov.normal(0.0, 1.0, size=n)

    late = rng_tenure.random(n) < config.entry_prob
    entry = np.where(late, rng_tenure.integers(1, T, size=n) if T > 1 else 0, 0)
    lapse_draw = rng_tenure.random((n, T)) < config.lapse_prob
    active = np.zeros((n, T), dtype=bool)
    alive = np.ones(n, dtype=bool)
    for t in range(T):
        active[:, t] = alive & (t >= entry)
        alive &= ~(lapse_draw[:, t] & (t >= entry))
    partial = rng_tenure.random((n, T)) < config.partial_exposure_prob
    fraction = rng_tenure.uniform(0.1, 1.0, size=(n, T))
    first = np.arange(T)[None, :] == entry[:, None]
    last = active & ~np.concatenate([active[:, 1:], np.zeros((n, 1), dtype=bool)], axis=1) & (np.arange(T)[None, :] < T - 1)
    exposure = np.where(active, 1.0, 0.0)
    exposure = np.where(active & (first | last) & partial, fraction, exposure)
    has_history = (entry == 0) & (rng_tenure.random(n) < config.history_prob)

    if config.frailty_variance > 0:
        v = config.frailty_variance
        frailty = rng_frailty.gamma(1.0 / v, v, size=n)
    else:
        frailty = np.ones(n)

    frames, histories = [], []
    ids = np.array([f"C{i:06d}" for i in range(n)], dtype=object)
    for j, product in enumerate(config.products):
        rng_claims = np.random.default_rng(streams[4 + 2 * j])
        rng_sev = np.random.default_rng(streams[5 + 2 * j])
        region_eff = np.asarray(product.region_effects)[region]
        years = np.arange(T)
        age = age0[:, None] + 0.1 * years[None, :]
        base = np.exp(product.log_rate + region_eff[:, None] + product.age_effect * age) * frailty[:, None]

        score_cfg = ClaimScoreConfig(*product.true_score) if product.true_score is not None else None
        level = np.full(n, float(score_cfg.entry_level)) if score_cfg else None

        hist_counts = np.zeros((n, config.history_years), dtype=np.int64)
        for h in range(config.history_years):
            rate = base[:, 0] * _score_relativity(product, score_cfg, level)
            hist_counts[:, h] = _draw_counts(rng_claims, product, rate)
            if score_cfg:
                # history years are full years of cover
                level = np.where(has_history & own[:, j], step_array(level, np.ones(n), hist_counts[:, h], score_cfg), level)
        if config.history_years:
            rows = np.nonzero(has_history & own[:, j])[0]
            for h in range(config.history_years):
                histories.append(pd.DataFrame({
                    "customer_id": ids[rows],
                    "product": product.name,
                    "year": config.start_year - config.history_years + h,
                    "exposure": 1.0,
                    "claim_count": hist_counts[rows, h],
                }))

        counts = np.zeros((n, T), dtype=np.int64)
        for t in range(T):
            rate = exposure[:, t] * base[:, t] * _score_relativity(product, score_cfg, level)
            counts[:, t] = _draw_counts(rng_claims, product, rate)
            if score_cfg:
                covered = own[:, j] & active[:, t]
                stepped = step_array(level, exposure[:, t], counts[:, t], score_cfg)
                level = np.where(covered, stepped, level)

        sev_mean = np.exp(product.severity_log_mean + np.asarray(product.severity_region_effects)[region])
        totals = np.zeros((n, T))
        pos = counts > 0
        totals[pos] = counts[pos] * _draw_severity(rng_sev, product, np.broadcast_to(sev_mean[:, None], (n, T))[pos], counts[pos])

        mask = own[:, j][:, None] & active
        ci, ti = np.nonzero(mask)
        frames.append(pd.DataFrame({
            "customer_id": ids[ci],
            "product": product.name,
            "calendar_year": (config.start_year + ti).astype("int64"),
            "exposure": exposure[ci, ti],
            "claim_count": counts[ci, ti],
            "claim_total": totals[ci, ti],
            "region": np.asarray(REGIONS, dtype=object)[region[ci]],
            "age": np.round(age[ci, ti], 6),
        }))

    schema = default_schema(config)
    records = pd.concat(frames, ignore_index=True) if frames else _empty_frame(schema)
    records = records.sort_values(["customer_id", "product", "calendar_year"], kind="mergesort").reset_index(drop=True)
    records["spell"] = np.zeros(len(records), dtype="int64")
    if histories:
        history = pd.concat(histories, ignore_index=True)
        history = history.sort_values(["customer_id", "product", "year"], kind="mergesort").reset_index(drop=True)
    else:
        history = pd.DataFrame({c: pd.Series(dtype=t) for c, t in zip(HISTORY_COLUMNS, [object, object, "int64", float, "int64"])})
    return Portfolio(records, schema), history


def _score_relativity(product: ProductSimulation, score_cfg, level):
    if score_cfg is None:
        return 1.0
    return np.exp(product.score_slope * (level - score_cfg.entry_level))


def _draw_counts(rng: np.random.Generator, product: ProductSimulation, rate: np.ndarray) -> np.ndarray:
    if product.count_family == "poisson":
        return rng.poisson(rate)
    if product.count_family == "negative_binomial":
        r = product.nb_size
        mixed = rng.gamma(r, 1.0 / r, size=rate.shape) * rate
        return rng.poisson(mixed)
    raise ValueError(f"unknown count family {product.count_family!r}")


def _draw_severity(rng: np.random.Generator, product: ProductSimulation, mean: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Average of ``counts`` independent claim sizes with the given mean."""
    if product.severity_family == "gamma":
        shape = product.severity_shape * counts
        return rng.gamma(shape, mean / shape)
    if product.severity_family == "inverse_gaussian":
        # IG(mean, lam) averages to IG(mean, n * lam)
        lam = product.severity_shape * mean * counts
        return rng.wald(mean, lam)
    raise ValueError(f"unknown severity family {product.severity_family!r}")
