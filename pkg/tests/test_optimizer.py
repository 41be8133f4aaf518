from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from claimscore import families as fam
from claimscore.claim_score import ClaimScoreConfig, trajectory
from claimscore.model import ModelSpec, ScoreEffect, Structure, build_design, fit_design
from claimscore.optimizer import (
    LOG_COLUMNS,
    GridSpec,
    InfeasibleSearchError,
    enumerate_grid,
    feasible,
    feasible_for_portfolio,
    optimize_claim_score,
)
from claimscore.portfolio import (
    Covariate,
    Portfolio,
    ProductSimulation,
    Schema,
    SimulationConfig,
    simulate,
    train_test_split,
)


def test_grid_sizes_and_order():
    assert [c.as_tuple() for c in enumerate_grid(GridSpec(s_values=(3,)))] == [(1, 3, 2), (2, 3, 2)]
    # psi in {1, 2, 3} and l0 in {2, 3}, consistent with the closed-form total
    four = enumerate_grid(GridSpec(s_values=(4,)))
    assert len(four) == 6
    full = enumerate_grid(GridSpec())
    assert len(full) == sum((s - 1) * (s - 2) for s in range(3, 26)) == 4600
    keys = [(c.max_level, c.psi, c.entry_level) for c in full]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(min_exposure_share=1.0)
    with pytest.raises(ValueError):
        GridSpec(s_values=(2, 3))


def claim_free_scores(cfg, years=4):
    """Claim-free customers entering at l0 and staying ``years`` full years."""
    return np.concatenate([trajectory([(t, 1.0, 0) for t in range(n)], cfg)[:n] for n in range(1, years + 1)]), np.ones(years * (years + 1) // 2)


def test_claim_free_portfolio_fails_when_lower_levels_unreachable():
    cfg = ClaimScoreConfig(1, 3, 2)
    scores, exposure = claim_free_scores(cfg)
    assert set(np.round(scores).astype(int)) == {2, 3}
    assert not feasible(cfg, scores, exposure)
    assert feasible(cfg, scores, exposure, 0.0)


def test_single_period_is_infeasible():
    for s in range(3, 8):
        cfg = ClaimScoreConfig(1, s, 2)
        scores = np.full(50, 2.0)
        assert not feasible(cfg, scores, np.ones(50))


def test_empty_portfolio_is_an_error():
    with pytest.raises(ValueError):
        feasible(ClaimScoreConfig(1, 3, 2), np.array([]), np.array([]))


@settings(max_examples=40, deadline=None)
@given(psi=st.integers(1, 6), l0=st.integers(2, 6), s=st.integers(3, 12), extra=st.integers(1, 10), years=st.integers(1, 6))
def test_claim_free_infeasibility_is_monotone_in_s(psi, l0, s, extra, years):
    if not (psi < s and l0 < s):
        return
    small = ClaimScoreConfig(psi, s, l0)
    big = ClaimScoreConfig(psi, s + extra, l0)
    scores, exposure = claim_free_scores(small, years)
    if not feasible(small, scores, exposure):
        big_scores, big_exposure = claim_free_scores(big, years)
        assert not feasible(big, big_scores, big_exposure)


SCHEMA = Schema(("A",), {"A": (Covariate("region", "categorical"),)})


def claim_free_portfolio(n=40, years=3):
    rows = [(f"c{i}", "A", 2012 + t, 1.0, 0, 0.0, "north" if i % 2 else "south", 0) for i in range(n) for t in range(years)]
    frame = pd.DataFrame(rows, columns=["customer_id", "product", "calendar_year", "exposure", "claim_count", "claim_total", "region", "spell"])
    return Portfolio(frame, SCHEMA)


def test_portfolio_feasibility_on_claim_free_data():
    train = claim_free_portfolio()
    for cfg in enumerate_grid(GridSpec(s_values=(3, 4, 5))):
        reachable = feasible_for_portfolio(cfg, train, "A", 0.0)
        assert reachable
        # nobody ever drops below l0, so any config with l0 > 1 is infeasible
        assert not feasible_for_portfolio(cfg, train, "A")
    with pytest.raises(ValueError):
        feasible_for_portfolio(ClaimScoreConfig(1, 3, 2), train.subset(np.zeros(len(train), bool)), "A")


def search_setup(portfolio, product="A", k=4):
    train, test = train_test_split(portfolio)
    bench_spec = ModelSpec.from_abbreviation("GLM-PG", product, portfolio.products)
    benchmark = fit_design(build_design(train, bench_spec))
    template = ModelSpec(
        product, fam.poisson(), fam.gamma(), Structure.ONE_PRODUCT, ScoreEffect.CUBIC_SPLINE,
        ((product, ClaimScoreConfig(1, 3, 2)),), portfolio.products, k,
    )
    return train, test, template, benchmark


@pytest.fixture(scope="module")
def searched(four_products):
    portfolio, history = four_products
    train, test, template, benchmark = search_setup(portfolio)
    grid = GridSpec(s_values=(3, 4, 5))
    return train, test, template, benchmark, history, grid, optimize_claim_score(train, test, "A", template, benchmark, grid, history)


def test_search_log_bookkeeping(searched):
    *_, grid, result = searched
    log = result.log_frame()
    assert len(log) == len(enumerate_grid(grid)) == 2 + 6 + 12
    assert list(log.columns) == LOG_COLUMNS + ["best"]
    assert log["best"].sum() == 1
    feasible_rows = log[log["feasible"] & log["gini"].notna()]
    assert result.best_gini == feasible_rows["gini"].max()
    best = log[log["best"]].iloc[0]
    assert best["feasible"] and best["gini"] == result.best_gini
    assert (best["config_psi"], best["config_s"], best["config_l0"]) == result.best_config.as_tuple()


def test_single_config_grid_returns_it(searched):
    train, test, template, benchmark, history, _, result = searched
    feasible_cfg = next(ev.config for ev in result.evaluations if ev.feasible and not math.isnan(ev.gini))
    single = optimize_claim_score(train, test, "A", template, benchmark, [feasible_cfg], history)
    assert single.best_config == feasible_cfg
    assert len(single.evaluations) == 1


def test_search_is_deterministic_across_workers(searched, tmp_path):
    train, test, template, benchmark, history, grid, result = searched
    parallel = optimize_claim_score(train, test, "A", template, benchmark, grid, history, jobs=2)
    result.write_csv(tmp_path / "a.csv")
    parallel.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_product_order_does_not_matter(four_products):
    portfolio, history = four_products
    grid = GridSpec(s_values=(3, 4))
    results = {}
    for order in (["A", "B"], ["B", "A"]):
        for product in order:
            train, test, template, benchmark = search_setup(portfolio, product)
            res = optimize_claim_score(train, test, product, template, benchmark, grid, history)
            results.setdefault(product, []).append(res.log_frame())
    for frames in results.values():
        pd.testing.assert_frame_equal(frames[0], frames[1])


def test_infeasible_search_reports_tightest_levels(four_products):
    portfolio, history = four_products
    train, test, template, benchmark = search_setup(portfolio)
    grid = GridSpec(s_values=(24, 25), min_exposure_share=0.5)
    with pytest.raises(InfeasibleSearchError) as err:
        optimize_claim_score(train, test, "A", template, benchmark, grid, history)
    tightest = err.value.tightest
    assert len(tightest) == len(enumerate_grid(grid))
    shares = [share for _, _, share in tightest]
    assert shares == sorted(shares) and shares[0] < 0.5


def test_rejects_static_template_and_overlapping_years(searched):
    train, test, template, benchmark, history, grid, _ = searched
    with pytest.raises(ValueError):
        optimize_claim_score(train, test, "A", template.static_counterpart(), benchmark, grid, history)
    with pytest.raises(ValueError):
        optimize_claim_score(test, train, "A", template, benchmark, grid, history)


def test_generative_recovery():
    true = ClaimScoreConfig(1, 8, 4)
    cfg = SimulationConfig(
        seed=11, num_customers=6000, num_years=6, history_years=3, history_prob=1.0,
        products=(ProductSimulation("A", 1.0, -1.2, true_score=true.as_tuple(), score_slope=-0.35),),
    )
    portfolio, history = simulate(cfg)
    train, test, template, benchmark = search_setup(portfolio)
    result = optimize_claim_score(train, test, "A", template, benchmark, GridSpec(s_values=tuple(range(3, 13))), history)
    assert abs(result.best_config.max_level - true.max_level) <= 2
    assert result.best_gini >= 0.0
