from __future__ import annotations

import json
import math

import numpy as np
import pandas as pd
import pytest

from claimscore.cli import EXIT_CONVERGENCE, EXIT_INFEASIBLE, EXIT_OK, EXIT_VALIDATION, _stars, main
from claimscore.gini import minimax_select
from claimscore.portfolio import Schema, load_csv, load_history

SIM = {
    "num_customers": 1200,
    "num_years": 4,
    "frailty_variance": 0.5,
    "history_years": 2,
    "products": [
        {"name": "A", "ownership": 0.8, "log_rate": -1.5},
        {"name": "B", "ownership": 0.5, "log_rate": -1.8, "severity_family": "inverse_gaussian"},
    ],
}
MODELS = "GLM-PG,GLM-PG-One,GAM-PG-One,GLM-PG-Multi,GAM-PG-Multi"


def write_config(tmp_path, **extra):
    cfg = {"out": str(tmp_path / "out"), "seed": 42, "simulation": SIM, "grid": {"s_values": [3, 4]}, **extra}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    codes = [main([cmd, "--config", str(cfg), "--models", MODELS]) for cmd in ("simulate", "optimize", "fit", "evaluate", "report")]
    return root, root / "out", codes


def test_pipeline_succeeds(pipeline):
    _, out, codes = pipeline
    assert codes == [EXIT_OK] * 5
    assert (out / "report.txt").read_text().count("==") >= 2


def test_simulate_is_byte_identical_and_round_trips(pipeline, tmp_path):
    _, out, _ = pipeline
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
    for name in ("portfolio.csv", "schema.json", "history.csv"):
        assert (tmp_path / "out" / name).read_bytes() == (out / name).read_bytes()
    schema = Schema.load(out / "schema.json")
    portfolio = load_csv(out / "portfolio.csv", schema)
    assert len(portfolio) == len((out / "portfolio.csv").read_text().splitlines()) - 1
    assert portfolio.products == ("A", "B")
    assert len(load_history(out / "history.csv")) > 0


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path)
    main(["simulate", "--config", str(cfg), "--seed", "43", "--out", str(tmp_path / "o43")])
    main(["simulate", "--config", str(cfg)])
    assert (tmp_path / "o43" / "portfolio.csv").read_bytes() != (tmp_path / "out" / "portfolio.csv").read_bytes()


def test_optimize_outputs(pipeline, tmp_path):
    root, out, _ = pipeline
    for product in ("A", "B"):
        log = pd.read_csv(out / "optimize" / f"search_{product}.csv")
        assert len(log) == 2 + 6
        assert list(log.columns[:8]) == ["config_psi", "config_s", "config_l0", "feasible", "gini", "gini_se", "fit_iterations", "loglik"]
        assert log["best"].sum() == 1
        best = log[log["best"]].iloc[0]
        assert best["gini"] == log.loc[log["feasible"], "gini"].max()
    optima = json.loads((out / "optimal_configs.json").read_text())
    assert set(optima) == {"A", "B"}
    # a second run in a fresh directory reproduces every byte
    cfg = write_config(tmp_path)
    data = ["--data", str(out / "portfolio.csv"), "--schema", str(out / "schema.json"), "--history", str(out / "history.csv")]
    assert main(["optimize", "--config", str(cfg), *data]) == EXIT_OK
    for path in (out / "optimize").iterdir():
        assert (tmp_path / "out" / "optimize" / path.name).read_bytes() == path.read_bytes()


def test_fit_tables(pipeline):
    _, out, _ = pipeline
    for product in ("A", "B"):
        for model in MODELS.split(","):
            table = pd.read_csv(out / "fit" / product / f"{model}.csv", keep_default_na=False)
            assert list(table.columns) == ["component", "term", "estimate", "std_error", "p_value", "significance"]
            for component in ("frequency", "severity"):
                assert ((table["component"] == component) & (table["term"] == "dispersion")).sum() == 1
            assert set(table["significance"]) <= {"", "*", "**", "***"}
            text = (out / "fit" / product / f"{model}.txt").read_text()
            assert "dispersion" in text


@pytest.mark.parametrize("p, stars", [(0.04, "*"), (0.009, "**"), (0.0009, "***"), (0.2, ""), (0.05, ""), (math.nan, "")])
def test_star_thresholds(p, stars):
    assert _stars(p) == stars


def test_evaluate_tables(pipeline):
    _, out, _ = pipeline
    for product in ("A", "B"):
        full = pd.read_csv(out / "evaluate" / f"gini_{product}.csv")
        assert (full.loc[full["benchmark"] == full["alternative"], "gini"] == 0.0).all()
        names = list(dict.fromkeys(full["benchmark"]))
        G = full.pivot(index="benchmark", columns="alternative", values="gini").loc[names, names].to_numpy()
        ranks = pd.read_csv(out / "evaluate" / f"minimax_{product}.csv", keep_default_na=False)
        assert sorted(ranks["rank"]) == list(range(1, len(names) + 1))
        marked = ranks.index[ranks["minimax"] == "*"].tolist()
        assert marked == [minimax_select(G)]
        assert ranks.loc[marked[0], "rank"] == 1
    lr = pd.read_csv(out / "evaluate" / "lr_tests.csv")
    dof = {(r.null, r.alternative): r.dof for r in lr.itertuples() if r.product == "A"}
    assert dof == {
        ("GLM-PG", "GLM-PG-One"): 1,
        ("GLM-PG", "GAM-PG-One"): 3,
        ("GLM-PG-One", "GLM-PG-Multi"): 1,
        ("GAM-PG-One", "GAM-PG-Multi"): 3,
    }


def trivial_fixture(tmp_path, constant_covariate=False):
    rng = np.random.default_rng(0)
    n = 400
    y = rng.poisson(0.4, size=2 * n)
    rows = pd.DataFrame({
        "customer_id": [f"c{i}" for i in range(n)] * 2,
        "product": "A",
        "calendar_year": [2012] * n + [2013] * n,
        "exposure": 1.0,
        "claim_count": y,
        "claim_total": np.where(y > 0, 100.0 * y + 1.0, 0.0),
    })
    covariates = []
    if constant_covariate:
        rows["size"] = 1.0
        covariates = [{"name": "size", "kind": "continuous"}]
    rows.to_csv(tmp_path / "p.csv", index=False)
    (tmp_path / "s.json").write_text(json.dumps({"products": ["A"], "covariates": {"A": covariates}}))
    return ["--data", str(tmp_path / "p.csv"), "--schema", str(tmp_path / "s.json"), "--out", str(tmp_path / "out")], y[:n]


def test_intercept_only_poisson_estimate(tmp_path):
    args, train_y = trivial_fixture(tmp_path)
    assert main(["fit", *args, "--models", "GLM-PG"]) == EXIT_OK
    table = pd.read_csv(tmp_path / "out" / "fit" / "A" / "GLM-PG.csv")
    row = table[(table["component"] == "frequency") & (table["term"] == "(Intercept)")].iloc[0]
    assert row["estimate"] == pytest.approx(math.log(train_y.mean()), abs=1e-8)


def test_exit_codes(tmp_path, pipeline):
    _, out, _ = pipeline
    bad = tmp_path / "bad.csv"
    text = (out / "portfolio.csv").read_text().splitlines()
    fields = text[1].split(",")
    fields[3] = "0"
    bad.write_text("\n".join([text[0], ",".join(fields)]) + "\n")
    assert main(["fit", "--data", str(bad), "--schema", str(out / "schema.json"), "--out", str(tmp_path / "o1")]) == EXIT_VALIDATION
    data = ["--data", str(out / "portfolio.csv"), "--schema", str(out / "schema.json"), "--history", str(out / "history.csv")]
    assert main(["fit", *data, "--out", str(tmp_path / "o1"), "--models", "GLM-XX"]) == EXIT_VALIDATION

    (tmp_path / "rank").mkdir()
    args, _ = trivial_fixture(tmp_path / "rank", constant_covariate=True)
    assert main(["fit", *args, "--models", "GLM-PG"]) == EXIT_CONVERGENCE
    assert (tmp_path / "rank" / "out" / "fit" / "failures.csv").exists()

    cfg = write_config(tmp_path, grid={"s_values": [20], "min_exposure_share": 0.5})
    assert main(["optimize", "--config", str(cfg), *data]) == EXIT_INFEASIBLE
