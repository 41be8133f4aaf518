from __future__ import annotations

import math

import numpy as np
import pytest

from claimscore import families as fam
from claimscore.fitter import (
    ConvergenceError,
    Design,
    FitSettings,
    RankError,
    fisher_information,
    fit_pirls,
    penalized_loglik,
    predict_mean,
    score_vector,
    starting_values,
)
from claimscore.splines import SplineBasis, constrain


def glm_design(rng, n=400, p=5, family=None, scale=0.3):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    beta = rng.normal(scale=scale, size=p)
    beta[0] = -0.5
    mu = np.exp(X @ beta)
    family = family or fam.poisson()
    if family.kind is fam.FamilyKind.POISSON:
        y = rng.poisson(mu)
    elif family.kind is fam.FamilyKind.NEGATIVE_BINOMIAL:
        y = rng.poisson(rng.gamma(family.nb_size, 1 / family.nb_size, n) * mu)
    elif family.kind is fam.FamilyKind.GAMMA:
        y = rng.gamma(2.0, mu / 2.0)
    else:
        y = rng.wald(mu, 3.0)
    return Design(X, y, np.zeros(n), np.ones(n)), beta


def test_intercept_only_poisson_closed_form():
    d = Design(np.ones((3, 1)), [0, 1, 2], 0.0, 1.0)
    fit = fit_pirls(d, fam.poisson())
    assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-8)
    assert fit.dispersion == 1.0


def test_intercept_only_gamma_closed_form():
    d = Design(np.ones((2, 1)), [2.0, 4.0], 0.0, 1.0)
    fit = fit_pirls(d, fam.gamma())
    assert fit.coefficients[0] == pytest.approx(math.log(3.0), abs=1e-8)


def test_intercept_only_with_exposure_recovers_rate():
    rng = np.random.default_rng(5)
    e = rng.uniform(0.1, 1.0, 500)
    y = rng.poisson(0.2 * e)
    d = Design(np.ones((500, 1)), y, np.log(e), 1.0)
    fit = fit_pirls(d, fam.poisson())
    assert fit.coefficients[0] == pytest.approx(math.log(y.sum() / e.sum()), abs=1e-8)
    assert predict_mean(fit, np.ones(1)) == pytest.approx(y.sum() / e.sum(), rel=1e-8)


def test_doubling_exposure_keeps_rate_and_doubles_counts():
    rng = np.random.default_rng(6)
    e = rng.uniform(0.2, 1.0, 300)
    y = rng.poisson(0.3 * e)
    fit1 = fit_pirls(Design(np.ones((300, 1)), y, np.log(e), 1.0), fam.poisson())
    fit2 = fit_pirls(Design(np.ones((300, 1)), y, np.log(2 * e), 1.0), fam.poisson())
    assert fit2.coefficients[0] == pytest.approx(fit1.coefficients[0] - math.log(2.0), abs=1e-8)
    # the same rate applied to doubled exposure doubles the expected count
    assert predict_mean(fit1, np.ones(1), math.log(2.0)) == pytest.approx(2 * predict_mean(fit1, np.ones(1)), rel=1e-12)


def test_score_vector_zero_at_mle():
    d = Design(np.ones((4, 1)), [0, 3, 1, 2], 0.0, 1.0)
    delta = np.array([math.log(1.5)])
    assert np.max(np.abs(score_vector(delta, d, fam.poisson()))) < 1e-8


def test_score_vector_with_zero_weights_is_penalty_only():
    rng = np.random.default_rng(1)
    d = Design(rng.normal(size=(10, 3)), rng.poisson(1.0, 10), 0.0, 0.0)
    S = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 0.0]])
    delta = rng.normal(size=3)
    assert np.allclose(score_vector(delta, d, fam.poisson(), S), -S @ delta)


@pytest.mark.parametrize("family", [fam.poisson(), fam.negative_binomial(1.5), fam.gamma(), fam.inverse_gaussian()])
def test_score_vector_matches_finite_differences(family):
    rng = np.random.default_rng(2)
    d, _ = glm_design(rng, n=60, p=5, family=family)
    A = rng.normal(size=(5, 5))
    S = A @ A.T * 0.1
    h = 1e-5
    for _ in range(20):
        delta = rng.normal(scale=0.2, size=5)
        grad = score_vector(delta, d, family, S)
        fd = np.array([
            (penalized_loglik(delta + h * np.eye(5)[j], d, family, S) - penalized_loglik(delta - h * np.eye(5)[j], d, family, S)) / (2 * h)
            for j in range(5)
        ])
        assert np.max(np.abs(grad - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


def test_fisher_information_examples():
    d = Design(np.ones((1, 1)), [1], 0.0, 1.0)
    assert fisher_information(np.array([math.log(2.0)]), d, fam.poisson())[0, 0] == pytest.approx(2.0, rel=1e-15)
    rng = np.random.default_rng(4)
    d, _ = glm_design(rng, n=50, p=4)
    delta = rng.normal(scale=0.3, size=4)
    mu = np.exp(d.X @ delta)
    assert np.allclose(fisher_information(delta, d, fam.poisson()), d.X.T @ (d.X * mu[:, None]))


@pytest.mark.parametrize("seed", range(5))
def test_information_is_psd(seed):
    rng = np.random.default_rng(seed)
    d, _ = glm_design(rng, n=30, p=6, family=fam.gamma())
    info = fisher_information(rng.normal(size=6) * 0.1, d, fam.gamma())
    assert np.linalg.eigvalsh(info).min() >= -1e-10


def numerical_hessian(f, x, h=1e-4):
    p = x.size
    H = np.zeros((p, p))
    E = np.eye(p) * h
    for i in range(p):
        for j in range(p):
            H[i, j] = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4 * h * h)
    return H


def test_fisher_equals_observed_for_poisson():
    rng = np.random.default_rng(8)
    d, _ = glm_design(rng, n=80, p=4)
    fit = fit_pirls(d, fam.poisson())
    H = numerical_hessian(lambda b: penalized_loglik(b, d, fam.poisson()), fit.coefficients)
    I = fisher_information(fit.coefficients, d, fam.poisson())
    assert np.linalg.norm(I + H) / np.linalg.norm(I) < 1e-6


@pytest.mark.parametrize("family", [fam.negative_binomial(2.0), fam.gamma(), fam.inverse_gaussian()])
def test_fisher_matches_observed_at_convergence(family):
    # on a cell-means design the expected and observed information coincide at the MLE
    rng = np.random.default_rng(9)
    groups = rng.integers(0, 3, 300)
    X = np.column_stack([np.ones(300), groups == 1, groups == 2]).astype(float)
    mu = np.exp(X @ np.array([0.3, 0.4, -0.2]))
    y = rng.gamma(2.0, mu / 2.0) if not family.is_count else rng.poisson(mu)
    d = Design(X, y, 0.0, 1.0)
    fit = fit_pirls(d, family, FitSettings(profile_nb=False))
    H = numerical_hessian(lambda b: penalized_loglik(b, d, family), fit.coefficients)
    I = fisher_information(fit.coefficients, d, family)
    assert np.linalg.norm(I + H) / np.linalg.norm(I) < 1e-3


def test_starting_values():
    d = Design(np.ones((3, 2)) * [1, 0.5], [1.0, 1.0, 1.0], 0.0, 1.0)
    assert np.array_equal(starting_values(d, fam.gamma()), [0.0, 0.0])
    d = Design(np.ones((3, 1)), [0, 0, 0], 0.0, 1.0)
    assert starting_values(d, fam.poisson())[0] == pytest.approx(math.log(1e-6))


@pytest.mark.parametrize("seed", range(50))
def test_penalized_loglik_never_decreases(seed):
    rng = np.random.default_rng(100 + seed)
    family = [fam.poisson(), fam.negative_binomial(1.0), fam.gamma(), fam.inverse_gaussian()][seed % 4]
    d, _ = glm_design(rng, n=200, p=4, family=family, scale=0.6)
    basis = constrain(SplineBasis.clamped(3, 4, -3.0, 3.0), 0.0)
    x = np.clip(rng.normal(size=d.n), -3, 3)
    X = np.hstack([d.X, basis(x)])
    design = Design(X, d.y, 0.0, 1.0, penalties=[(slice(4, 7), basis.penalty())])
    fit = fit_pirls(design, family, FitSettings(penalties=rng.uniform(0, 2)))
    trace = np.asarray(fit.loglik_trace)
    assert np.all(np.diff(trace) >= 0.0)
    assert fit.gradient_norm < 1e-8


@pytest.mark.parametrize("family", [fam.poisson(), fam.negative_binomial(1.0), fam.gamma(), fam.inverse_gaussian()])
def test_refit_from_solution_is_immediate(family):
    rng = np.random.default_rng(12)
    d, _ = glm_design(rng, n=300, p=4, family=family)
    fit = fit_pirls(d, family)
    again = fit_pirls(d, fit.family, start=fit.coefficients)
    assert again.iterations <= 2
    assert np.max(np.abs(score_vector(fit.coefficients, d, fit.family))) < 1e-8


def test_row_permutation_invariance():
    rng = np.random.default_rng(13)
    d, _ = glm_design(rng, n=500, p=5)
    perm = rng.permutation(d.n)
    a = fit_pirls(d, fam.poisson()).coefficients
    b = fit_pirls(d.take(perm), fam.poisson()).coefficients
    assert np.max(np.abs(a - b)) < 1e-10


def test_rank_error_names_column():
    X = np.column_stack([np.ones(20), np.arange(20.0), 2 * np.arange(20.0)])
    d = Design(X, np.ones(20), 0.0, 1.0, ["(Intercept)", "a", "b"])
    with pytest.raises(RankError) as err:
        fit_pirls(d, fam.poisson())
    assert err.value.column == 2 and err.value.name == "b"
    with pytest.raises(RankError) as err:
        fit_pirls(Design(np.column_stack([np.ones(5), np.zeros(5)]), np.ones(5), 0.0, 1.0), fam.poisson())
    assert err.value.column == 1


def test_convergence_error_carries_iterate():
    rng = np.random.default_rng(14)
    d, _ = glm_design(rng, n=200, p=3)
    with pytest.raises(ConvergenceError) as err:
        fit_pirls(d, fam.poisson(), FitSettings(max_iterations=1))
    assert err.value.delta.shape == (3,)
    assert err.value.gradient_norm > 0


def test_negative_binomial_size_is_profiled():
    rng = np.random.default_rng(15)
    n = 20_000
    x = rng.normal(size=n)
    mu = np.exp(0.2 + 0.3 * x)
    y = rng.poisson(rng.gamma(2.0, 0.5, n) * mu)
    fit = fit_pirls(Design(np.column_stack([np.ones(n), x]), y, 0.0, 1.0), fam.negative_binomial())
    assert fit.family.nb_size == pytest.approx(2.0, rel=0.15)
    assert fit.coefficients == pytest.approx([0.2, 0.3], abs=0.05)


def test_gamma_standard_errors_use_dispersion():
    rng = np.random.default_rng(16)
    n = 5000
    x = rng.normal(size=n)
    y = rng.gamma(4.0, np.exp(1.0 + 0.5 * x) / 4.0)
    d = Design(np.column_stack([np.ones(n), x]), y, 0.0, 1.0)
    fit = fit_pirls(d, fam.gamma())
    assert fit.dispersion == pytest.approx(0.25, rel=0.1)
    unscaled = np.sqrt(np.diag(np.linalg.inv(fisher_information(fit.coefficients, d, fam.gamma()))))
    assert np.allclose(fit.std_errors, unscaled * math.sqrt(fit.dispersion))


def test_predict_mean_offset_and_shape():
    d = Design(np.ones((4, 1)), [1, 1, 1, 1], 0.0, 1.0)
    fit = fit_pirls(d, fam.poisson())
    assert predict_mean(fit, np.ones(1)) == pytest.approx(1.0)
    assert predict_mean(fit, np.ones(1), math.log(2.0)) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        predict_mean(fit, np.ones(2))
