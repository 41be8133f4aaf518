"""Claim-score experience rating for multi-product insurance portfolios."""

from .claim_score import ClaimScoreConfig, score_panel, step, trajectory
from .families import Family, gamma, inverse_gaussian, negative_binomial, poisson
from .fitter import ConvergenceError, FitSettings, FittedModel, RankError, fit_pirls
from .gini import minimax_select, ratio_gini
from .model import ModelSpec, ScoreEffect, Structure, build_design, compute_scores, fit_model, lr_test
from .optimizer import GridSpec, enumerate_grid, optimize_claim_score
from .portfolio import Portfolio, Schema, SimulationConfig, load_csv, simulate

__all__ = [
    "ClaimScoreConfig",
    "ConvergenceError",
    "Family",
    "FitSettings",
    "FittedModel",
    "GridSpec",
    "ModelSpec",
    "Portfolio",
    "RankError",
    "Schema",
    "ScoreEffect",
    "SimulationConfig",
    "Structure",
    "build_design",
    "compute_scores",
    "enumerate_grid",
    "fit_model",
    "fit_pirls",
    "gamma",
    "inverse_gaussian",
    "load_csv",
    "lr_test",
    "minimax_select",
    "negative_binomial",
    "optimize_claim_score",
    "poisson",
    "ratio_gini",
    "score_panel",
    "simulate",
    "step",
    "trajectory",
]
