from __future__ import annotations

import pytest

from claimscore.portfolio import ProductSimulation, SimulationConfig, simulate

FOUR = (
    ProductSimulation("A", 0.7, -1.6),
    ProductSimulation("B", 0.5, -2.0, severity_family="inverse_gaussian"),
    ProductSimulation("C", 0.4, -1.8),
    ProductSimulation("D", 0.35, -2.1),
)


@pytest.fixture(scope="session")
def four_products():
    """A small frailty portfolio with pre-sample history, shared across tests."""
    config = SimulationConfig(seed=7, num_customers=1500, products=FOUR, num_years=4, frailty_variance=0.6, history_years=2)
    return simulate(config)
