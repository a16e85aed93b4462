import numpy as np
import pytest

from superbm import (AtomicMeasure, SimParams, TimeGrid, gaussian_bump, replicate_rng,
                     simulate)


@pytest.fixture(scope="session")
def smoke_grid():
    return TimeGrid.from_step(0.5, 0.01)


@pytest.fixture(scope="session")
def smoke_params(smoke_grid):
    return SimParams(n_quantum=100, dim=1, grid=smoke_grid, seed=314)


@pytest.fixture(scope="session")
def dirac0():
    return AtomicMeasure.dirac([0.0], 1.0)


@pytest.fixture(scope="session")
def smoke_path(smoke_params, dirac0):
    return simulate(dirac0, smoke_params, rng=replicate_rng(314, 0))


@pytest.fixture(scope="session")
def smoke_paths(smoke_params, dirac0):
    """A small ensemble with full recording, shared across test modules."""
    return [simulate(dirac0, smoke_params, rng=replicate_rng(314, i)) for i in range(24)]


@pytest.fixture(scope="session")
def medium_paths(dirac0):
    """Finer ensemble for statistical identities (N=250, K=200)."""
    grid = TimeGrid.from_step(0.5, 0.0025)
    params = SimParams(n_quantum=250, dim=1, grid=grid, seed=2718)
    return [simulate(dirac0, params, rng=replicate_rng(2718, i)) for i in range(64)]


@pytest.fixture(scope="session")
def wide_h():
    return gaussian_bump([0.0], 1.0, 1.0)
