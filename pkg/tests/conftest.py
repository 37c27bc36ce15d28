"""Shared fixtures: tiny hand-built data and a cached short fit of the standard fixture."""

from __future__ import annotations

import numpy as np
import pytest

from healthtrends.geo_data import GeoHierarchy
from healthtrends.model import N_DESIGN, FitData, HyperParams, ParamState
from healthtrends.sampler import SamplerConfig, run_chains
from healthtrends.validation import SyntheticSpec, simulate_dataset

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


def one_row_data(y=130.0, s=10.0, n=25, z=50.0, cls=0, year=2000, window=(1999, 2001)):
    """One country, one study, one age row."""
    h = GeoHierarchy(np.array([0]), np.array([0]))
    return FitData(
        hierarchy=h,
        window=window,
        study_ids=("s0",),
        study_country=[0],
        study_t=[year - window[0]],
        study_class=[cls],
        X=np.zeros((1, N_DESIGN)),
        row_study=[0],
        y=[y],
        samp_var=[s * s / n],
        z=[z],
    )


def simple_hypers(**overrides) -> HyperParams:
    base = dict(
        kappa_a=[4.0, 9.0, 16.0],
        kappa_b=[0.01, 0.02, 0.03],
        lam=[50.0, 100.0, 100.0, 100.0],
        nu=[1.0, 2.0, 4.0, 8.0],
        tau2=[1.0, 2.0, 4.0, 8.0],
        sigma2=[1e-3, 1e-5, 1e-7, 1e-8, 1e-8],
    )
    base.update(overrides)
    return HyperParams(**base)


@pytest.fixture(scope="session")
def fixture_dataset():
    """The standard synthetic fixture (J=12, K=4, L=2, T=10, 200 studies)."""
    return simulate_dataset(SyntheticSpec(seed=1))


@pytest.fixture(scope="session")
def fixture_fit(fixture_dataset):
    """A moderate two-chain fit shared by the statistical tests."""
    cfg = SamplerConfig(n_chains=2, n_burnin=400, n_iter=800, rng_seed=5)
    return run_chains(fixture_dataset.data, cfg)


@pytest.fixture
def zero_state():
    return ParamState.zeros(1, 1, 1, 3, 1)
