"""Shared fixtures for the dp_cate test suite."""

import numpy as np
import pytest

from dp_cate.accountant import PrivacyBudget
from dp_cate.config import BoostingParams, ExperimentConfig
from dp_cate.data_models import FeatureSpec, LearnerKind, SetupId
from dp_cate.synthdata import SimulatedData, generate, get_setup


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def small_hyper() -> BoostingParams:
    """Few rounds and bins so learner tests stay fast."""
    return BoostingParams(rounds=2, learning_rate=0.5, num_bins=8, clip=3.0)


@pytest.fixture
def unit_spec() -> FeatureSpec:
    return FeatureSpec(0.0, 1.0, 32)


@pytest.fixture(scope="session")
def budget_eps4() -> PrivacyBudget:
    return PrivacyBudget.from_eps_delta(4.0, 1e-5)


@pytest.fixture
def setup_b_data() -> SimulatedData:
    return generate(get_setup(SetupId.B), 2000, seed=7)


@pytest.fixture
def setup_c_data() -> SimulatedData:
    return generate(get_setup(SetupId.C), 2000, seed=11)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """A two-cell grid small enough for unit tests."""
    return ExperimentConfig(
        setups=(SetupId.C,),
        learners=(LearnerKind.S,),
        sample_sizes=(200,),
        epsilons=(4.0, float("inf")),
        reps=1,
        test_size=500,
        workers=1,
        hyper=BoostingParams(rounds=2, learning_rate=0.5, num_bins=8, clip=3.0),
    )
