"""Configuration models for fitting and experiments.

Hyperparameters and experiment grids are pydantic models so that JSON
configuration files are validated on load.
"""

from __future__ import annotations

import itertools
import logging
import math
import os

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Self

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from dp_cate.data_models import LearnerKind, SetupId
from dp_cate.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

WORKERS_ENV_VAR = "DP_CATE_WORKERS"

DEFAULT_DELTA = 1e-5
DEFAULT_RATIOS = (0.25, 0.25, 0.5)
DEFAULT_TRIM = (0.05, 0.95)
DEFAULT_TARGET_RANGE = (-15.0, 15.0)
DEFAULT_CORRELATION_SEED = 2022
RATIO_TOLERANCE = 1e-9

_NON_PRIVATE_ALIASES = {"inf", "infinity", "nonprivate", "non-private", "none"}


class BoostingParams(BaseModel):
    """Hyperparameters of the private additive booster.

    ``clip`` defaults to half the public target range when left unset.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    rounds: int = Field(default=50, ge=1)
    learning_rate: float = Field(default=0.1, gt=0.0, le=1.0)
    num_bins: int = Field(default=32, ge=2)
    clip: float | None = Field(default=None, gt=0.0)


# Experiment default: eight bins and short shrunken steps keep the accumulated
# noise of a private fit small next to the sampling error.
DESK_HYPER = BoostingParams(rounds=8, learning_rate=0.2, num_bins=8, clip=3.0)


@dataclass(frozen=True, order=True)
class Cell:
    """One experiment cell: a (setup, learner, n, epsilon, rep) coordinate."""

    setup: SetupId
    learner: LearnerKind
    n: int
    epsilon: float
    rep: int

    @property
    def private(self) -> bool:
        return math.isfinite(self.epsilon)


class ExperimentConfig(BaseModel):
    """Grid and protocol settings of a bias/variance experiment.

    ``epsilons`` may contain ``inf`` (or the string ``"nonprivate"`` in a
    JSON file) for a non-private reference run.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    setups: tuple[SetupId, ...] = (SetupId.A, SetupId.B, SetupId.C)
    learners: tuple[LearnerKind, ...] = (LearnerKind.DR, LearnerKind.R, LearnerKind.S)
    sample_sizes: tuple[int, ...] = (500, 2000, 8000)
    epsilons: tuple[float, ...] = (1.0, 4.0, 16.0)
    delta: float = Field(default=DEFAULT_DELTA, gt=0.0, lt=1.0)
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    reps: int = Field(default=5, ge=1)
    test_size: int = Field(default=50_000, ge=1)
    seed: int = Field(default=20_240_501, ge=0)
    correlation_seed: int = Field(default=DEFAULT_CORRELATION_SEED, ge=0)
    trim: tuple[float, float] = DEFAULT_TRIM
    target_range: tuple[float, float] = DEFAULT_TARGET_RANGE
    identical_training: bool = False
    workers: int | None = Field(default=None, ge=1)
    hyper: BoostingParams = DESK_HYPER

    @field_validator("setups", "learners", mode="before")
    @classmethod
    def _upper_case_codes(cls, value: Any) -> Any:
        if isinstance(value, list | tuple):
            return tuple(
                item.upper() if isinstance(item, str) else item for item in value
            )
        return value

    @field_validator("epsilons", mode="before")
    @classmethod
    def _parse_epsilons(cls, value: Any) -> Any:
        if isinstance(value, list | tuple):
            return tuple(
                math.inf
                if item is None
                or (isinstance(item, str) and item.lower() in _NON_PRIVATE_ALIASES)
                else item
                for item in value
            )
        return value

    @field_validator("epsilons")
    @classmethod
    def _check_epsilons(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        for epsilon in value:
            if math.isnan(epsilon) or epsilon <= 0:
                raise ValueError(f"epsilon must be positive, got {epsilon}")
        return value

    @field_validator("sample_sizes")
    @classmethod
    def _check_sizes(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(size < 1 for size in value):
            raise ValueError("sample sizes must be positive")
        return value

    @field_validator("ratios")
    @classmethod
    def _check_ratios(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if len(value) != 3 or any(ratio <= 0 for ratio in value):  # noqa: PLR2004
            raise ValueError("ratios must be three positive fractions")
        if abs(sum(value) - 1.0) > RATIO_TOLERANCE:
            raise ValueError(f"ratios must sum to 1, got {sum(value)}")
        return value

    @model_validator(mode="after")
    def _check_ranges(self) -> Self:
        low, high = self.trim
        if not 0.0 < low < high < 1.0:
            raise ValueError(f"trim bounds must satisfy 0 < lo < hi < 1, got {self.trim}")
        if not self.target_range[0] < self.target_range[1]:
            raise ValueError("target_range must be increasing")
        return self

    @classmethod
    def desk_grid(cls) -> ExperimentConfig:
        return cls()

    @classmethod
    def full_grid(cls) -> ExperimentConfig:
        """Every setup over seven sample sizes and five budgets (hours of compute)."""
        return cls(
            setups=tuple(SetupId),
            learners=(LearnerKind.DR, LearnerKind.R, LearnerKind.S),
            sample_sizes=(500, 1000, 2000, 4000, 8000, 16000, 32000),
            epsilons=(1.0, 2.0, 4.0, 8.0, 16.0),
            reps=5,
            test_size=250_000,
        )

    @classmethod
    def from_file(cls, path: Path) -> ExperimentConfig:
        """Load and validate a JSON configuration file.

        Raises:
            ConfigurationError: If the file is missing, not JSON, or invalid.
        """
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as error:
            raise ConfigurationError(f"cannot read config {path}: {error}") from error
        try:
            return cls.model_validate_json(text)
        except ValidationError as error:
            invalid = [
                item for item in error.errors() if item["type"] == "json_invalid"
            ]
            if invalid:
                raise ConfigurationError(
                    f"config {path} is not valid JSON: {invalid[0]['msg']}"
                ) from error
            raise ConfigurationError(f"invalid config {path}:\n{error}") from error

    def cells(self) -> list[Cell]:
        """All cells in canonical order."""
        return [
            Cell(setup, learner, n, epsilon, rep)
            for setup, learner, n, epsilon, rep in itertools.product(
                self.setups,
                self.learners,
                self.sample_sizes,
                self.epsilons,
                range(self.reps),
            )
        ]


def resolve_workers(config: ExperimentConfig, override: int | None = None) -> int:
    """Worker count: explicit override, then ``DP_CATE_WORKERS``, then config."""
    if override is not None:
        if override < 1:
            raise ConfigurationError(f"worker count must be positive, got {override}")
        return override
    raw = os.environ.get(WORKERS_ENV_VAR)
    if raw:
        try:
            workers = int(raw)
        except ValueError as error:
            raise ConfigurationError(
                f"{WORKERS_ENV_VAR} must be an integer, got {raw!r}"
            ) from error
        if workers < 1:
            raise ConfigurationError(f"{WORKERS_ENV_VAR} must be positive, got {raw}")
        return workers
    if config.workers is not None:
        return config.workers
    return os.cpu_count() or 1
