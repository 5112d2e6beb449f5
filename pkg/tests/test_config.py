"""Tests for hyperparameters, experiment grids and worker resolution."""

import json
import math

import pytest

from pydantic import ValidationError

from dp_cate.config import (
    DESK_HYPER,
    WORKERS_ENV_VAR,
    BoostingParams,
    Cell,
    ExperimentConfig,
    resolve_workers,
)
from dp_cate.data_models import LearnerKind, SetupId
from dp_cate.exceptions import ConfigurationError


@pytest.mark.unit
class TestBoostingParams:
    def test_defaults(self):
        params = BoostingParams()
        assert (params.rounds, params.learning_rate, params.num_bins) == (50, 0.1, 32)
        assert params.clip is None

    @pytest.mark.parametrize(
        "values",
        [
            {"rounds": 0},
            {"learning_rate": 0.0},
            {"learning_rate": 1.5},
            {"num_bins": 1},
            {"clip": -1.0},
            {"depth": 3},
        ],
    )
    def test_rejects_invalid_values(self, values):
        with pytest.raises(ValidationError):
            BoostingParams(**values)

    def test_is_frozen(self):
        with pytest.raises(ValidationError):
            DESK_HYPER.rounds = 10


@pytest.mark.unit
class TestExperimentConfig:
    def test_desk_grid(self):
        config = ExperimentConfig.desk_grid()
        assert config.setups == (SetupId.A, SetupId.B, SetupId.C)
        assert config.sample_sizes == (500, 2000, 8000)
        assert config.epsilons == (1.0, 4.0, 16.0)
        assert config.hyper == DESK_HYPER
        assert len(config.cells()) == 3 * 3 * 3 * 3 * 5

    def test_full_grid(self):
        config = ExperimentConfig.full_grid()
        assert config.setups == tuple(SetupId)
        assert len(config.sample_sizes) == 7
        assert config.epsilons == (1.0, 2.0, 4.0, 8.0, 16.0)

    def test_cells_are_in_canonical_order(self, tiny_config):
        cells = tiny_config.cells()
        assert cells == [
            Cell(SetupId.C, LearnerKind.S, 200, 4.0, 0),
            Cell(SetupId.C, LearnerKind.S, 200, math.inf, 0),
        ]
        assert cells[0].private
        assert not cells[1].private

    @pytest.mark.parametrize("alias", ["inf", "nonprivate", "Non-Private", None])
    def test_non_private_aliases(self, alias):
        config = ExperimentConfig(epsilons=[1.0, alias])
        assert config.epsilons == (1.0, math.inf)

    def test_lower_case_codes(self):
        config = ExperimentConfig(setups=["a", "e"], learners=["dr", "s"])
        assert config.setups == (SetupId.A, SetupId.E)
        assert config.learners == (LearnerKind.DR, LearnerKind.S)

    @pytest.mark.parametrize(
        "values",
        [
            {"epsilons": [0.0]},
            {"epsilons": [-1.0]},
            {"sample_sizes": [0]},
            {"ratios": [0.5, 0.5]},
            {"ratios": [0.5, 0.3, 0.3]},
            {"trim": [0.0, 0.9]},
            {"trim": [0.6, 0.4]},
            {"target_range": [1.0, -1.0]},
            {"delta": 0.0},
            {"reps": 0},
            {"setups": ["Z"]},
            {"unknown": 1},
        ],
    )
    def test_rejects_invalid_values(self, values):
        with pytest.raises(ValidationError):
            ExperimentConfig(**values)


@pytest.mark.unit
class TestConfigFile:
    def test_loads_json(self, tmp_path):
        path = tmp_path / "grid.json"
        path.write_text(
            json.dumps(
                {
                    "setups": ["B"],
                    "learners": ["R"],
                    "sample_sizes": [300],
                    "epsilons": [2.0, "nonprivate"],
                    "reps": 2,
                    "hyper": {"rounds": 3, "learning_rate": 0.5, "num_bins": 8},
                }
            ),
            encoding="utf-8",
        )
        config = ExperimentConfig.from_file(path)
        assert config.setups == (SetupId.B,)
        assert config.epsilons == (2.0, math.inf)
        assert config.hyper.rounds == 3
        assert len(config.cells()) == 4

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="cannot read"):
            ExperimentConfig.from_file(tmp_path / "absent.json")

    @pytest.mark.parametrize("text", ["{not json", '{"reps": 3', ""])
    def test_malformed_json(self, tmp_path, text):
        path = tmp_path / "grid.json"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ConfigurationError, match="not valid JSON") as caught:
            ExperimentConfig.from_file(path)
        assert isinstance(caught.value.__cause__, ValidationError)

    @pytest.mark.parametrize("text", ['{"reps": 0}', "[1, 2]", '{"colour": "red"}'])
    def test_invalid_values(self, tmp_path, text):
        path = tmp_path / "grid.json"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ConfigurationError, match="invalid config"):
            ExperimentConfig.from_file(path)


@pytest.mark.unit
class TestResolveWorkers:
    def test_override_wins(self, monkeypatch, tiny_config):
        monkeypatch.setenv(WORKERS_ENV_VAR, "3")
        assert resolve_workers(tiny_config, 2) == 2

    def test_environment_beats_config(self, monkeypatch, tiny_config):
        monkeypatch.setenv(WORKERS_ENV_VAR, "3")
        assert resolve_workers(tiny_config) == 3

    def test_config_value(self, monkeypatch, tiny_config):
        monkeypatch.delenv(WORKERS_ENV_VAR, raising=False)
        assert resolve_workers(tiny_config) == 1

    def test_defaults_to_cpu_count(self, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV_VAR, raising=False)
        monkeypatch.setattr("os.cpu_count", lambda: 6)
        assert resolve_workers(ExperimentConfig()) == 6

    @pytest.mark.parametrize("raw", ["zero", "0"])
    def test_rejects_bad_environment(self, monkeypatch, tiny_config, raw):
        monkeypatch.setenv(WORKERS_ENV_VAR, raw)
        with pytest.raises(ConfigurationError):
            resolve_workers(tiny_config)

    def test_rejects_bad_override(self, tiny_config):
        with pytest.raises(ConfigurationError):
            resolve_workers(tiny_config, 0)
