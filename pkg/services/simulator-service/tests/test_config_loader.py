"""Tests for config_loader.py"""

from pathlib import Path

import pytest

from app.core.config_loader import build_config, load_experiment_config, parse_value, with_overrides
from app.models import ArrivalMode, ConfigError, PolicyKind

EXPERIMENTS_DIR = Path(__file__).resolve().parent.parent / "data" / "experiments"


class TestParseValue:
    def test_yaml_scalars(self):
        assert parse_value("1.05") == 1.05
        assert parse_value("16") == 16
        assert parse_value("true") is True
        assert parse_value("clipper_light") == "clipper_light"


class TestLoadExperimentConfig:
    """Test loading checked-in and temporary experiment files."""

    @pytest.mark.parametrize("name", ["cascade1", "cascade2", "cascade3", "cascade1_static_peak"])
    def test_checked_in_configs(self, name):
        config = load_experiment_config(EXPERIMENTS_DIR / f"{name}.yaml")
        assert config.profiles_path.is_file()
        assert config.trace_path.is_file()
        assert config.overprovision_lambda == 1.05

    def test_relative_paths_resolve_against_file(self, tmp_path, profiles_path):
        (tmp_path / "traces").mkdir()
        (tmp_path / "traces" / "t.txt").write_text("4\n")
        path = tmp_path / "exp.yaml"
        path.write_text(f"trace_path: traces/t.txt\nprofiles_path: {profiles_path}\n")
        config = load_experiment_config(path)
        assert config.trace_path == tmp_path.resolve() / "traces" / "t.txt"
        assert config.name == "exp"

    def test_defaults(self):
        config = load_experiment_config(EXPERIMENTS_DIR / "cascade1_static_peak.yaml")
        assert config.control_interval_seconds == 10.0
        assert config.ewma_alpha == 0.3
        assert config.threshold_step == 0.01
        assert config.arrival_mode == ArrivalMode.UNIFORM

    def test_overrides(self):
        config = load_experiment_config(
            EXPERIMENTS_DIR / "cascade1.yaml",
            {"seed": 7, "policy": "clipper_heavy", "policy_params.random_split": 0.25},
        )
        assert config.seed == 7
        assert config.policy == PolicyKind.CLIPPER_HEAVY
        assert config.policy_params.random_split == 0.25

    def test_unknown_key_names_field(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text("trace_path: t.txt\nservres: 4\n")
        with pytest.raises(ConfigError) as excinfo:
            load_experiment_config(path, check_files=False)
        assert excinfo.value.field == "servres"

    def test_invalid_value_names_field(self):
        with pytest.raises(ConfigError) as excinfo:
            load_experiment_config(EXPERIMENTS_DIR / "cascade1.yaml", {"overprovision_lambda": 0.5})
        assert excinfo.value.field == "overprovision_lambda"

    def test_missing_trace_file(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text("trace_path: missing.txt\n")
        with pytest.raises(ConfigError, match="Trace file not found") as excinfo:
            load_experiment_config(path)
        assert excinfo.value.field == "trace_path"

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_experiment_config(tmp_path / "nope.yaml")

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    def test_scaling_targets_set_together(self, tmp_path):
        with pytest.raises(ConfigError):
            build_config({"trace_path": "t.txt", "trace_min_qps": 4}, check_files=False)


class TestWithOverrides:
    def test_copy_is_revalidated(self, make_config):
        config = make_config()
        changed = with_overrides(config, {"servers": 4})
        assert changed.servers == 4
        assert config.servers == 16
        with pytest.raises(ConfigError):
            with_overrides(config, {"servers": 0})
