"""
Tests for environment settings, experiment config I/O and seed derivation.
"""

import pytest

from knnadapt.config import (
    Settings,
    default_config_text,
    derive_seed,
    dump_experiment_config,
    load_experiment_config,
    save_experiment_config,
)
from knnadapt.errors import ConfigError
from knnadapt.models import Baseline, ExperimentConfig


class TestSettings:
    """Environment-driven settings."""

    def test_env_overrides(self, monkeypatch, tmp_path):
        """KNNADAPT_* variables are picked up."""
        monkeypatch.setenv("KNNADAPT_WORKDIR", str(tmp_path))
        monkeypatch.setenv("KNNADAPT_LOG_LEVEL", "debug")
        monkeypatch.setenv("KNNADAPT_THREADS", "2")
        s = Settings()
        assert s.workdir == tmp_path
        assert s.log_level == "DEBUG"
        assert s.threads == 2

    def test_create_env_file(self, tmp_path):
        """config-init writes an example .env."""
        path = Settings().create_env_file(str(tmp_path / ".env.example"))
        text = path.read_text()
        assert "KNNADAPT_WORKDIR" in text
        assert "KNNADAPT_LOG_LEVEL" in text


class TestExperimentConfig:
    """TOML load/dump."""

    def test_packaged_default_loads(self, monkeypatch):
        """The packaged default.toml validates and matches the model defaults."""
        monkeypatch.setattr("knnadapt.config.settings.config_path", None)
        cfg = load_experiment_config()
        assert cfg == ExperimentConfig()
        assert "large:" in default_config_text()

    def test_round_trip(self, tmp_path):
        """A saved effective config reloads to an equal config."""
        cfg = ExperimentConfig.model_validate(
            {
                "experiment": {"seed": 3, "baselines": ["basic", "uda"]},
                "knn": {"lambda": 0.25, "domain_temperature": {"koran": 40.0}},
            }
        )
        path = save_experiment_config(cfg, tmp_path / "effective_config.toml")
        assert load_experiment_config(path) == cfg
        assert "lambda = 0.25" in dump_experiment_config(cfg)

    def test_missing_file(self, tmp_path):
        """A missing config path is a config error."""
        with pytest.raises(ConfigError, match="not found"):
            load_experiment_config(tmp_path / "nope.toml")

    def test_invalid_toml(self, tmp_path):
        """Malformed TOML is a config error."""
        path = tmp_path / "bad.toml"
        path.write_text("[knn\nk = 1\n")
        with pytest.raises(ConfigError, match="not valid TOML"):
            load_experiment_config(path)

    def test_unknown_key(self, tmp_path):
        """Unknown keys are rejected."""
        path = tmp_path / "typo.toml"
        path.write_text("[knn]\nneighbours = 8\n")
        with pytest.raises(ConfigError, match="invalid config"):
            load_experiment_config(path)

    def test_partial_config_fills_defaults(self, tmp_path):
        """Omitted sections fall back to defaults."""
        path = tmp_path / "partial.toml"
        path.write_text('[experiment]\nbaselines = ["basic"]\n')
        cfg = load_experiment_config(path)
        assert cfg.experiment.baselines == [Baseline.BASIC]
        assert cfg.knn.k == 16


class TestDeriveSeed:
    """Per-stage seeds."""

    def test_deterministic(self):
        """Same root and stage give the same seed."""
        assert derive_seed(13, "train/base") == derive_seed(13, "train/base")

    def test_stages_differ(self):
        """Different stages or roots give different seeds."""
        assert derive_seed(13, "train/base") != derive_seed(13, "train/reverse")
        assert derive_seed(13, "train/base") != derive_seed(14, "train/base")

    def test_range(self):
        """Seeds fit in 31 bits."""
        for stage in ("data/general", "domains", "index/medical/uda"):
            assert 0 <= derive_seed(13, stage) < 2**31
