"""
Configuration management for knnadapt.

Two layers: process settings from environment variables (and a .env file),
and the TOML experiment config that pins every hyper-parameter of a run.
"""

import hashlib
import os
import tomllib
from importlib import resources
from pathlib import Path

import tomli_w
import torch
from dotenv import load_dotenv
from pydantic import ValidationError

from .errors import ConfigError
from .models import ExperimentConfig

# Load environment variables from .env file
load_dotenv()


class Settings:
    """Process-level settings for the knnadapt CLI."""

    def __init__(self):
        # Artifact root used when neither --out nor [paths].workdir is given
        self.workdir = Path(os.getenv("KNNADAPT_WORKDIR", "runs/default"))

        # Experiment config used when --config is omitted
        config_path = os.getenv("KNNADAPT_CONFIG")
        self.config_path = Path(config_path) if config_path else None

        self.log_level = os.getenv("KNNADAPT_LOG_LEVEL", "INFO").upper()
        self.debug = os.getenv("KNNADAPT_DEBUG", "false").lower() == "true"

        # torch intra-op threads; 1 keeps float reductions reproducible
        self.threads = int(os.getenv("KNNADAPT_THREADS", "1"))

    def get_env_example(self) -> str:
        """Return example .env file content."""
        return """# knnadapt configuration

# Artifact root for gen-data/train/build/evaluate outputs
KNNADAPT_WORKDIR=runs/default

# Experiment config (TOML); defaults to the packaged default.toml
# KNNADAPT_CONFIG=configs/default.toml

# Logging (JSON lines on stderr)
KNNADAPT_LOG_LEVEL=INFO
KNNADAPT_DEBUG=false

# torch intra-op threads
KNNADAPT_THREADS=1
"""

    def create_env_file(self, path: str | None = None) -> Path:
        """Create example .env file."""
        env_path = Path(path or ".env.example")
        env_path.write_text(self.get_env_example())
        return env_path


# Global settings instance
settings = Settings()


def default_config_text() -> str:
    return resources.files("knnadapt").joinpath("default.toml").read_text("utf-8")


def load_experiment_config(path: str | Path | None = None) -> ExperimentConfig:
    """Load and validate an experiment config; ``None`` means the packaged default."""
    if path is None:
        path = settings.config_path
    try:
        if path is None:
            data = tomllib.loads(default_config_text())
        else:
            with open(path, "rb") as f:
                data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config file {path} is not valid TOML: {e}")

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path or 'default.toml'}:\n{e}")


def dump_experiment_config(cfg: ExperimentConfig) -> str:
    data = cfg.model_dump(mode="json", by_alias=True, exclude_none=True)
    return tomli_w.dumps(data)


def save_experiment_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_experiment_config(cfg), encoding="utf-8")
    return path


def derive_seed(root_seed: int, stage: str) -> int:
    """Seed for one named stage: blake2b("<root>/<stage>"), first 8 bytes LE, mod 2**31."""
    digest = hashlib.blake2b(f"{root_seed}/{stage}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % 2**31


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, settings.threads))
