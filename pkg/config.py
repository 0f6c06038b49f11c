"""
Run configuration for the command-line tool.

Values come from four layers, later ones winning:
built-in defaults < environment (CARDIAC_FCN_*) < config file < command-line flags.

Config files are flat `key = value` text with `#` comments. Keys are the flag
names with underscores (`max_iter = 300`, `structure = endo`); training keys
feed TrainConfig and phantom keys feed PhantomSpec.
"""

import logging
import os
from typing import Any, Dict, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, Extra, validator

from backend.data_pipeline.augmentation import PRESETS
from backend.data_pipeline.contours import STRUCTURES, num_classes_for
from backend.phantom.generator import PhantomSpec
from backend.training.trainer import TrainConfig

logger = logging.getLogger("cardiac_fcn.config")

COMMANDS = ("train", "finetune", "predict", "evaluate", "phantom")
ENV_PREFIX = "CARDIAC_FCN_"
ENV_KEYS = ("log_level", "workers", "arch")

# keys that live in the nested configs; `seed` is shared by all of them
TRAIN_KEYS = tuple(k for k in TrainConfig.__fields__ if k not in ("seed", "fine_tune", "num_classes"))
PHANTOM_KEYS = tuple(k for k in PhantomSpec.__fields__ if k != "seed")


class RunConfigError(ValueError):
    """Raised for unknown keys, unreadable config files and missing input paths."""


class RunConfig(BaseModel):
    command: str
    manifest: Optional[str] = None
    dev_manifest: Optional[str] = None
    arch: Optional[str] = None
    weights: Optional[str] = None
    source_weights: Optional[str] = None
    predictions: Optional[str] = None
    out: Optional[str] = None
    report: Optional[str] = None
    structure: str = "endo"
    preset: str = "none"
    seed: int = 0
    workers: Optional[int] = None
    k_classes: Optional[int] = None
    log_level: str = "INFO"
    train: TrainConfig = TrainConfig()
    phantom: PhantomSpec = PhantomSpec()

    class Config:
        extra = Extra.forbid

    @validator("command")
    def _known_command(cls, command):
        if command not in COMMANDS:
            raise ValueError(f"unknown command '{command}'")
        return command

    @validator("structure")
    def _known_structure(cls, structure):
        if structure not in STRUCTURES:
            raise ValueError(f"unknown structure '{structure}', expected one of {', '.join(STRUCTURES)}")
        return structure

    @validator("preset")
    def _known_preset(cls, preset):
        if preset not in PRESETS:
            raise ValueError(f"unknown preset '{preset}', expected one of {', '.join(PRESETS)}")
        return preset

    @validator("log_level")
    def _known_level(cls, level):
        level = level.upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f"unknown log level '{level}'")
        return level

    @validator("workers", "k_classes")
    def _positive(cls, value, field):
        if value is not None and value < 1:
            raise ValueError(f"{field.name} must be >= 1, got {value}")
        return value

    @property
    def num_classes(self) -> int:
        return self.k_classes or num_classes_for(self.structure)

    @property
    def report_path(self) -> Optional[str]:
        if self.report or not self.weights:
            return self.report
        return os.path.splitext(self.weights)[0] + "_report.csv"


def environment_defaults() -> Dict[str, str]:
    values = {}
    for key in ENV_KEYS:
        value = os.getenv(ENV_PREFIX + key.upper())
        if value:
            values[key] = value
    return values


def read_config_file(path: str) -> Dict[str, Optional[str]]:
    if not os.path.isfile(path):
        raise RunConfigError(f"config file not found: {path}")
    return {key.strip().lower(): value for key, value in dotenv_values(path).items()}


def build_run_config(command: str, config_path: Optional[str] = None,
                     flags: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge the configuration layers for `command` and validate the result."""
    merged: Dict[str, Any] = environment_defaults()
    if config_path:
        merged.update({k: v for k, v in read_config_file(config_path).items() if v not in (None, "")})
    merged.update({k: v for k, v in (flags or {}).items() if v is not None})

    train_values = {k: merged.pop(k) for k in TRAIN_KEYS if k in merged}
    phantom_values = {k: merged.pop(k) for k in PHANTOM_KEYS if k in merged}
    unknown = sorted(k for k in merged if k not in RunConfig.__fields__ or k in ("train", "phantom", "command"))
    if unknown:
        raise RunConfigError(f"unknown configuration key(s): {', '.join(unknown)}")

    run = RunConfig(command=command, **merged)
    return run.copy(update={
        "train": TrainConfig(seed=run.seed, num_classes=run.num_classes, fine_tune=command == "finetune",
                             **train_values),
        "phantom": PhantomSpec(seed=run.seed, **phantom_values),
    })


_REQUIRED = {
    "train": ("manifest", "weights"),
    "finetune": ("manifest", "weights", "source_weights"),
    "predict": ("manifest", "weights", "out"),
    "evaluate": ("manifest", "predictions", "out"),
    "phantom": ("out",),
}
_INPUTS = ("manifest", "dev_manifest", "arch", "source_weights", "predictions")


def check_paths(run: RunConfig) -> None:
    """Fail before any compute starts if a required option is unset or an input file is missing."""
    for name in _REQUIRED[run.command]:
        if not getattr(run, name):
            raise RunConfigError(f"'{run.command}' needs --{name.replace('_', '-')}")
    inputs = _INPUTS + (("weights",) if run.command in ("predict",) else ())
    for name in inputs:
        path = getattr(run, name)
        if path and not os.path.exists(path):
            raise RunConfigError(f"--{name.replace('_', '-')} not found: {path}")
