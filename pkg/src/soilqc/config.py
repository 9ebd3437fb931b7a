"""Plain-text configuration: INI-style sections mapping onto module configs.

Sections [rules], [train], [synth], and [model] feed RuleConfig,
TrainConfig, SynthConfig, and the model dimensions respectively. Every key
is optional (module defaults apply); unknown sections or keys are rejected
with their location.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from soilqc.errors import ConfigError
from soilqc.rules import RuleConfig
from soilqc.synth import SynthConfig
from soilqc.training import TrainConfig


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(","))


_RULES_KEYS = {
    "lower_bound": float,
    "upper_bound": float,
    "freeze_temp": float,
    "rise_threshold": float,
    "precip_lookback": float,
    "constant_run_len": int,
    "sg_window": int,
    "sg_order": int,
    "spike_z": float,
    "break_z": float,
    "sigma_floor": float,
}

_TRAIN_KEYS = {
    "epochs": int,
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "epsilon": float,
    "anomaly_day_weight": float,
    "batch_size": int,
    "seed": int,
    "early_stop_patience": int,
}

_SYNTH_KEYS = {
    "n_sites": int,
    "days_per_site": int,
    "seed": int,
    "base_moisture": _float_tuple,
    "event_rate": float,
    "decay_halflife": float,
    "noise_sd": float,
    "anomaly_fraction": float,
    "anomaly_mix": _float_tuple,
    "gap_fraction": float,
    "constant_run_len": int,
    "high_anomaly_site_rate": float,
    "high_anomaly_fraction": _float_tuple,
    "start": str,
}

_MODEL_KEYS = {
    "embed_dim": int,
    "hidden_dim": int,
    "threshold": float,
}


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("embed_dim and hidden_dim must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class Config:
    rules: RuleConfig
    train: TrainConfig
    synth: SynthConfig
    model: ModelConfig


_SECTIONS = {
    "rules": (_RULES_KEYS, RuleConfig),
    "train": (_TRAIN_KEYS, TrainConfig),
    "synth": (_SYNTH_KEYS, SynthConfig),
    "model": (_MODEL_KEYS, ModelConfig),
}


def load_config(path: str | os.PathLike | None = None) -> Config:
    """Parse a config file; None gives all defaults."""
    parsed: dict[str, dict] = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc

        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            keys, _cls = _SECTIONS[section]
            for key, raw in parser.items(section):
                if key not in keys:
                    raise ConfigError(f"{path}: unknown key {section}.{key}")
                try:
                    parsed[section][key] = keys[key](raw)
                except ValueError as exc:
                    raise ConfigError(f"{path}: bad value for {section}.{key}: {raw!r}") from exc

    return Config(
        rules=RuleConfig(**parsed["rules"]),
        train=TrainConfig(**parsed["train"]),
        synth=SynthConfig(**parsed["synth"]),
        model=ModelConfig(**parsed["model"]),
    )
