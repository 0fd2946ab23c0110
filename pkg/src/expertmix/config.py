"""Flat key-value experiment configuration with command-line overrides.

Files hold one `key = value` per line; '#' starts a comment. Every sampler in
the pipeline draws from the single root `seed` through named sub-seeds
(ge, user.<id>.data, user.<id>.le, user.<id>.gn, ...), so one seed pins the
whole experiment.
"""

from __future__ import annotations

from pathlib import Path

from .data import subseed
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": "7",
    "classes": "10",
    "users": "3",
    # corpus paths (required by commands that read data)
    "data.train_images": "",
    "data.train_labels": "",
    "data.test_images": "",
    "data.test_labels": "",
    # slice of the balanced training set held out as source material for users
    "data.user_pool_fraction": "0.25",
    # global expert training
    "ge.learning_rate": "0.02",
    "ge.momentum": "0.9",
    "ge.batch_size": "32",
    "ge.epochs": "10",
    "ge.validation_fraction": "0.1",
    "ge.patience": "3",
    # per-user data shape
    "user.train_per_class": "30",
    "user.test_per_class": "10",
    # local expert and gating head
    "le.n": "3",
    "gn.m": "3",
    "head.learning_rate": "0.05",
    "head.momentum": "0.9",
    "head.batch_size": "32",
    "head.epochs": "60",
    "head.validation_fraction": "0.1",
    "head.patience": "10",
    # sweep
    "sweep.candidates": "12,6,4,3,2,1",
    "sweep.tolerance": "1.0",
    # cost model (relative energies)
    "cost.energy_per_mac": "1.0",
    "cost.energy_per_sram": "6.0",
    "cost.energy_per_dram": "200.0",
    "cost.sram_model": "weights_plus_activations",
    "cost.dram_model": "weights_only",
}


def parse_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class ExperimentConfig:
    def __init__(self, values: dict[str, str]):
        self.values = dict(DEFAULTS)
        self.values.update(values)

    @staticmethod
    def load(path, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        cfg = ExperimentConfig(parse_config_file(path))
        for key, value in (overrides or {}).items():
            if value is not None:
                cfg.values[key] = str(value)
        return cfg

    def get_str(self, key: str) -> str:
        if key not in self.values:
            raise ConfigError(f"missing config key '{key}'")
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.get_str(key))
        except ValueError as exc:
            raise ConfigError(f"config key '{key}' is not an integer: {self.values[key]!r}") from exc

    def get_float(self, key: str) -> float:
        try:
            return float(self.get_str(key))
        except ValueError as exc:
            raise ConfigError(f"config key '{key}' is not a number: {self.values[key]!r}") from exc

    def get_int_list(self, key: str) -> list[int]:
        raw = self.get_str(key)
        try:
            return [int(tok) for tok in raw.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError(f"config key '{key}' is not a comma-separated int list: {raw!r}") from exc

    @property
    def seed(self) -> int:
        return self.get_int("seed")

    def sub(self, name: str) -> int:
        return subseed(self.seed, name)

    def train_config(self, prefix: str, seed_name: str) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.get_float(f"{prefix}.learning_rate"),
            momentum=self.get_float(f"{prefix}.momentum"),
            batch_size=self.get_int(f"{prefix}.batch_size"),
            epochs=self.get_int(f"{prefix}.epochs"),
            validation_fraction=self.get_float(f"{prefix}.validation_fraction"),
            seed=self.sub(seed_name),
            early_stop_patience=self.get_int(f"{prefix}.patience"),
        )
