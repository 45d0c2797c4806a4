"""Flat key = value run configuration: defaults < config file < command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from pathlib import Path

from .lexnoise import CorruptionConfig
from .netcore import LossWeights, ModelConfig
from .trainkit import TrainConfig


class ConfigError(ValueError):
    pass


_MODEL_KEYS = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.default for f in dataclasses.fields(TrainConfig)
               if f.name not in ("loss_weights", "schedule")}
_LOSS_KEYS = {f"lambda_{f.name}": f.default for f in dataclasses.fields(LossWeights)}

DEFAULTS: dict = {
    **_MODEL_KEYS,
    **_TRAIN_KEYS,
    **_LOSS_KEYS,
    "schedule": "",  # "epoch:mult,epoch:mult"; empty -> default step decay
    # data generation
    "words": "",
    "digit_words": 300,  # random digit strings appended to the bundled list
    "fraction": 1.0,
    "samples_per_word": 50,
    "test_invoc": 0,
    "test_outvoc": 0,
    "test_samples_per_word": 2,
    "base_size": 0,
    "min_len": 2,
    "max_len": 10,
    # similarity + corruption
    "k": 3.0,
    "p_replace": CorruptionConfig.p_replace,
    "p_insert": CorruptionConfig.p_insert,
    "p_delete": CorruptionConfig.p_delete,
    "pairs_per_word": 10,
    # evaluation
    "topk": "1,3,5",
}


def _coerce(key: str, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        v = value.strip()
        try:
            if isinstance(default, bool):
                if v.lower() in ("1", "true", "yes", "on"):
                    return True
                if v.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError
            if isinstance(default, int):
                return int(v)
            if isinstance(default, float):
                return float(v)
            if isinstance(default, tuple):
                return tuple(int(x) for x in v.replace(",", " ").split())
            if default is None:
                return None if v.lower() in ("", "none") else v
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


class RunConfig:
    """Resolved configuration; unknown keys are rejected at every layer."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: dict) -> "RunConfig":
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, value, DEFAULTS[key])
        return self

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def resolve(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls()
        if path:
            cfg.update(read_config_file(path))
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None})
        return cfg

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(**{k: self.values[k] for k in _MODEL_KEYS})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        kw = {k: self.values[k] for k in _TRAIN_KEYS}
        try:
            kw["loss_weights"] = LossWeights(**{k[len("lambda_"):]: float(self.values[k])
                                                for k in _LOSS_KEYS})
            kw["schedule"] = parse_schedule(self.values["schedule"])
            return TrainConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def corruption_config(self) -> CorruptionConfig:
        try:
            return CorruptionConfig(self["p_replace"], self["p_insert"], self["p_delete"],
                                    self["seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def topk(self) -> tuple[int, ...]:
        try:
            ks = tuple(int(x) for x in str(self["topk"]).split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"bad topk {self['topk']!r}") from None
        if not ks or min(ks) < 1:
            raise ConfigError("topk values must be >= 1")
        return ks

    def to_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{key} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def write_echo(self, run_dir) -> Path:
        path = Path(run_dir) / "config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def parse_schedule(text) -> dict | None:
    if isinstance(text, dict):
        return text
    if not text or not str(text).strip():
        return None
    out = {}
    for item in str(text).split(","):
        epoch, _, mult = item.partition(":")
        out[int(epoch)] = float(mult)
    return out


def read_config_file(path) -> dict:
    values = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def run_root(default: str = "runs") -> Path:
    return Path(os.environ.get("VSDN_RUN_DIR", default))

