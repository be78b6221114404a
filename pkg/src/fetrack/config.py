"""``key = value`` run configuration shared by every CLI command.

Keys are grouped by prefix: ``model.*``, ``train.*``, ``synth.*``,
``track.*``. Every key has a default (``DEFAULTS``); unknown keys, bad values
and duplicate keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, DataIOError
from .synth import SynthConfig
from .tracker.model import ModelConfig
from .tracker.train import TrainSettings

# dataset layout written by `synth`
DATA_KEYS = {"sequences": 4, "test_sequences": 2, "seed": 0}
TRACK_KEYS = {"window": False}


def _defaults():
    out = {}
    for prefix, cls in (("model", ModelConfig), ("train", TrainSettings), ("synth", SynthConfig)):
        for f in fields(cls):
            out[f"{prefix}.{f.name}"] = f.default
    for k, v in DATA_KEYS.items():
        out[f"data.{k}"] = v
    for k, v in TRACK_KEYS.items():
        out[f"track.{k}"] = v
    return out


DEFAULTS = _defaults()
TRUE = {"1", "true", "yes", "on"}
FALSE = {"0", "false", "no", "off"}


def parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in TRUE:
                return True
            if low in FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def parse(cls, text, source="<config>"):
        values = dict(DEFAULTS)
        seen = set()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected `key = value`")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{n}: unknown key {key!r}")
            if key in seen:
                raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
            seen.add(key)
            values[key] = parse_value(key, val, DEFAULTS[key])
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise DataIOError(f"cannot read config {path}: {e}") from e
        return cls.parse(text, str(path))

    def section(self, prefix):
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def override(self, **kv):
        vals = dict(self.values)
        for k, v in kv.items():
            if v is None:
                continue
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            vals[k] = v
        cfg = RunConfig(vals)
        cfg.validate()
        return cfg

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(**self.section("model"))

    @property
    def train(self) -> TrainSettings:
        return TrainSettings(**self.section("train"))

    @property
    def synth(self) -> SynthConfig:
        return SynthConfig(**self.section("synth"))

    @property
    def data(self):
        return self.section("data")

    @property
    def track(self):
        return self.section("track")

    def validate(self):
        # constructing the typed views runs their checks
        self.model, self.train, self.synth
        if self.data["sequences"] < 1 or self.data["test_sequences"] < 0:
            raise ConfigError("data.sequences must be >= 1 and data.test_sequences >= 0")

    def dumps(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.values.items()))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
