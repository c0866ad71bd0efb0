"""INI run configuration with typed defaults, strict keys and flag overrides."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field

from .errors import ConfigError

# section -> key -> default; the default's type is the key's type
DEFAULTS = {
    "model": {
        "kind": "flow",
        "blocks": 4,
        "width": 64,
        "depth": 2,
        "clamp": 2.0,
        "rotation": True,
        "seed": 0,
    },
    "train": {
        "batch_size": 256,
        "steps": 1000,
        "lr": 1e-3,
        "warmup": 100,
        "lr_decay": "constant",
        "weight_decay": 0.0,
        "mode": "total",
        "estimator": "dense",
        "lambda_tc": 0.0,
        "lambda_core": 0.0,
        "lambda_detail": 0.0,
        "lambda_cd": 0.0,
        "core_size": 0,
        "noise_sigma": 0.0,
        "grad_clip": 100.0,
        "log_every": 10,
        "checkpoint_every": 0,
        "resume": False,
        "seed": 0,
    },
    "data": {
        "source": "ring2d",
        "path": "",
        "labels": "",
        "noisy_path": "",
        "n": 4000,
        "dim": 2,
        "variances": "4,1",
        "radius_mean": 1.0,
        "radius_std": 0.1,
        "seed": 0,
    },
    "eval": {
        "checkpoint": "",
        "samples": 1024,
        "noise_sigma": 0.1,
        "core_sizes": "",
        "detail_mode": "zero",
        "k": 0,
        "dims": "",
        "magnitude": 4.0,
        "from_model": False,
        "full_constants": False,
        "per_image": True,
        "max_images": 16,
        "seed": 0,
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(section, key, raw: str):
    default = DEFAULTS[section][key]
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from None
    return text


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(" ", "").split(",") if v]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.replace(" ", "").split(",") if v]


@dataclass
class CliConfig:
    values: dict = field(default_factory=lambda: {s: dict(v) for s, v in DEFAULTS.items()})

    def __getitem__(self, section) -> dict:
        return self.values[section]

    def set(self, section, key, raw):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key '{key}' in [{section}]")
        self.values[section][key] = _coerce(section, key, str(raw))

    def override(self, assignment: str):
        """Apply ``section.key=value``."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
        lhs, value = assignment.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        self.set(section, key, value)

    def int_list(self, section, key) -> list[int]:
        try:
            return _int_list(self.values[section][key])
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected comma-separated integers") from None

    def float_list(self, section, key) -> list[float]:
        try:
            return _float_list(self.values[section][key])
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected comma-separated numbers") from None

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, items in self.values.items():
            parser[section] = {k: _format(v) for k, v in items.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_ini(text: str, base: CliConfig | None = None) -> CliConfig:
    """Parse INI text over the defaults; unknown sections or keys are errors."""
    cfg = base or CliConfig()
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in parser.sections():
        for key, raw in parser[section].items():
            cfg.set(section, key, raw)
    return cfg


def load_config(path=None, overrides=()) -> CliConfig:
    cfg = CliConfig()
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        parse_ini(text, cfg)
    for item in overrides:
        cfg.override(item)
    return cfg
