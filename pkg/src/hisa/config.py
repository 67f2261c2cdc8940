"""Flat ``key = value`` run configuration with dotted keys.

Files look like::

    # comments are allowed
    model.d_model = 64
    train.learning_rate = 0.0001

Resolution order, later wins: built-in defaults, the selected profile, the
config file, then command-line overrides. Unknown keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError
from .model import PROFILES, ModelConfig
from .synth import SynthSpec
from .train import TrainConfig

_SECTION = "run"

_EXTRA_DEFAULTS: dict[str, Any] = {
    "model.profile": "paper",
    "data.max_vocab": 50000,
    "data.min_freq": 1,
    "data.tokenizer": "word",
    "data.skip_malformed": False,
    "gds.embedder_seed": 0,
    "gds.embedder_dim": 64,
    "gds.idf": False,
    "generate.mode": "greedy",
    "generate.beam": 1,
    "generate.max_len": 30,
    "eval.embedder_seed": 0,
    "eval.embedder_dim": 64,
    "eval.per_example": False,
    "inspect.limit": 0,
}


def _dataclass_defaults(prefix: str, cls, skip: Iterable[str] = ()) -> dict[str, Any]:
    inst = cls() if prefix != "model" else cls(vocab_size=1)
    return {f"{prefix}.{f.name}": getattr(inst, f.name) for f in fields(cls) if f.name not in skip}


def default_values() -> dict[str, Any]:
    values = {}
    values.update(_dataclass_defaults("model", ModelConfig, skip=("vocab_size",)))
    values.update(_dataclass_defaults("train", TrainConfig))
    values.update(_dataclass_defaults("synth", SynthSpec))
    values.update(_EXTRA_DEFAULTS)
    return dict(sorted(values.items()))


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key: str, raw: Any, like: Any) -> Any:
    """Convert ``raw`` to the type of the default ``like``."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {type(like).__name__}") from None
    return text


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(f"[{_SECTION}]\n" + path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return dict(parser[_SECTION])


class RunConfig:
    """Fully resolved configuration; ``values`` maps dotted keys to typed values."""

    def __init__(self, values: dict[str, Any]):
        self.values = dict(sorted(values.items()))

    @classmethod
    def resolve(
        cls,
        config_path: str | Path | None = None,
        overrides: dict[str, Any] | None = None,
    ) -> "RunConfig":
        defaults = default_values()
        explicit: dict[str, Any] = {}
        if config_path is not None:
            explicit.update(read_config_file(config_path))
        explicit.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = sorted(set(explicit) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        values = dict(defaults)
        profile = coerce("model.profile", explicit.get("model.profile", defaults["model.profile"]), "")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        values["model.profile"] = profile
        for k, v in PROFILES[profile].items():
            values[f"model.{k}"] = v
        for k, v in explicit.items():
            if k != "model.profile":
                values[k] = coerce(k, v, defaults[k])
        return cls(values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def group(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.values.items() if k.startswith(p)}

    def model_config(self, vocab_size: int) -> ModelConfig:
        g = self.group("model")
        g.pop("profile")
        try:
            return ModelConfig(vocab_size=vocab_size, **g)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model configuration: {exc}") from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.group("train"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train configuration: {exc}") from None

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**self.group("synth"))

    def to_ini(self) -> str:
        lines = ["# fully resolved run configuration"]
        lines += [f"{k} = {_render(v)}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / "config.ini"
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def _render(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_assignment(text: str) -> tuple[str, str]:
    """Split a ``key=value`` override."""
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()
