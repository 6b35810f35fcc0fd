"""Flat namespaced key-value run configuration for the command line.

A config file holds one ``section.key = value`` assignment per line
(blank lines and ``#`` comments ignored); command-line ``--set`` overrides
win over the file. Unknown keys are rejected. The fully resolved
configuration is echoed into every output directory.

Sections and keys mirror the library dataclasses:

* ``model.*``      -> ModelConfig (channels, descriptor_dim, stride,
  nms_radius, seed)
* ``trainer.*``    -> TrainConfig scalars (preset, learning_rate,
  weight_decay, batch_size, crop_size, max_steps, epochs, lambda, seed,
  n_correspondences, margin, safe_radius, checkpoint_interval, threads)
* ``transforms.*`` -> TransformConfig (scale_range, rotation_range,
  quad_ratio, flip_prob, rot90, noise_std, blur_sigma, invert_prob,
  invert_threshold_range)
* ``eval.*``       -> ks, epsilon, nms_radius
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .model import ModelConfig
from .trainer import TrainConfig
from .transforms import TransformConfig


class ConfigError(ValueError):
    """Raised for unknown keys or unparsable values."""


def _parse_scalar(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _parse_value(text: str):
    if "," in text:
        return tuple(_parse_scalar(part) for part in text.split(","))
    return _parse_scalar(text)


_TRAINER_ALIASES = {"lambda": "lam"}
_SECTIONS = {
    "model": {f.name for f in fields(ModelConfig)},
    "trainer": {f.name for f in fields(TrainConfig)} - {"transform_config"} | {"lambda"},
    "transforms": {f.name for f in fields(TransformConfig)},
    "eval": {"ks", "epsilon", "nms_radius"},
}


class RunConfig:
    """Merged configuration: file values overlaid with CLI overrides."""

    def __init__(self, values: dict[str, dict] | None = None):
        self.values = {section: {} for section in _SECTIONS}
        for section, kv in (values or {}).items():
            for key, value in kv.items():
                self.set(section, key, value)

    def set(self, section: str, key: str, value) -> None:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in _SECTIONS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = value

    def apply_line(self, line: str) -> None:
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected 'section.key = value', got {line!r}")
        dotted = key.strip()
        section, dot, name = dotted.partition(".")
        if not dot:
            raise ConfigError(f"config key {dotted!r} is missing its section prefix")
        self.set(section, name, _parse_value(value))

    @classmethod
    def from_file(cls, path: Path | str) -> "RunConfig":
        config = cls()
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if line:
                config.apply_line(line)
        return config

    def merge_overrides(self, overrides: list[str]) -> None:
        for item in overrides:
            self.apply_line(item)

    # -- materialization ----------------------------------------------------

    def model_config(self, **extra) -> ModelConfig:
        kv = dict(self.values["model"])
        if "channels" in kv:
            channels = kv["channels"]
            kv["channels"] = tuple(channels) if isinstance(channels, tuple) else (channels,)
        kv.update(extra)
        return ModelConfig(**kv)

    def transform_config(self) -> TransformConfig:
        return TransformConfig(**self.values["transforms"])

    def train_config(self, **extra) -> TrainConfig:
        kv = dict(self.values["trainer"])
        for alias, name in _TRAINER_ALIASES.items():
            if alias in kv:
                kv[name] = kv.pop(alias)
        kv.update(extra)
        kv.setdefault("transform_config", self.transform_config())
        preset = kv.pop("preset", "custom")
        if preset == "d2_style":
            for key, value in {"learning_rate": 1e-4, "weight_decay": 1e-5,
                               "batch_size": 1, "crop_size": 256}.items():
                kv.setdefault(key, value)
            return TrainConfig(preset="d2_style", **kv)
        if preset == "r2d2_style":
            for key, value in {"learning_rate": 1e-4, "weight_decay": 5e-4,
                               "batch_size": 2, "crop_size": 192}.items():
                kv.setdefault(key, value)
            return TrainConfig(preset="r2d2_style", **kv)
        return TrainConfig(preset="custom", **kv)

    def eval_option(self, key: str, default):
        return self.values["eval"].get(key, default)

    def echo(self) -> str:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                value = self.values[section][key]
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                lines.append(f"{section}.{key} = {value}")
        return "\n".join(lines) + "\n" if lines else ""

    def write_echo(self, out_dir: Path | str, resolved: dict | None = None) -> Path:
        """Write the merged config plus fully resolved dataclasses."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        parts = ["# merged configuration (file + overrides)"]
        echo = self.echo()
        if echo:
            parts.append(echo.rstrip("\n"))
        if resolved:
            parts.append("# resolved settings")
            for name, obj in resolved.items():
                parts.append(f"# [{name}] {obj}")
        path = out_dir / "resolved_config.txt"
        path.write_text("\n".join(parts) + "\n")
        return path
