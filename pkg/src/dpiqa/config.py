"""Run configuration: flat ``section.key = value`` text with env overrides.

Precedence, lowest first: built-in defaults, the dataset preset, the config
file, ``DPIQA_<SECTION>__<KEY>`` environment variables, command-line
``--set`` pairs.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .conditioning import load_template
from .distill import StudentConfig
from .model import ModelConfig
from .training import LossConfig, TrainSchedule

ENV_PREFIX = "DPIQA_"

# Learning-rate decay epochs and validation step per dataset.
DATASET_PRESETS: dict[str, dict[str, Any]] = {
    "clive": {"teacher.decay_epochs": (), "student.decay_epochs": (10, 25), "teacher.val_step": 50, "student.val_step": 50},
    "koniq": {"teacher.decay_epochs": (5,), "student.decay_epochs": (5,)},
    "livefb": {"teacher.decay_epochs": (2,), "student.decay_epochs": (4,)},
    "spaq": {"teacher.decay_epochs": (), "student.decay_epochs": (6,)},
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class DataSection:
    template: Optional[str] = None
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None


@dataclass
class RunSection:
    preset: str = "koniq"
    split_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    seed: int = 0
    output_dir: str = "runs"
    distill_weight: float = 1.0


def _teacher_defaults() -> TrainSchedule:
    return TrainSchedule(lr=1e-5, batch_size=12, max_epochs=15, decay_factor=0.2, val_step=250)


def _student_defaults() -> TrainSchedule:
    return TrainSchedule(lr=1e-4, batch_size=24, max_epochs=30, decay_factor=0.2, val_step=250)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    student_model: StudentConfig = field(default_factory=StudentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    teacher: TrainSchedule = field(default_factory=_teacher_defaults)
    student: TrainSchedule = field(default_factory=_student_defaults)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    SECTIONS = ("model", "student_model", "loss", "teacher", "student", "data", "run")

    def to_flat(self) -> dict[str, Any]:
        flat = {}
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                if section == "model" and f.name == "template":
                    continue
                flat[f"{section}.{_public(f.name)}"] = getattr(obj, f.name)
        return flat

    def to_text(self) -> str:
        lines = [f"{k} = {format_value(v)}" for k, v in self.to_flat().items()]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def model_config(self) -> ModelConfig:
        cfg = dataclasses.replace(self.model)
        cfg.template = load_template(self.data.template)
        return cfg


def _public(name: str) -> str:
    return "lambda" if name == "lam" else name


def _private(name: str) -> str:
    return "lam" if name == "lambda" else name


def format_value(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    return str(v)


# None-defaulted fields need their element type spelled out.
_OPTIONAL_TYPES = {
    "model.weights_path": str,
    "model.adapter_widths": (int,),
    "model.text_adapter_hidden": int,
    "teacher.max_steps": int,
    "student.max_steps": int,
    "data.template": str,
    "data.train_manifest": str,
    "data.test_manifest": str,
}


def _parse_scalar(kind: type, text: str, key: str):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(key, f"expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(key, f"expected {kind.__name__}, got {text!r}") from None


def field_type(key: str, default: Any):
    if key in _OPTIONAL_TYPES:
        return _OPTIONAL_TYPES[key]
    if isinstance(default, tuple):
        return (type(default[0]) if default else int,)
    return type(default)


def parse_value(key: str, default: Any, text: str) -> Any:
    kind = field_type(key, default)
    if key in _OPTIONAL_TYPES and text.strip() == "":
        return None
    if isinstance(kind, tuple):
        return tuple(_parse_scalar(kind[0], p, key) for p in text.split(",") if p.strip())
    return _parse_scalar(kind, text, key)


def parse_text(text: str, source: str = "config") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected 'section.key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def env_overrides(environ: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX) and "__" in name:
            section, key = name[len(ENV_PREFIX):].lower().split("__", 1)
            out[f"{section}.{key}"] = value
    return out


def build_config(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, str]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    raw: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        raw.update(parse_text(path.read_text(encoding="utf-8"), str(path)))
    raw.update(env_overrides(os.environ if environ is None else environ))
    raw.update(overrides or {})

    cfg = RunConfig()
    preset = raw.get("run.preset", cfg.run.preset).strip().lower()
    if preset not in DATASET_PRESETS and preset != "none":
        raise ConfigError("run.preset", f"unknown preset {preset!r}; choose from {sorted(DATASET_PRESETS)} or none")
    values: dict[str, Any] = dict(DATASET_PRESETS.get(preset, {}))
    defaults = cfg.to_flat()
    for key, text in raw.items():
        if key not in defaults:
            raise ConfigError(key, "unknown configuration key")
        values[key] = parse_value(key, defaults[key], text)
    values["run.preset"] = preset

    sections: dict[str, dict[str, Any]] = {s: {} for s in RunConfig.SECTIONS}
    for key, value in values.items():
        section, name = key.split(".", 1)
        sections[section][_private(name)] = value
    try:
        kwargs = {}
        for s in RunConfig.SECTIONS:
            base = getattr(cfg, s)
            kwargs[s] = dataclasses.replace(base, **sections[s])
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("config", str(exc)) from None


def validate(cfg: RunConfig, need: tuple[str, ...] = ()):
    """Fail fast with the offending key before any work starts."""
    for key in need:
        section, name = key.split(".", 1)
        value = getattr(getattr(cfg, section), name)
        if value in (None, ""):
            raise ConfigError(key, "required but not set")
        if name.endswith("manifest") and not Path(value).is_file():
            raise ConfigError(key, f"file not found: {value}")
    if cfg.data.template and not Path(cfg.data.template).is_file():
        raise ConfigError("data.template", f"file not found: {cfg.data.template}")
    if cfg.model.backbone not in ("mini", "pretrained"):
        raise ConfigError("model.backbone", f"expected mini or pretrained, got {cfg.model.backbone!r}")
    if cfg.model.backbone == "pretrained" and not cfg.model.weights_path:
        raise ConfigError("model.weights_path", "required for the pretrained backbone")
    if cfg.model.timestep < 1 or cfg.model.timestep > cfg.model.schedule_steps:
        raise ConfigError("model.timestep", f"must lie in [1, {cfg.model.schedule_steps}]")
    if not cfg.run.split_seeds:
        raise ConfigError("run.split_seeds", "at least one seed is required")
