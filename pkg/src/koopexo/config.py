"""Experiment configuration: flat ``key = value`` text with dotted section prefixes.

Example::

    seed = 3
    episodes = 5
    plant.J = 0.12
    train.epochs = 60
    grid = 0.16:90:120, 0.2:90:120

Top-level keys configure the experiment; ``plant.``, ``patient.``, ``pid.``,
``mpc.`` and ``train.`` override fields of the respective dataclasses.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields, replace

from .control import MpcConfig
from .plant import PatientPolicy, PlantParams
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PidGains:
    kp: float = 0.02
    ki: float = 0.4
    kd: float = 0.004
    i_max: float = 50.0
    alpha: float = 0.2


# (frequency Hz, low deg, high deg) columns of the personalization grid
DEFAULT_GRID = ((0.16, 90.0, 120.0), (0.2, 90.0, 120.0), (0.25, 90.0, 120.0),
                (0.2, 90.0, 125.0), (0.2, 90.0, 130.0))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    episodes: int = 5
    duration: float = 60.0
    frequency: float = 0.2
    low: float = 90.0
    high: float = 120.0
    subjects: int = 5
    spread: float = 0.3
    transient: float = 5.0
    heldout_episodes: int = 3
    grid: tuple = DEFAULT_GRID
    plant: PlantParams = field(default_factory=PlantParams)
    patient: PatientPolicy = field(default_factory=PatientPolicy)
    pid: PidGains = field(default_factory=PidGains)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60))

    def __post_init__(self):
        if self.episodes < 1 or self.subjects < 1:
            raise ConfigError("episodes and subjects must be at least 1")
        if not self.duration > self.transient >= 0:
            raise ConfigError("duration must exceed the excluded transient")
        if not self.low < self.high:
            raise ConfigError("reference low must be below high")

    @property
    def subject_names(self) -> list[str]:
        return [f"P{i + 1}" for i in range(self.subjects)]


SECTIONS = ("plant", "patient", "pid", "mpc", "train")


def _coerce(raw: str, default, key: str):
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        raise ConfigError(f"{key}: cannot parse value {raw!r}") from None
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(value) if isinstance(value, (tuple, list)) else (value,)
    return value


def _parse_grid(raw: str) -> tuple:
    cols = []
    for item in raw.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid: expected freq:low:high, got {item.strip()!r}")
        try:
            cols.append(tuple(float(p) for p in parts))
        except ValueError:
            raise ConfigError(f"grid: non-numeric entry {item.strip()!r}") from None
    return tuple(cols)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    top = {}
    sections = {name: {} for name in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        if section:
            if section not in sections:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            target = getattr(cfg, section)
            known = {f.name: getattr(target, f.name) for f in fields(target)}
            if name not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            sections[section][name] = _coerce(raw, known[name], key)
        elif key == "grid":
            top[key] = _parse_grid(raw)
        else:
            known = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in SECTIONS}
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _coerce(raw, known[key], key)
    try:
        for name, values in sections.items():
            if values:
                top[name] = replace(getattr(cfg, name), **values)
        return replace(cfg, **top)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return repr(value)


def format_config(cfg: ExperimentConfig) -> str:
    """Render every setting, so the output parses back to an equal config."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for sub in fields(value):
                lines.append(f"{f.name}.{sub.name} = {_fmt(getattr(value, sub.name))}")
        elif f.name == "grid":
            lines.append("grid = " + ", ".join(":".join(repr(v) for v in col) for col in value))
        else:
            lines.append(f"{f.name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"

