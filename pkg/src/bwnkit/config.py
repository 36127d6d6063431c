"""Strict flat key=value run configuration with sections.

The format is line based: ``[section]`` headers, ``key = value`` pairs,
blank lines, and full-line ``#`` comments.  Parsing is strict: unknown
sections or keys, malformed values, and duplicate keys all abort before any
work happens.  ``render_config`` emits the fully resolved configuration
(defaults merged) in the same format, and feeding that echo back reproduces
the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .detect import DEFAULT_ANCHORS

__all__ = ["ConfigError", "RunConfig", "DataSection", "ModelSection",
           "TrainSection", "KTSection", "ScheduleSection", "parse_config",
           "render_config", "load_config"]


class ConfigError(ValueError):
    """Raised on any malformed or unknown configuration input."""


@dataclass
class DataSection:
    count: int = 500
    val_count: int = 200
    seed: int = 7
    image_size: int = 96
    min_objects: int = 1
    max_objects: int = 4
    min_size: float = 12.0
    max_size: float = 40.0
    noise: float = 0.1


@dataclass
class ModelSection:
    classes: int = 3
    seed: int = 0
    anchors: tuple = tuple(DEFAULT_ANCHORS)


@dataclass
class TrainSection:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 10
    seed: int = 1


@dataclass
class KTSection:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    normalize_l2: bool = True
    kt_layers: str = "auto"
    kt_stagewise: bool = False


@dataclass
class ScheduleSection:
    m0_epochs: int = 2
    m1_epochs: int = 15
    m2_epochs: int = 30
    reset_optimizer: bool = True


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    kt: KTSection = field(default_factory=KTSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)


_SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection,
             "kt": KTSection, "schedule": ScheduleSection}


def _parse_anchors(text: str):
    anchors = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        pieces = part.split("x")
        if len(pieces) != 2:
            raise ConfigError(f"anchor {part!r} is not of the form WxH")
        try:
            anchors.append((float(pieces[0]), float(pieces[1])))
        except ValueError as exc:
            raise ConfigError(f"anchor {part!r} has non-numeric sides") from exc
    if not anchors:
        raise ConfigError("anchors must list at least one WxH pair")
    return tuple(anchors)


def _coerce(section: str, key: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if key == "anchors":
            return _parse_anchors(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {target_type.__name__}"
        ) from exc


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    section_name = None
    section_obj = None
    seen: set[tuple[str, str]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section_name = stripped[1:-1].strip()
            if section_name not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section_name}]")
            section_obj = getattr(cfg, section_name)
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        if section_obj is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        valid = {f.name: f.type for f in fields(section_obj)}
        if key not in valid:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section_name}]")
        if (section_name, key) in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{section_name}]")
        seen.add((section_name, key))
        current = getattr(section_obj, key)
        setattr(section_obj, key, _coerce(section_name, key, raw, type(current)))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    d = cfg.data
    if d.count < 1 or d.val_count < 0:
        raise ConfigError("[data] count must be >= 1 and val_count >= 0")
    if d.min_objects < 1 or d.max_objects < d.min_objects:
        raise ConfigError("[data] need 1 <= min_objects <= max_objects")
    if not 0 < d.min_size <= d.max_size:
        raise ConfigError("[data] need 0 < min_size <= max_size")
    if d.max_size >= d.image_size / 2:
        raise ConfigError("[data] max_size must be below half the image size")
    if cfg.model.classes < 1:
        raise ConfigError("[model] classes must be >= 1")
    if cfg.train.lr <= 0 or cfg.train.batch_size < 1 or cfg.train.epochs < 0:
        raise ConfigError("[train] need lr > 0, batch_size >= 1, epochs >= 0")
    k = cfg.kt
    if min(k.lambda1, k.lambda2, k.lambda3) < 0:
        raise ConfigError("[kt] loss weights must be non-negative")
    if k.lambda1 == 0 and k.lambda2 == 0:
        raise ConfigError("[kt] lambda1 and lambda2 cannot both be zero")
    s = cfg.schedule
    if min(s.m0_epochs, s.m1_epochs, s.m2_epochs) < 0:
        raise ConfigError("[schedule] epoch budgets must be non-negative")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(f"{w:g}x{h:g}" for w, h in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(cfg: RunConfig) -> str:
    """The fully resolved configuration, parseable back to an equal config."""
    lines = []
    for section_name in _SECTIONS:
        lines.append(f"[{section_name}]")
        obj = getattr(cfg, section_name)
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
