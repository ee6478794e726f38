"""Run configuration: one JSON document, every key optional, no unknown keys."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass, replace
import json
import logging
from pathlib import Path
from typing import (
    Any,
    Dict,
    get_args,
    get_origin,
    get_type_hints,
    Mapping,
    Optional,
    Type,
    TypeVar,
    Union,
)

from fadpy.classification import ClassificationDataConfig
from fadpy.data import DataConfig
from fadpy.errors import ConfigError
from fadpy.search import ScheduleConfig
from fadpy.supernet import SupernetConfig, TASKS


logger = logging.getLogger(__name__)


# Type variables
T = TypeVar("T")


DEFAULT_OUTPUT_DIR: Path = Path("runs")


@dataclass(frozen=True)
class RunConfig:
    task: str = "detect"
    seed: int = 0
    output_dir: Path = DEFAULT_OUTPUT_DIR
    supernet: SupernetConfig = field(default_factory=SupernetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    classification: ClassificationDataConfig = field(
        default_factory=ClassificationDataConfig
    )

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown task '{self.task}'")
        if self.seed < 0:
            raise ConfigError(f"seed: must be non-negative ({self.seed})")
        # the network follows the dataset it is trained on
        source = self.classification if self.task == "classify" else self.data
        supernet = replace(
            self.supernet,
            task=self.task,
            num_classes=source.num_classes,
            in_channels=source.channels,
        )
        if supernet != self.supernet:
            object.__setattr__(self, "supernet", supernet)

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)


def _to_plain(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


# =======
# Parsing
# =======


def _coerce(value: Any, hint: Any, key: str) -> Any:
    """Check a JSON value against a field annotation; lists become tuples."""
    origin = get_origin(hint)
    if origin is Union:
        options = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, options[0], key)
    if origin is tuple:
        args = get_args(hint)
        if not isinstance(value, list) or len(value) != len(args):
            raise ConfigError(f"{key}: expected a list of {len(args)} values")
        return tuple(
            _coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args))
        )
    if is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object")
        return _build(hint, value, f"{key}.")
    if hint is Path:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a path string")
        return Path(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    raise ConfigError(f"{key}: unsupported field type {hint!r}")


def _build(cls: Type[T], values: Mapping[str, Any], prefix: str = "") -> T:
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key '{prefix}{unknown[0]}'")
    kwargs = {
        name: _coerce(value, hints[name], f"{prefix}{name}")
        for name, value in values.items()
    }
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {err}") from err


def config_from_dict(values: Mapping[str, Any]) -> RunConfig:
    if not isinstance(values, dict):
        raise ConfigError("config: expected a JSON object at the top level")
    return _build(RunConfig, values)


def load_config(path: Optional[Path]) -> RunConfig:
    """Defaults when `path` is None; otherwise the parsed file."""
    if path is None:
        return RunConfig()
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file '{path}' does not exist") from None
    try:
        values = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: line {err.lineno}: {err.msg}") from err
    logger.debug("loaded config from %s", path)
    return config_from_dict(values)


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Dotted keys such as 'supernet.M'; `None` values are ignored."""
    sections: Dict[str, Dict[str, Any]] = {}
    top: Dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        section, _, name = key.rpartition(".")
        if section:
            sections.setdefault(section, {})[name] = value
        else:
            top[key] = value
    for section, values in sections.items():
        current = getattr(config, section, None)
        if current is None or not is_dataclass(current):
            raise ConfigError(f"unknown key '{section}'")
        unknown = sorted(set(values) - {f.name for f in fields(current)})
        if unknown:
            raise ConfigError(f"unknown key '{section}.{unknown[0]}'")
        try:
            top[section] = replace(current, **values)
        except ValueError as err:
            raise ConfigError(f"{section}: {err}") from err
    try:
        return replace(config, **top)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from err
