"""Pipeline configuration: typed defaults plus a flat ``section.key=value`` file format.

Example::

    # coarse-to-fine ICP
    icp.level0.voxel=1.0
    icp.level0.max_distance=2.0
    icp.level0.iterations=50
    fusion.tau=0.6
    fit.iterations=800
"""

from __future__ import annotations

import dataclasses
import re
import types
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Union, get_args, get_origin, get_type_hints

from toothfuse.errors import ConfigError
from toothfuse.extraction import GridConfig
from toothfuse.fusion import FusionParams
from toothfuse.implicit import FitConfig, TrainConfig
from toothfuse.metrics import MetricsConfig
from toothfuse.registration import (
    DEFAULT_SCHEDULE,
    IcpScheduleLevel,
    RansacParams,
    RegistrationOptions,
)
from toothfuse.sdf import SamplingConfig
from toothfuse.synth import SyntheticToothSpec

_ICP_KEY = re.compile(r"^icp\.level(\d+)\.(\w+)$")
_NONE = "none"


@dataclass(frozen=True)
class PipelineConfig:
    ransac: RansacParams = field(default_factory=RansacParams)
    registration: RegistrationOptions = field(default_factory=RegistrationOptions)
    icp: tuple[IcpScheduleLevel, ...] = DEFAULT_SCHEDULE
    fusion: FusionParams = field(default_factory=FusionParams)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    synth: SyntheticToothSpec = field(default_factory=SyntheticToothSpec)

    def __post_init__(self) -> None:
        if not self.icp:
            raise ValueError("ICP schedule must have at least one level")

    def with_seed(self, seed: int) -> PipelineConfig:
        """Same settings with every component seed set to ``seed``."""
        return replace(
            self,
            ransac=replace(self.ransac, seed=seed),
            registration=replace(self.registration, sample_seed=seed),
            train=replace(self.train, seed=seed),
            fit=replace(self.fit, seed=seed),
            metrics=replace(self.metrics, seed=seed),
            synth=replace(self.synth, seed=seed),
        )


# section name -> attribute of PipelineConfig holding it ("network" lives inside train)
_SECTIONS: tuple[str, ...] = (
    "ransac",
    "registration",
    "fusion",
    "sampling",
    "network",
    "train",
    "fit",
    "grid",
    "metrics",
    "synth",
)


def _section_value(cfg: PipelineConfig, section: str) -> Any:
    if section == "network":
        return cfg.train.network
    return getattr(cfg, section)


def _scalar_fields(obj: Any) -> list[dataclasses.Field[Any]]:
    return [
        f for f in dataclasses.fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))
    ]


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------


def _format(value: object) -> str:
    if value is None:
        return _NONE
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, hint: Any) -> Any:
    origin = get_origin(hint)
    if origin in (Union, types.UnionType):
        args = get_args(hint)
        if raw.lower() == _NONE and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(raw, inner[0])
    if origin is Literal:
        if raw not in get_args(hint):
            raise ValueError(f"expected one of {', '.join(map(str, get_args(hint)))}")
        return raw
    if hint is bool:
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError("expected true or false")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if hint is str:
        return raw
    raise ValueError(f"unsupported setting type {hint!r}")


# ---------------------------------------------------------------------------
# Parse / dump
# ---------------------------------------------------------------------------


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    """Apply the settings in ``text`` on top of the defaults.

    Any icp.levelN key replaces the whole ICP schedule with the levels named
    in the file; a level missing a key inherits it from the default level N.
    """
    defaults = PipelineConfig()
    updates: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    icp: dict[int, dict[str, Any]] = {}

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        key, sep, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{where}: expected section.key=value, got {line.strip()!r}")

        match = _ICP_KEY.match(key)
        if match:
            level, name = int(match.group(1)), match.group(2)
            hints = get_type_hints(IcpScheduleLevel)
            if name not in hints:
                raise ConfigError(f"{where}: unknown ICP setting {name!r}")
            try:
                icp.setdefault(level, {})[name] = _coerce(raw, hints[name])
            except ValueError as e:
                raise ConfigError(f"{where}: bad value {raw!r} for {key}: {e}") from e
            continue

        section, _, name = key.partition(".")
        if section not in updates or not name:
            raise ConfigError(f"{where}: unknown setting {key!r}")
        target = _section_value(defaults, section)
        hints = get_type_hints(type(target))
        allowed = {f.name for f in _scalar_fields(target)}
        if name not in allowed:
            raise ConfigError(f"{where}: unknown setting {key!r}")
        try:
            updates[section][name] = _coerce(raw, hints[name])
        except ValueError as e:
            raise ConfigError(f"{where}: bad value {raw!r} for {key}: {e}") from e

    return _build(defaults, updates, icp, source)


def _schedule(icp: dict[int, dict[str, Any]], source: str) -> tuple[IcpScheduleLevel, ...]:
    if sorted(icp) != list(range(len(icp))):
        raise ConfigError(f"{source}: ICP levels must be numbered 0..N-1 without gaps")
    levels = []
    for n in range(len(icp)):
        base = dataclasses.asdict(DEFAULT_SCHEDULE[n]) if n < len(DEFAULT_SCHEDULE) else {}
        values = {**base, **icp[n]}
        missing = {"voxel", "max_distance", "iterations"} - set(values)
        if missing:
            raise ConfigError(f"{source}: icp.level{n} is missing {', '.join(sorted(missing))}")
        try:
            levels.append(IcpScheduleLevel(**values))
        except ValueError as e:
            raise ConfigError(f"{source}: icp.level{n}: {e}") from e
    return tuple(levels)


def _build(
    defaults: PipelineConfig,
    updates: dict[str, dict[str, Any]],
    icp: dict[int, dict[str, Any]],
    source: str,
) -> PipelineConfig:
    built: dict[str, Any] = {}
    try:
        for section in _SECTIONS:
            if section == "network":
                continue
            base = _section_value(defaults, section)
            if section == "train":
                network = replace(defaults.train.network, **updates["network"])
                built["train"] = replace(base, network=network, **updates["train"])
            else:
                built[section] = replace(base, **updates[section])
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from e
    if icp:
        built["icp"] = _schedule(icp, source)
    return replace(defaults, **built)


def dump_config(cfg: PipelineConfig) -> str:
    """Every setting in ``section.key=value`` form; parse_config(dump_config(c)) == c."""
    lines = ["# toothfuse pipeline configuration"]
    for section in _SECTIONS:
        obj = _section_value(cfg, section)
        for f in _scalar_fields(obj):
            lines.append(f"{section}.{f.name}={_format(getattr(obj, f.name))}")
        if section == "registration":
            for n, level in enumerate(cfg.icp):
                for f in dataclasses.fields(level):
                    lines.append(f"icp.level{n}.{f.name}={_format(getattr(level, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path | None = None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    return parse_config(text, source=str(p))


def save_config(path: str | Path, cfg: PipelineConfig) -> Path:
    p = Path(path)
    p.write_text(dump_config(cfg), encoding="utf-8")
    return p
