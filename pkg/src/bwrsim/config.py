"""Scenario configuration: defaults, a flat ``section.key = value`` loader, and validation.

Time-valued keys may carry a unit suffix (``_us``, ``_ms`` or ``_s``); the
stored value is always integer microseconds.  ``map_interval_us = 2000`` and
``map_interval_ms = 2`` are the same setting.
"""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .docsis import DocsisConfigError, PhyConfig
from .lte import LteConfig, LteConfigError

UNIT_SCALE = {"_us": 1, "_ms": 1000, "_s": 1_000_000}


class ConfigError(ValueError):
    pass


@dataclass
class BeConfig:
    piggyback: bool = True
    backoff_start_exp: int = 2
    backoff_end_exp: int = 8


@dataclass
class UgsConfig:
    enabled: bool = True
    grant_interval: int = 4000
    grants_per_interval: int = 2
    grant_size: int = 90
    jitter_bound: int = 500
    phase: int = 250


@dataclass
class BwrConfig:
    enabled: bool = True
    mode: str = "bulk"
    period: int = 2000
    jit_guard: int = 0
    encoded_size: int = 80
    phase: int = 0


@dataclass
class LoadProfile:
    cm_bg_count: int = 10
    target_utilization: float = 0.0
    flows_per_cm: int = 3
    packet_sizes: tuple = (200, 600, 1400)


@dataclass
class PingConfig:
    enabled: bool = True
    interval: int = 20_000
    jitter: int = 5000
    payload_min: int = 64
    payload_max: int = 1280
    payload_step: int = 64
    header_bytes: int = 28
    lcg: int = 0


@dataclass
class CoreConfig:
    delay: int = 1000          # CMTS to core, each way


@dataclass
class RunConfig:
    seed: int = 1
    duration: int = 60_000_000
    warmup: int = 500_000
    drain: int = 500_000
    trace: bool = False
    map_log: bool = False


def _default_lte() -> LteConfig:
    # the testbed's measured air latency sits ~16 ms above the analytic pipeline
    return LteConfig(air_overhead=16_000)


@dataclass
class ScenarioConfig:
    lte: LteConfig = field(default_factory=_default_lte)
    docsis: PhyConfig = field(default_factory=PhyConfig)
    be: BeConfig = field(default_factory=BeConfig)
    ugs: UgsConfig = field(default_factory=UgsConfig)
    bwr: BwrConfig = field(default_factory=BwrConfig)
    load: LoadProfile = field(default_factory=LoadProfile)
    ping: PingConfig = field(default_factory=PingConfig)
    core: CoreConfig = field(default_factory=CoreConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ScenarioConfig":
        try:
            self.lte.validate()
            self.docsis.validate()
        except (LteConfigError, DocsisConfigError) as exc:
            raise ConfigError(str(exc)) from None
        b, u = self.bwr, self.ugs
        if b.mode not in ("bulk", "per_lcg"):
            raise ConfigError(f"bwr.mode must be 'bulk' or 'per_lcg', got {b.mode!r}")
        if b.period <= 0 or b.period % self.lte.subframe:
            raise ConfigError(
                f"bwr.period_us = {b.period} is not a multiple of "
                f"lte.subframe_us = {self.lte.subframe}")
        if b.enabled and not u.enabled:
            raise ConfigError("bwr.enabled = true requires ugs.enabled = true")
        if u.enabled and u.grant_interval % u.grants_per_interval:
            raise ConfigError(
                f"ugs.grant_interval_us = {u.grant_interval} is not divisible by "
                f"ugs.grants_per_interval = {u.grants_per_interval}")
        if u.enabled and b.encoded_size > u.grant_size:
            raise ConfigError(
                f"ugs.grant_size = {u.grant_size} B cannot carry "
                f"bwr.encoded_size = {b.encoded_size} B")
        if not 0.0 <= self.load.target_utilization <= 0.9:
            raise ConfigError(
                f"load.target_utilization = {self.load.target_utilization} outside [0, 0.9]")
        if self.load.target_utilization > 0 and self.load.cm_bg_count < 1:
            raise ConfigError("load.target_utilization > 0 needs load.cm_bg_count >= 1")
        p = self.ping
        if not 0 < p.payload_min <= p.payload_max or p.payload_step <= 0:
            raise ConfigError("ping payload ramp must satisfy 0 < min <= max, step > 0")
        if self.run.duration <= 0:
            raise ConfigError("run.duration must be positive")
        return self

    def replace(self, **sections: dict) -> "ScenarioConfig":
        """Copy with per-section overrides, e.g. ``cfg.replace(bwr={"enabled": False})``."""
        kwargs = {}
        for name, changes in sections.items():
            kwargs[name] = dataclasses.replace(getattr(self, name), **changes)
        return dataclasses.replace(self, **kwargs)

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                val = getattr(obj, f.name)
                out[f"{sec.name}.{f.name}"] = list(val) if isinstance(val, tuple) else val
        return out


def _time_fields() -> set[tuple[str, str]]:
    return {
        ("lte", n) for n in ("sr_period", "subframe", "sr_floor", "decode_delay",
                             "decode_jitter", "harq_rtt", "air_overhead", "dl_delay")
    } | {
        ("docsis", n) for n in ("map_interval", "ds_delay", "cm_processing",
                                "map_lookahead", "req_processing")
    } | {
        ("ugs", n) for n in ("grant_interval", "jitter_bound", "phase")
    } | {
        ("bwr", n) for n in ("period", "jit_guard", "phase")
    } | {
        ("ping", n) for n in ("interval", "jitter")
    } | {("core", "delay")} | {("run", n) for n in ("duration", "warmup", "drain")}


def _parse_value(text: str) -> Any:
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    if "," in text:
        return tuple(_parse_value(t.strip()) for t in text.split(",") if t.strip())
    return text.strip("'\"")


def _coerce(key: str, current: Any, value: Any) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, tuple):
        if isinstance(value, (int, float)):
            value = (value,)
        return tuple(int(v) for v in value)
    if isinstance(current, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, int) or current is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        if value != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    return str(value)


def apply_settings(cfg: ScenarioConfig, settings: dict[str, Any]) -> ScenarioConfig:
    """Apply ``section.key`` settings to a config; unknown keys are errors."""
    time_fields = _time_fields()
    changes: dict[str, dict] = {}
    for key, value in settings.items():
        if key.count(".") != 1:
            raise ConfigError(f"{key}: keys take the form section.name")
        section, name = key.split(".")
        if not hasattr(cfg, section) or section.startswith("_"):
            raise ConfigError(f"{key}: unknown section {section!r}")
        obj = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(obj)}
        scale = 1
        fname = name
        if fname not in names:
            for suffix, mult in UNIT_SCALE.items():
                base = name[: -len(suffix)]
                if name.endswith(suffix) and (section, base) in time_fields:
                    fname, scale = base, mult
                    break
            else:
                raise ConfigError(f"{key}: unknown key")
        if scale != 1:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key}: expected a number, got {value!r}")
            value = value * scale
        value = _coerce(key, getattr(obj, fname), value)
        changes.setdefault(section, {})[fname] = value
    try:
        out = cfg.replace(**changes)
    except (LteConfigError, DocsisConfigError) as exc:
        raise ConfigError(str(exc)) from None
    if "docsis" in changes and "map_lookahead" not in changes["docsis"]:
        # lookahead follows its inputs unless set explicitly
        d = out.docsis
        d.map_lookahead = d.map_interval + d.ds_delay + d.cm_processing
    return out.validate()


def parse_text(text: str) -> dict[str, Any]:
    settings: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in settings:
            raise ConfigError(f"line {lineno}: {key} set twice")
        settings[key] = _parse_value(value)
    return settings


def load_config(path, base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return apply_settings(base or ScenarioConfig(), parse_text(path.read_text()))


def dump_config(cfg: ScenarioConfig) -> str:
    lines = []
    for key, val in cfg.to_flat().items():
        section, name = key.split(".")
        if (section, name) in _time_fields():
            key = f"{key}_us"
        if isinstance(val, bool):
            text = "true" if val else "false"
        elif isinstance(val, list):
            text = ", ".join(str(v) for v in val)
        elif isinstance(val, str):
            text = f'"{val}"'
        else:
            text = str(val)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
