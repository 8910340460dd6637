"""Run configuration: flat INI sections, units in key names, unknown keys rejected."""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .analysis.rates import WindowSpec
from .chain import DetectorParams, DfgParams, LossBudget, NoiseParams
from .emitter import EmitterParams
from .netplan import LinkParams
from .schedule import SequenceSchedule


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}" + (f":{line}" if line else "")
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass(frozen=True)
class AnalysisParams:
    bin_width_ps: int = 1000
    hist_lead_ns: float = 12.0
    signal_width_ns: float = 20.0
    noise_offset_ns: float = 100.0
    fit_start_ns: float = 4.0
    fit_stop_ns: float = 100.0
    fit_bin_width_ns: float = 8.0
    g2_window_ns: float = 25.0
    g2_lead_ns: float = 2.5
    g2_max_k: int = 5

    def __post_init__(self):
        if self.bin_width_ps <= 0 or self.g2_window_ns <= 0 or self.fit_bin_width_ns <= 0:
            raise ValueError("bin widths and windows must be positive")
        if round(self.fit_bin_width_ns * 1000) % self.bin_width_ps:
            raise ValueError("fit_bin_width_ns must be a multiple of bin_width_ps")
        if self.fit_stop_ns <= self.fit_start_ns:
            raise ValueError("fit_stop_ns must exceed fit_start_ns")
        if self.g2_max_k < 0:
            raise ValueError("g2_max_k must be >= 0")

    def window(self, arrival_ns: float) -> WindowSpec:
        return WindowSpec(arrival_ns, self.signal_width_ns, self.noise_offset_ns)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    threads: int = 1
    hbt: bool = False
    pump_mW: float = 100.0
    powers_mW: tuple[float, ...] = ()
    emitter: EmitterParams = field(default_factory=EmitterParams)
    schedule: SequenceSchedule = field(default_factory=SequenceSchedule)
    dfg: DfgParams = field(default_factory=DfgParams)
    losses: LossBudget = field(default_factory=LossBudget)
    visible: DetectorParams = field(default_factory=DetectorParams.apd)
    visible_noise: NoiseParams = field(default_factory=NoiseParams.apd)
    telecom: DetectorParams = field(default_factory=DetectorParams.sspd)
    telecom_noise: NoiseParams = field(default_factory=NoiseParams.sspd)
    analysis: AnalysisParams = field(default_factory=AnalysisParams)
    planner: LinkParams = field(default_factory=LinkParams)
    planner_max_km: float = 10.0
    planner_step_km: float = 0.1

    @property
    def pump_W(self) -> float:
        return self.pump_mW * 1e-3

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fields(cls, rename=None, skip=()):
    rename = rename or {}
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        out[rename.get(f.name, f.name)] = (f.name, f.type)
    return out


# section -> [(RunConfig attribute or None for top level, class, {key: (field, type)})]
_SECTIONS: dict[str, list[tuple[str | None, Any, dict]]] = {
    "run": [(None, None, {"seed": ("seed", "int"), "threads": ("threads", "int"), "hbt": ("hbt", "bool"),
                          "pump_mW": ("pump_mW", "float"), "powers_mW": ("powers_mW", "list")})],
    "emitter": [("emitter", EmitterParams, _fields(EmitterParams))],
    "schedule": [("schedule", SequenceSchedule, _fields(SequenceSchedule))],
    "conversion": [("dfg", DfgParams, _fields(DfgParams, skip=("pump_power_W",))),
                   ("losses", LossBudget, _fields(LossBudget))],
    "detector.visible": [("visible", DetectorParams, _fields(DetectorParams)),
                         ("visible_noise", NoiseParams, _fields(NoiseParams, {"window_ns": "noise_window_ns"}))],
    "detector.telecom": [("telecom", DetectorParams, _fields(DetectorParams)),
                         ("telecom_noise", NoiseParams, _fields(NoiseParams, {"window_ns": "noise_window_ns"}))],
    "analysis": [("analysis", AnalysisParams, _fields(AnalysisParams))],
    "planner": [("planner", LinkParams, _fields(LinkParams)),
                (None, None, {"max_separation_km": ("planner_max_km", "float"),
                              "step_km": ("planner_step_km", "float")})],
}


def _convert(raw: str, typ) -> Any:
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    t = t.replace(" ", "")
    if t == "bool":
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if t == "int":
        try:
            return int(raw.strip(), 0)
        except ValueError:
            f = float(raw)
            if not f.is_integer():
                raise ValueError(f"expected an integer, got {raw!r}") from None
            return int(f)
    if t in ("float", "float|None"):
        if t == "float|None" and raw.strip().lower() in ("none", ""):
            return None
        return float(raw)
    if t == "list":
        return tuple(float(x) for x in raw.replace(";", ",").split(",") if x.strip())
    if t == "str":
        return raw.strip()
    raise ValueError(f"unsupported field type {t}")


def _line_of(lines: list[str], section: str, key: str | None = None) -> int | None:
    in_sec = False
    for i, line in enumerate(lines, 1):
        s = line.strip()
        if s.startswith("["):
            in_sec = s.strip("[] ") == section
            if in_sec and key is None:
                return i
            continue
        if in_sec and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return i
    return None


def parse_config(text: str, path: str | None = None) -> RunConfig:
    """Parse INI text into a validated :class:`RunConfig`."""
    lines = text.splitlines()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                   interpolation=None, strict=True, empty_lines_in_values=False)
    cp.optionxform = str
    try:
        cp.read_string(text, source=path or "<config>")
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any section", exc.lineno, path) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ConfigError(exc.message.split(": ", 1)[-1], exc.lineno, path) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", lineno, path) from None

    top: dict[str, Any] = {}
    groups: dict[str, tuple[Any, dict]] = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]", _line_of(lines, section), path)
        for key, raw in cp.items(section):
            for attr, cls, fields_ in _SECTIONS[section]:
                if key in fields_:
                    name, typ = fields_[key]
                    try:
                        value = _convert(raw, typ)
                    except ValueError as exc:
                        raise ConfigError(f"[{section}] {key}: {exc}", _line_of(lines, section, key), path) from None
                    if attr is None:
                        top[name] = value
                    else:
                        groups.setdefault(attr, (cls, {}))[1][name] = value
                    break
            else:
                raise ConfigError(f"unknown key '{key}' in [{section}]", _line_of(lines, section, key), path)

    built: dict[str, Any] = {}
    for attr, (cls, kwargs) in groups.items():
        if cls in (DetectorParams, NoiseParams):
            base = getattr(RunConfig(), attr)
            obj_args = {**dataclasses.asdict(base), **kwargs}
        else:
            obj_args = kwargs
        try:
            built[attr] = cls(**obj_args)
        except (TypeError, ValueError) as exc:
            section = next(s for s, specs in _SECTIONS.items() if any(a == attr for a, _, _ in specs))
            keys = [k for spec in _SECTIONS[section] for k, (name, _) in spec[2].items()
                    if name in kwargs and name in str(exc)]
            line = _line_of(lines, section, keys[0]) if keys else _line_of(lines, section)
            raise ConfigError(f"[{section}] {exc}", line, path) from None
    try:
        cfg = RunConfig(**top, **built)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), None, path) from None
    if cfg.seed < 0 or cfg.seed >= 1 << 64:
        raise ConfigError("seed must be an unsigned 64-bit integer", _line_of(lines, "run", "seed"), path)
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1", _line_of(lines, "run", "threads"), path)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(p)) from None
    return parse_config(text, str(p))
