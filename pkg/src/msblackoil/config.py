"""Run configuration: a sectioned key-value text file with full validation.

Every benchmark constant has a default, so an empty file describes the
reference desk benchmark (60 x 20 fine cells, 6 x 2 coarse blocks, water
injection at the bottom-left corner, a pressure producer at the top-right
corner, 100 days).
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .blackoil import TimeControls
from .errors import ConfigurationError
from .fluid_rock import FluidModel, RockType

METHODS = ("fine", "homog-amr", "gmsfem")


@dataclass(frozen=True)
class GridConfig:
    nx_fine: int = 60
    ny_fine: int = 20
    dx_fine: float = 1.5
    dy_fine: float = 1.5
    refinement_ratio: int = 10
    thickness: float = 1.0


@dataclass(frozen=True)
class PermeabilityConfig:
    source: str = "synthetic"     # synthetic | file | uniform
    path: str = ""
    value: float = 100.0          # mD, for source = uniform
    seed: int = 20
    porosity: float = 0.2


@dataclass(frozen=True)
class InitialConfig:
    pressure: float = 2500.0
    s_g: float = 0.2
    s_o: float = 0.55

    @property
    def s_w(self) -> float:
        return 1.0 - self.s_g - self.s_o


@dataclass(frozen=True)
class WellConfig:
    injection_rate: float = 1.0        # STB/day of water, bottom-left cell
    producer_pressure: float = 2500.0  # psi, top-right cell


@dataclass(frozen=True)
class ScheduleConfig:
    end_time: float = 100.0
    report_interval: float = 1.0
    snapshot_times: tuple = (25.0, 75.0)


@dataclass(frozen=True)
class MethodConfig:
    name: str = "fine"
    eps_adap: float = 0.05
    buffer: int = 1
    derefine: bool = True
    pin_wells: bool = True
    table_samples: int = 11
    theta: float = 0.04
    basis_count: int = 3          # 0 keeps every mode
    eigen_guard: float = 0.01
    snapshot_variant: str = "exhaustive"
    n_samples: int = 0            # 0: basis_count + 4, capped by the edge size
    pad: int = -1                 # -1: refinement ratio
    seed: int = 0
    region_mode: str = "adaptive"


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "output"
    write_snapshots: bool = True


@dataclass(frozen=True)
class SimulationConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    fluid: FluidModel = field(default_factory=FluidModel)
    rock: RockType = field(default_factory=RockType)
    permeability: PermeabilityConfig = field(default_factory=PermeabilityConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    wells: WellConfig = field(default_factory=WellConfig)
    time: TimeControls = field(default_factory=TimeControls)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def replace(self, section: str, **changes) -> "SimulationConfig":
        """Copy with some keys of one section changed (validated)."""
        new = dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})
        validate(new)
        return new


SECTIONS = {f.name: f for f in fields(SimulationConfig)}


def _convert(kind, text: str, where: str):
    text = text.strip()
    if kind is bool or kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{where}: expected a boolean, got {text!r}")
    if kind is int or kind == "int":
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"{where}: expected an integer, got {text!r}") from None
    if kind is float or kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"{where}: expected a number, got {text!r}") from None
    if kind is tuple or kind == "tuple":
        parts = [p for p in text.replace(",", " ").split() if p]
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            raise ValueError(f"{where}: expected a list of numbers, got {text!r}") from None
    return text


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def parse_config(text: str) -> SimulationConfig:
    """Parse configuration text; every problem is reported in one error."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed configuration: {exc}") from None
    problems: list[str] = []
    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            problems.append(f"unknown section [{name}]")
    for name, sec_field in SECTIONS.items():
        cls = sec_field.default_factory
        known = {f.name: f for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    problems.append(f"[{name}] unknown key {key!r}")
                    continue
                kind = type(_default_of(known[key]))
                try:
                    values[key] = _convert(kind, raw, f"[{name}] {key}")
                except ValueError as exc:
                    problems.append(str(exc))
        try:
            sections[name] = cls(**values)
        except (ConfigurationError, ValueError, TypeError) as exc:
            problems.append(f"[{name}] {exc}")
    if problems:
        raise ConfigurationError("; ".join(problems))
    config = SimulationConfig(**sections)
    validate(config)
    return config


def load_config(path) -> SimulationConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"configuration file not found: {path}")
    return parse_config(path.read_text())


def dump_config(config: SimulationConfig) -> str:
    """Serialize every key; ``parse_config(dump_config(c)) == c``."""
    out = []
    for name in SECTIONS:
        sec = getattr(config, name)
        out.append(f"[{name}]")
        for f in fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name} = {v}")
        out.append("")
    return "\n".join(out)


def validate(config: SimulationConfig) -> None:
    """Check cross-field preconditions of every module before any solve."""
    p: list[str] = []
    g = config.grid
    for key in ("nx_fine", "ny_fine", "refinement_ratio"):
        if getattr(g, key) <= 0:
            p.append(f"[grid] {key} must be positive")
    for key in ("dx_fine", "dy_fine", "thickness"):
        if not getattr(g, key) > 0:
            p.append(f"[grid] {key} must be positive")
    if g.refinement_ratio > 0 and (g.nx_fine % g.refinement_ratio or g.ny_fine % g.refinement_ratio):
        p.append("[grid] fine cell counts must be divisible by refinement_ratio")
    k = config.permeability
    if k.source not in ("synthetic", "file", "uniform"):
        p.append(f"[permeability] unknown source {k.source!r}")
    if k.source == "file" and not k.path:
        p.append("[permeability] path is required for source = file")
    if not k.value > 0:
        p.append("[permeability] value must be positive")
    if not 0 < k.porosity <= 1:
        p.append("[permeability] porosity must lie in (0, 1]")
    i = config.initial
    if not i.pressure > 0:
        p.append("[initial] pressure must be positive")
    if not (0 <= i.s_g <= 1 and 0 <= i.s_o <= 1 and 0 <= i.s_w <= 1):
        p.append("[initial] saturations must lie in [0, 1] and s_g + s_o <= 1")
    w = config.wells
    if w.injection_rate < 0:
        p.append("[wells] injection_rate must be non-negative")
    if not w.producer_pressure > 0:
        p.append("[wells] producer_pressure must be positive")
    s = config.schedule
    if not s.end_time > 0:
        p.append("[schedule] end_time must be positive")
    if not s.report_interval > 0:
        p.append("[schedule] report_interval must be positive")
    if any(t < 0 or t > s.end_time for t in s.snapshot_times):
        p.append("[schedule] snapshot_times must lie in [0, end_time]")
    m = config.method
    if m.name not in METHODS:
        p.append(f"[method] name must be one of {', '.join(METHODS)}")
    if m.buffer < 0:
        p.append("[method] buffer must be non-negative")
    if m.table_samples < 2:
        p.append("[method] table_samples must be at least 2")
    if not 0 < m.theta <= 1:
        p.append("[method] theta must lie in (0, 1]")
    if m.basis_count < 0:
        p.append("[method] basis_count must be non-negative")
    if not 0 <= m.eigen_guard < 1:
        p.append("[method] eigen_guard must lie in [0, 1)")
    if m.snapshot_variant not in ("exhaustive", "randomized"):
        p.append("[method] snapshot_variant must be exhaustive or randomized")
    if m.n_samples < 0:
        p.append("[method] n_samples must be non-negative")
    if m.n_samples > g.refinement_ratio:
        p.append("[method] n_samples cannot exceed the fine faces per coarse edge")
    if m.pad < -1:
        p.append("[method] pad must be -1 (default) or non-negative")
    if m.region_mode not in ("adaptive", "all", "none"):
        p.append("[method] region_mode must be adaptive, all or none")
    if p:
        raise ConfigurationError("; ".join(p))
