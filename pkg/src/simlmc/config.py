"""Experiment configuration: an INI file with ``[section]`` headers and ``key = value`` lines.

Every key is optional and defaults to the desk-scale plate experiment. Unknown
sections or keys are rejected so that typos cannot silently fall back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError

DEFAULT_TARGETS = (0.2e-3, 0.4e-3, 0.6e-3)


@dataclass(frozen=True)
class GeometryConfig:
    width: float = 7.0
    height: float = 21.7
    nx0: int = 2
    ny0: int = 6
    levels: int = 3
    mesh_dir: str = ""  # directory of mesh_l{l}.txt files; overrides the plate when set


@dataclass(frozen=True)
class LoadConfig:
    resultant: float = 1500.0


@dataclass(frozen=True)
class MaterialConfig:
    E1: float = 12000e2
    E2: float = 20000e2
    nu21: float = 0.371
    G12: float = 5610e2
    matrix: tuple = ()  # optional 9 row-major entries of the mean 3x3 matrix
    delta_C: float = 0.1
    corr_len_x: float = 3.5
    corr_len_y: float = 3.5
    kle_modes: int = 100


@dataclass(frozen=True)
class MlmcConfig:
    n_screen: int = 50
    targets: tuple = DEFAULT_TARGETS
    max_iter: int = 20
    normalization: str = "t"
    cost_model: str = "time"
    compare_mc: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "results"
    threads: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    load: LoadConfig = field(default_factory=LoadConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    mlmc: MlmcConfig = field(default_factory=MlmcConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        g, m, ml, r = self.geometry, self.material, self.mlmc, self.run
        _positive("geometry.width", g.width)
        _positive("geometry.height", g.height)
        _at_least("geometry.nx0", g.nx0, 1)
        _at_least("geometry.ny0", g.ny0, 1)
        _at_least("geometry.levels", g.levels, 0)
        _positive("load.resultant", self.load.resultant)
        if m.matrix:
            if len(m.matrix) != 9:
                raise ConfigError(f"material.matrix needs 9 entries, got {len(m.matrix)}")
        else:
            for name in ("E1", "E2", "G12"):
                _positive(f"material.{name}", getattr(m, name))
            if not np.isfinite(m.nu21):
                raise ConfigError(f"material.nu21 must be finite, got {m.nu21}")
        if not 0.0 < m.delta_C < 1.0:
            raise ConfigError(f"material.delta_C must lie in (0, 1), got {m.delta_C}")
        _positive("material.corr_len_x", m.corr_len_x)
        _positive("material.corr_len_y", m.corr_len_y)
        _at_least("material.kle_modes", m.kle_modes, 1)
        _at_least("mlmc.n_screen", ml.n_screen, 4)
        _at_least("mlmc.max_iter", ml.max_iter, 1)
        if not ml.targets:
            raise ConfigError("mlmc.targets must list at least one target")
        for t in ml.targets:
            _positive("mlmc.targets", t)
        if ml.normalization not in ("t", "magnitude"):
            raise ConfigError(f"mlmc.normalization must be 't' or 'magnitude', got {ml.normalization!r}")
        if ml.cost_model not in ("time", "dof"):
            raise ConfigError(f"mlmc.cost_model must be 'time' or 'dof', got {ml.cost_model!r}")
        if not 0 <= r.seed < 2**64:
            raise ConfigError(f"run.seed must be an unsigned 64-bit integer, got {r.seed}")
        _at_least("run.threads", r.threads, 1)
        return self

    def with_overrides(self, seed=None, out=None, threads=None) -> "ExperimentConfig":
        run = self.run
        if seed is not None:
            run = replace(run, seed=seed)
        if out is not None:
            run = replace(run, out=str(out))
        if threads is not None:
            run = replace(run, threads=threads)
        return replace(self, run=run).validate()


def _positive(name, value):
    if not (np.isfinite(value) and value > 0):
        raise ConfigError(f"{name} must be positive, got {value}")


def _at_least(name, value, low):
    if value < low:
        raise ConfigError(f"{name} must be >= {low}, got {value}")


SECTIONS = {
    "geometry": GeometryConfig,
    "load": LoadConfig,
    "material": MaterialConfig,
    "mlmc": MlmcConfig,
    "run": RunConfig,
}


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep E1/E2/G12 case
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    parts = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        cls = SECTIONS[section]
        defaults = {f.name: f.default for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _convert(section, key, raw, defaults[key])
        parts[section] = cls(**values)
    return ExperimentConfig(**parts).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), source=str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that ``parse_config`` maps back to ``cfg``."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                if not v:
                    continue
                v = " ".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
