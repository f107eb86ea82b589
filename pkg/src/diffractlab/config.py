"""Experiment configuration: flat ``section.key=value`` text with typed defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path


@dataclass
class PointSetConfig:
    kind: str = "lattice"  # lattice | model_set
    basis: str = "1"  # rows separated by ';', entries by ','
    preset: str = "fibonacci"
    window_offset: float = 0.1 * math.sqrt(2.0)
    radius: float = 200.0


@dataclass
class PotentialConfig:
    mode: str = "bernoulli"  # bernoulli | gibbs | deterministic
    species_values: str = "0,1"
    probabilities: str = "0.5,0.5"
    beta: float = 0.1
    kernel: str = "finite_range"  # finite_range | exponential | algebraic
    J0: float = 1.0
    range: float = 1.0
    kappa: float = 1.0
    q: float = 3.0
    truncation: float = 0.0  # 0 = none


@dataclass
class SamplerConfig:
    samples: int = 256  # per chain, bernoulli mode
    sweeps: int = 2000
    burn_in: int = 1000
    thinning: int = 10
    seed: int = 0
    chains: int = 1
    boundary: str = "free"  # free | fixed
    boundary_width: float = 2.0


@dataclass
class AnalysisConfig:
    cutoff: float = 8.0
    covariance_mode: str = "ensemble"  # ensemble | translation_average
    periodic: bool = False
    k_lo: float = -1.5
    k_hi: float = 1.5
    k_step: float = 0.0  # 0 = 1/(8r)
    k_window: float = 0.0  # 0 = whole grid
    threshold: float = 50.0
    metric: str = "scaled_euclidean"  # scaled_euclidean | capped
    metric_t: float = 1.0
    metric_p: float = 1.0
    beta_sweep: str = ""  # start:stop:step, empty = none
    refine: bool = False  # also run at 2r for the residual-scaling diagnostic


@dataclass
class ReportConfig:
    peak_tolerance: float = 0.10
    background_tolerance: float = 0.05
    residual_ratio_max: float = 0.7
    min_peak_weight: float = 1e-3
    require_dobrushin: bool = False


@dataclass
class ExperimentConfig:
    pointset: PointSetConfig = field(default_factory=PointSetConfig)
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def to_text(self) -> str:
        lines = []
        for sec in dataclasses.fields(self):
            block = getattr(self, sec.name)
            for f in dataclasses.fields(block):
                lines.append(f"{sec.name}.{f.name}={_format(getattr(block, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            section, _, name = key.partition(".")
            block = getattr(cfg, section, None)
            if block is None or not dataclasses.is_dataclass(block) or not name:
                raise ValueError(f"config line {n}: unknown section in {key!r}")
            types = {f.name: f.type for f in dataclasses.fields(block)}
            if name not in types:
                raise ValueError(f"config line {n}: unknown key {key!r}")
            setattr(block, name, _parse(value, types[name], key))
        return cfg

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(value: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ValueError(f"bad value for {key}: {value!r}") from None
    return value


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_text(Path(path).read_text())


def preset_names() -> list[str]:
    files = resources.files("diffractlab") / "presets"
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".cfg"))


def load_preset(name: str) -> ExperimentConfig:
    res = resources.files("diffractlab") / "presets" / f"{name}.cfg"
    if not res.is_file():
        raise ValueError(f"unknown preset {name!r} (available: {', '.join(preset_names())})")
    return ExperimentConfig.from_text(res.read_text())


def parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def parse_matrix(text: str) -> list[list[float]]:
    return [parse_floats(row) for row in text.split(";") if row.strip()]


def parse_sweep(text: str) -> list[float]:
    """``start:stop:step`` inclusive of ``stop`` (within half a step)."""
    if not text.strip():
        return []
    start, stop, step = (float(v) for v in text.split(":"))
    if step <= 0:
        raise ValueError("sweep step must be positive")
    n = int(math.floor((stop - start) / step + 0.5))
    return [round(start + i * step, 12) for i in range(n + 1)]
