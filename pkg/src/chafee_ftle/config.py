"""Experiment configuration: a flat ``section.key = value`` text format.

Grammar
-------
* One assignment per line: ``section.key = value``.
* ``#`` starts a comment; blank lines are ignored.
* Values are numbers, booleans (``true``/``false``), ``none``, bare words, or
  comma-separated lists of numbers.
* Unknown keys are errors.  Missing keys take the defaults below.

The canonical form (all keys, sorted, with normalized values) is hashed to
give the config hash recorded in every output file.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .dynamics import Scheme, SolverConfig
from .noise import ConfigurationError, CovarianceSpec
from .spectral import BasisConvention, DomainSpec

__all__ = [
    "ExperimentConfig",
    "NoiseSection",
    "AnalysisSection",
    "OutputSection",
    "parse_config",
    "load_config",
    "ConfigurationError",
]


@dataclass(frozen=True)
class NoiseSection:
    gamma: float = 1.0
    amplitude: float = 2.0
    q: tuple[float, ...] | None = None
    seed: int = 0
    ensemble_size: int = 100
    trace_epsilon: float = 0.01


@dataclass(frozen=True)
class AnalysisSection:
    k_max: int = 3
    k: int = 1
    T: float = 5.0
    epsilon: float | None = None
    delta: float = 0.1
    M: float = 2.0
    t_floor: float = 0.1
    tol_disc: float = 0.02
    k_probe: int = 8
    max_trials: int = 10_000
    n_chains: int = 100
    burn_in: float = 40.0
    sync_tol: float = 1e-9
    S0: float = 5.0
    S_max: float = 40.0
    spread: float = 5.0
    alpha_grid: tuple[float, ...] = ()
    chunk_size: int = 25
    record_stride: int = 10
    failure_threshold: float = 0.1


@dataclass(frozen=True)
class OutputSection:
    directory: str = "out"
    formats: tuple[str, ...] = ("csv", "json")


_SECTIONS = {
    "domain": DomainSpec,
    "solver": SolverConfig,
    "noise": NoiseSection,
    "analysis": AnalysisSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    domain: DomainSpec = field(default_factory=DomainSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    noise: NoiseSection = field(default_factory=NoiseSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        a, n = self.analysis, self.noise
        if n.ensemble_size < 0:
            raise ConfigurationError("noise.ensemble_size must be >= 0")
        if not 1 <= a.k_max <= a.k_probe <= self.domain.N:
            raise ConfigurationError("need 1 <= analysis.k_max <= analysis.k_probe <= domain.N")
        if not 1 <= a.k < self.domain.N:
            raise ConfigurationError("analysis.k must lie in 1..N-1")
        if not a.T > 0:
            raise ConfigurationError("analysis.T must be positive")
        for name in ("delta", "M", "sync_tol", "S0", "S_max", "spread"):
            if not getattr(a, name) > 0:
                raise ConfigurationError(f"analysis.{name} must be positive")
        if a.M <= 1:
            raise ConfigurationError("analysis.M must exceed 1")
        if a.epsilon is not None and not a.epsilon > 0:
            raise ConfigurationError("analysis.epsilon must be positive")
        if a.max_trials < 1 or a.n_chains < 1 or a.chunk_size < 1 or a.record_stride < 1:
            raise ConfigurationError("trial, chain, chunk and stride counts must be >= 1")
        steps = a.T / self.solver.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ConfigurationError("analysis.T must be a multiple of solver.dt")
        self.covariance().validate(self.domain)

    def covariance(self) -> CovarianceSpec:
        n = self.noise
        if n.q is not None:
            if len(n.q) != self.domain.N:
                raise ConfigurationError(f"noise.q needs {self.domain.N} entries")
            return CovarianceSpec(np.array(n.q), None, n.trace_epsilon)
        return CovarianceSpec.power_law(self.domain, n.gamma, n.amplitude, n.trace_epsilon)

    def canonical(self) -> str:
        lines = []
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(sorted(lines)) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> ExperimentConfig:
        """Return a copy with per-section field overrides, e.g. solver={'alpha': 2}."""
        kw = {}
        for sec, upd in sections.items():
            kw[sec] = replace(getattr(self, sec), **upd)
        return replace(self, **kw)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if hasattr(v, "value"):
        return str(v.value)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _coerce(text: str, f, section: str):
    """Convert ``text`` to the type of dataclass field ``f``."""
    t = text.strip()
    ann = str(f.type)
    low = t.lower()
    if low == "none":
        if "None" in ann:
            return None
        raise ConfigurationError(f"{section}.{f.name} cannot be none")
    try:
        if "tuple[float" in ann:
            return tuple(float(x) for x in t.split(",") if x.strip()) if t else ()
        if "tuple[str" in ann:
            return tuple(x.strip() for x in t.split(",") if x.strip())
        if "bool" in ann:
            if low not in ("true", "false"):
                raise ValueError(t)
            return low == "true"
        if ann.startswith("int"):
            x = float(t)
            if x != int(x):
                raise ValueError(t)
            return int(x)
        if "float" in ann:
            x = float(t)
            if not math.isfinite(x):
                raise ValueError(t)
            return x
        if "BasisConvention" in ann:
            return BasisConvention(t)
        if "Scheme" in ann:
            return Scheme(t)
        return t
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {section}.{f.name}: {text.strip()!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'section.key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigurationError(f"line {lineno}: key {key!r} must be section.name")
        sec, name = key.split(".")
        if sec not in _SECTIONS:
            raise ConfigurationError(f"line {lineno}: unknown section {sec!r}")
        fmap = {f.name: f for f in fields(_SECTIONS[sec])}
        if name not in fmap:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if name in values[sec]:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[sec][name] = _coerce(val, fmap[name], sec)
    try:
        parts = {sec: cls(**values[sec]) for sec, cls in _SECTIONS.items()}
        return ExperimentConfig(**parts)
    except ConfigurationError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
