"""Experiment configuration: one TOML file per experiment, overridable by
dotted keys (``inversion.reg=1e-5``)."""
from __future__ import annotations

import copy
import dataclasses as dc
import hashlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli
import tomli_w

from .metric_model import Bump, BumpTensorField, Domain, MetricSpec


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class BumpSpec:
    center: list
    width: float
    amplitude: object = 0.0
    conformal: bool = True

    def build(self) -> Bump:
        return Bump(tuple(self.center), self.width, self.amplitude, self.conformal)


@dataclass
class DomainSection:
    radius: float = 1.0
    inner_radius: float = 0.9
    dimension: int = 2


@dataclass
class MetricSection:
    steepness: float = 1.0
    bumps: list = field(default_factory=list)


@dataclass
class FieldSection:
    """Analytic test tensor field f (perturbation direction and twin truth)."""
    support_radius: float = 0.85
    steepness: float = 1.0
    bumps: list = field(default_factory=list)


@dataclass
class FlowSection:
    tol: float = 1e-10
    horizon: float = 3.0


@dataclass
class RaysSection:
    count: int = 64
    points: int = 64
    angles: int = 32
    bundles: int = 4
    beam_angles: int = 16
    beam_impacts: int = 16


@dataclass
class QuadratureSection:
    path_nodes: int = 512
    fiber_n: int = 128
    radial_n: int = 64
    assembly_nodes: int = 256


@dataclass
class GridSection:
    n: int = 65
    levels: list = field(default_factory=lambda: [33, 65, 129])


@dataclass
class LinearizeSection:
    eps: list = field(default_factory=lambda: [1e-1, 10**-1.5, 1e-2, 10**-2.5, 1e-3])
    eps_3d: list = field(default_factory=lambda: [1e-1, 1e-2])


@dataclass
class InversionSection:
    reg: float = 1e-6
    iters: int = 6000
    tol: float = 1e-6
    noise: float = 0.01
    ray_levels: list = field(default_factory=lambda: [[32, 16], [32, 32], [64, 32]])


@dataclass
class ConjugacySection:
    point: list = field(default_factory=lambda: [-0.6, 0.0])
    angle: float = 0.1
    t_max: float = 2.0
    atlas_angles: int = 16
    euclid_rays: int = 1000
    bumps: list = field(default_factory=list)


@dataclass
class SymbolSection:
    points: int = 16
    n_quad: int = 64
    point_radius: float = 0.5


@dataclass
class RunSection:
    seed: int = 0
    workers: int = 1
    output: str = "out"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    domain: DomainSection = dc.field(default_factory=DomainSection)
    metric: MetricSection = dc.field(default_factory=MetricSection)
    field: FieldSection = dc.field(default_factory=FieldSection)
    flow: FlowSection = dc.field(default_factory=FlowSection)
    rays: RaysSection = dc.field(default_factory=RaysSection)
    quadrature: QuadratureSection = dc.field(default_factory=QuadratureSection)
    grid: GridSection = dc.field(default_factory=GridSection)
    linearize: LinearizeSection = dc.field(default_factory=LinearizeSection)
    inversion: InversionSection = dc.field(default_factory=InversionSection)
    conjugacy: ConjugacySection = dc.field(default_factory=ConjugacySection)
    symbol: SymbolSection = dc.field(default_factory=SymbolSection)
    run: RunSection = dc.field(default_factory=RunSection)

    # -- builders ---------------------------------------------------------
    @property
    def domain_obj(self) -> Domain:
        d = self.domain
        return Domain(d.radius, d.inner_radius, d.dimension)

    def metric_spec(self) -> MetricSpec:
        return MetricSpec(self.domain_obj, tuple(b.build() for b in self.metric.bumps), self.metric.steepness)

    def focusing_spec(self) -> MetricSpec:
        return MetricSpec(self.domain_obj, tuple(b.build() for b in self.conjugacy.bumps), self.metric.steepness)

    def test_field(self) -> BumpTensorField:
        f = self.field
        return BumpTensorField(self.domain.dimension, tuple(b.build() for b in f.bumps), f.support_radius,
                               f.steepness)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return _strip_none(asdict(self))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path):
        Path(path).write_text(self.dumps())

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        return _build(ExperimentConfig, data, "")

    @staticmethod
    def loads(text: str) -> "ExperimentConfig":
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from exc
        cfg = ExperimentConfig.from_dict(data)
        cfg.validate()
        return cfg

    @staticmethod
    def load(path) -> "ExperimentConfig":
        return ExperimentConfig.loads(Path(path).read_text())

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Apply ``key.sub=value`` strings; values parse as TOML literals
        (bare words fall back to strings)."""
        data = self.to_dict()
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override '{item}' is not key=value")
            key, raw = item.split("=", 1)
            key = key.strip()
            try:
                value = tomli.loads(f"v = {raw.strip()}")["v"]
            except tomli.TOMLDecodeError:
                value = raw.strip()
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key '{key}'")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key '{key}'")
            node[parts[-1]] = value
        cfg = ExperimentConfig.from_dict(data)
        cfg.validate()
        return cfg

    def validate(self):
        d = self.domain
        if d.dimension not in (2, 3):
            raise ConfigError("domain.dimension must be 2 or 3")
        if not 0 < d.inner_radius < d.radius:
            raise ConfigError("domain.inner_radius must lie in (0, domain.radius)")
        checks = {
            "flow.tol": self.flow.tol, "flow.horizon": self.flow.horizon, "rays.count": self.rays.count,
            "rays.points": self.rays.points, "rays.angles": self.rays.angles, "rays.bundles": self.rays.bundles,
            "quadrature.path_nodes": self.quadrature.path_nodes, "quadrature.fiber_n": self.quadrature.fiber_n,
            "quadrature.radial_n": self.quadrature.radial_n, "quadrature.assembly_nodes": self.quadrature.assembly_nodes,
            "grid.n": self.grid.n, "inversion.reg": self.inversion.reg, "inversion.iters": self.inversion.iters,
            "inversion.tol": self.inversion.tol, "conjugacy.t_max": self.conjugacy.t_max,
            "symbol.points": self.symbol.points, "symbol.n_quad": self.symbol.n_quad,
            "run.workers": self.run.workers, "field.support_radius": self.field.support_radius,
        }
        for key, val in checks.items():
            if not val > 0:
                raise ConfigError(f"{key} must be positive")
        if self.inversion.noise < 0:
            raise ConfigError("inversion.noise must be nonnegative")
        if self.run.seed < 0:
            raise ConfigError("run.seed must be nonnegative")
        if self.grid.n < 5:
            raise ConfigError("grid.n must be at least 5")
        if any(e <= 0 for e in self.linearize.eps):
            raise ConfigError("linearize.eps must be positive")
        if self.field.support_radius >= d.inner_radius:
            raise ConfigError("field.support_radius must be below domain.inner_radius")
        for sec, bumps in (("metric.bumps", self.metric.bumps), ("field.bumps", self.field.bumps),
                           ("conjugacy.bumps", self.conjugacy.bumps)):
            for i, b in enumerate(bumps):
                if len(b.center) != d.dimension:
                    raise ConfigError(f"{sec}[{i}].center has the wrong dimension")
                if not b.width > 0:
                    raise ConfigError(f"{sec}[{i}].width must be positive")
                try:
                    b.build().matrix(d.dimension)
                except ValueError as exc:
                    raise ConfigError(f"{sec}[{i}].amplitude: {exc}") from exc
        try:
            self.metric_spec().check_positive()
        except ValueError as exc:
            raise ConfigError(f"metric.bumps: {exc}") from exc
        return self


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_strip_none(v) for v in obj]
    return obj


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix.rstrip('.') or 'config'}' must be a table")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in data:
            continue
        val = data[name]
        default = getattr(defaults, name)
        key = prefix + name
        if is_dataclass(default):
            kwargs[name] = _build(type(default), val, key + ".")
        elif name == "bumps":
            if not isinstance(val, list):
                raise ConfigError(f"'{key}' must be an array of tables")
            out = []
            for i, b in enumerate(val):
                try:
                    out.append(BumpSpec(**b))
                except TypeError as exc:
                    raise ConfigError(f"'{key}[{i}]': {exc}") from exc
            kwargs[name] = out
        else:
            kwargs[name] = _coerce(val, default, key)
    return cls(**kwargs)


def _coerce(val, default, key):
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"'{key}' must be a boolean")
        return val
    if isinstance(default, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"'{key}' must be an integer")
        return val
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"'{key}' must be a number")
        return float(val)
    if isinstance(default, str):
        if not isinstance(val, str):
            raise ConfigError(f"'{key}' must be a string")
        return val
    if isinstance(default, list):
        if not isinstance(val, list):
            raise ConfigError(f"'{key}' must be an array")
        return copy.deepcopy(val)
    return val
