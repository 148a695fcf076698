"""Experiment configuration: a YAML file with a fixed schema.

Schema (all keys optional unless marked required)::

    problem: linear | nonlinear          # required
    M_target: 5.0                        # required, > 0
    T: 1.0
    seed: 0
    stride: 10
    output: runs/demo
    geometry:
      D: {kind: rectangle, lower: [x, y], upper: [x, y]}   # or disk / polygon
      points: [[x, y], ...]                                # required
      omega: null                                          # Region literal or null
      margin: 1.0
    construction:
      r0: null          # override of the rule-based radius
      m: null           # override of the rule-based mode order
      strict: false     # raise when the achieved residual exceeds the rule
      constants: {C1: 1.0, ...}
    coefficients:
      A: {profile: hermitian-rotation, center: [0, 0], radius: 0.45, angle: 0.6, contrast: 0.2, rate: 0.0}
      c: {amplitude: [re, im], center: [x, y], radius: r}   # or null
      alphas: {2: {amplitude: [re, im], center: [x, y], radius: r}, ...}
      theta_ell: 0.5
    grid: {n: 257, dt: 0.0078125}
    fitter: {n_nodes: 128, lam: null, lambdas: null, n_radial: 20, n_angular: null,
             d_spacing: null, ball_weight: 1.0, d_weight: 1.0, method: auto}
    solver: {method: direct, stencil: auto}
    verify: {pair_budget: 2000000, ratio_target: 20.0}
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import yaml

from .amplify import Constants
from .geometry import Region
from .schrodinger import Bump, CoefficientSet, MatrixProfile, ScalarProfile


class ConfigError(ValueError):
    """The configuration violates the schema or its invariants."""


def _to_float(name: str, val) -> float:
    # YAML 1.1 reads exponents without a dot, such as 1e-8, as strings
    if isinstance(val, bool):
        raise ConfigError(f"{name} must be a number")
    try:
        return float(val)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {val!r}") from None


def _to_int(name: str, val) -> int:
    num = _to_float(name, val)
    if not math.isfinite(num) or num != int(num):
        raise ConfigError(f"{name} must be an integer, got {val!r}")
    return int(num)


def _coerce_numbers(obj) -> None:
    """Convert annotated float and int fields in place; ``None`` stays for optional ones."""
    for f in fields(obj):
        kind, _, optional = f.type.partition(" | ")
        if kind not in ("float", "int"):
            continue
        val = getattr(obj, f.name)
        if val is None and optional:
            continue
        setattr(obj, f.name, (_to_float if kind == "float" else _to_int)(f.name, val))


@dataclass
class GeometrySpec:
    D: dict
    points: list
    omega: dict | None = None
    margin: float = 1.0


@dataclass
class ConstructionSpec:
    r0: float | None = None
    m: int | None = None
    strict: bool = False
    constants: dict = field(default_factory=dict)


@dataclass
class CoefficientSpec:
    A: dict = field(default_factory=lambda: {"profile": "identity"})
    c: dict | None = None
    alphas: dict = field(default_factory=dict)
    theta_ell: float = 0.5


@dataclass
class GridSpec:
    n: int = 257
    dt: float = 1.0 / 128.0


@dataclass
class FitterSpec:
    n_nodes: int = 128
    lam: float | None = None
    lambdas: list | None = None
    n_radial: int = 20
    n_angular: int | None = None
    d_spacing: float | None = None
    ball_weight: float = 1.0
    d_weight: float = 1.0
    method: str = "auto"


@dataclass
class SolverSpec:
    method: str = "direct"
    stencil: str = "auto"


@dataclass
class VerifySpec:
    pair_budget: int = 2_000_000
    ratio_target: float = 20.0


@dataclass
class ExperimentConfig:
    problem: str
    M_target: float
    geometry: GeometrySpec
    T: float = 1.0
    seed: int = 0
    stride: int = 10
    output: str = "runs/experiment"
    construction: ConstructionSpec = field(default_factory=ConstructionSpec)
    coefficients: CoefficientSpec = field(default_factory=CoefficientSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    fitter: FitterSpec = field(default_factory=FitterSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    verify: VerifySpec = field(default_factory=VerifySpec)

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        out = asdict(self)
        out["coefficients"]["alphas"] = {int(k): v for k, v in self.coefficients.alphas.items()}
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dump())

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        data = copy.deepcopy(data)
        for key in ("problem", "M_target", "geometry"):
            if key not in data:
                raise ConfigError(f"missing required key {key!r}")
        sections = {"geometry": GeometrySpec, "construction": ConstructionSpec,
                    "coefficients": CoefficientSpec, "grid": GridSpec, "fitter": FitterSpec,
                    "solver": SolverSpec, "verify": VerifySpec}
        kwargs = {}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        for key, value in data.items():
            if key in sections:
                spec_cls = sections[key]
                allowed = {f.name for f in fields(spec_cls)}
                value = value or {}
                bad = set(value) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                try:
                    kwargs[key] = spec_cls(**value)
                except TypeError as exc:
                    raise ConfigError(f"section {key}: {exc}") from exc
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        for obj in (cfg, *(getattr(cfg, key) for key in sections)):
            _coerce_numbers(obj)
        if cfg.fitter.lambdas is not None:
            cfg.fitter.lambdas = [_to_float("fitter.lambdas", v) for v in cfg.fitter.lambdas]
        cfg.coefficients.alphas = {int(k): v for k, v in (cfg.coefficients.alphas or {}).items()}
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        return cls.from_dict(data)

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        if self.problem not in ("linear", "nonlinear"):
            raise ConfigError("problem must be 'linear' or 'nonlinear'")
        positive = {"M_target": self.M_target, "T": self.T, "grid.dt": self.grid.dt,
                    "geometry.margin": self.geometry.margin, "fitter.n_nodes": self.fitter.n_nodes,
                    "stride": self.stride, "verify.pair_budget": self.verify.pair_budget,
                    "coefficients.theta_ell": self.coefficients.theta_ell}
        for name, val in positive.items():
            if not isinstance(val, (int, float)) or isinstance(val, bool) or not val > 0:
                raise ConfigError(f"{name} must be a positive number")
        if self.grid.n < 16:
            raise ConfigError("grid.n must be >= 16")
        steps = self.T / self.grid.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError("T/dt must be an integer")
        for name in ("r0",):
            val = getattr(self.construction, name)
            if val is not None and not val > 0:
                raise ConfigError(f"construction.{name} must be positive")
        if self.construction.m is not None and self.construction.m < 1:
            raise ConfigError("construction.m must be >= 1")
        if self.alphas_l0() and not 2 <= self.alphas_l0() <= 6:
            raise ConfigError("l0 (largest power in alphas) must lie in 2..6")
        if any(k < 2 for k in self.coefficients.alphas):
            raise ConfigError("alpha powers must be >= 2")
        if self.problem == "linear" and (self.coefficients.alphas or self.coefficients.c):
            raise ConfigError("the linear problem takes no c or alpha coefficients")
        if not self.geometry.points:
            raise ConfigError("geometry.points must list at least one point")
        if self.fitter.method not in ("auto", "normal", "svd", "qr"):
            raise ConfigError("fitter.method must be auto, normal, svd or qr")
        if self.solver.method not in ("direct", "iterative"):
            raise ConfigError("solver.method must be direct or iterative")
        try:
            self.region()
            if self.geometry.omega is not None:
                Region.from_dict(self.geometry.omega)
            self.coefficient_set().validate(self.region(), seed=self.seed)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid geometry or coefficients: {exc}") from exc

    def alphas_l0(self) -> int:
        return max(self.coefficients.alphas) if self.coefficients.alphas else 0

    # -- builders ----------------------------------------------------------

    def region(self) -> Region:
        return Region.from_dict(self.geometry.D)

    def omega(self) -> Region | None:
        return Region.from_dict(self.geometry.omega) if self.geometry.omega else None

    def constants(self) -> Constants:
        return Constants.from_dict(self.construction.constants)

    def coefficient_set(self) -> CoefficientSet:
        spec = self.coefficients
        return CoefficientSet(matrix_profile(spec.A), scalar_profile(spec.c),
                              {int(k): scalar_profile(v) for k, v in spec.alphas.items()},
                              float(spec.theta_ell))


def _bump(spec: dict) -> Bump:
    return Bump(tuple(float(v) for v in spec["center"]), float(spec["radius"]))


def matrix_profile(spec: dict | None) -> MatrixProfile:
    """Named matrix profile from a config mapping."""
    spec = spec or {"profile": "identity"}
    kind = spec.get("profile", "identity")
    if kind == "identity":
        return MatrixProfile("identity")
    if kind == "isotropic-bump":
        return MatrixProfile(kind, _bump(spec), amplitude=float(spec["amplitude"]))
    if kind == "hermitian-rotation":
        contrast = float(spec["contrast"])
        if abs(contrast) * math.sqrt(2.0) >= 1.0:
            raise ValueError("contrast too large for ellipticity")
        return MatrixProfile(kind, _bump(spec), angle=float(spec.get("angle", 0.0)),
                             contrast=contrast, rate=float(spec.get("rate", 0.0)))
    raise ValueError(f"unknown matrix profile {kind!r}")


def scalar_profile(spec: dict | None) -> ScalarProfile | None:
    if spec is None:
        return None
    amp = spec["amplitude"]
    amp = complex(amp[0], amp[1]) if isinstance(amp, (list, tuple)) else complex(amp)
    return ScalarProfile(amp, _bump(spec))
