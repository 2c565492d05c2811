"""Vehicle, constraint and solver parameters plus the flat key-value parameter file.

The parameter file is a flat YAML mapping.  Every :class:`CarParams` and
:class:`ConstraintParams` field must be present; solver keys are optional.
Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path

import yaml


class ParameterError(ValueError):
    """Raised when a parameter set or parameter file is invalid."""


@dataclass(frozen=True)
class CarParams:
    m: float
    I_z: float
    l_F: float
    l_R: float
    L_c: float
    W_c: float
    g: float
    B_F: float
    C_F: float
    D_F: float
    B_R: float
    C_R: float
    D_R: float
    C_m: float
    C_r0: float
    C_r2: float
    p_tv: float

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}")
        for name in ("m", "I_z", "l_F", "l_R", "L_c", "W_c", "D_F", "D_R", "C_m"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"invariant violated: {name} > 0 (got {getattr(self, name)})")
        for name in ("C_r0", "C_r2", "p_tv"):
            if getattr(self, name) < 0:
                raise ParameterError(f"invariant violated: {name} >= 0 (got {getattr(self, name)})")

    @property
    def wheelbase(self) -> float:
        return self.l_F + self.l_R

    @property
    def F_NF(self) -> float:
        return self.l_R / (self.l_F + self.l_R) * self.m * self.g

    @property
    def F_NR(self) -> float:
        return self.l_F / (self.l_F + self.l_R) * self.m * self.g

    def replace(self, **changes) -> "CarParams":
        return CarParams(**{**asdict(self), **changes})


@dataclass(frozen=True)
class ConstraintParams:
    rho_long: float = 1.2
    lambda_: float = 0.95
    delta_max: float = 0.4
    T_max: float = 1.0
    d_delta_max: float = 2.0
    d_T_max: float = 10.0
    v_x_max: float = 17.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"invariant violated: {_file_key(f.name)} > 0 (got {value})")


@dataclass(frozen=True)
class SolverTolerances:
    tol_stat: float = 1e-6
    tol_feas: float = 1e-6
    max_iter: int = 3000

    def __post_init__(self):
        if self.tol_stat <= 0 or self.tol_feas <= 0 or self.max_iter < 1:
            raise ParameterError("solver tolerances must be positive and max_iter >= 1")


def _file_key(field_name: str) -> str:
    # `lambda` is a keyword, so the dataclass field carries a trailing underscore
    return field_name.rstrip("_")


CAR_KEYS = tuple(f.name for f in fields(CarParams))
CONSTRAINT_KEYS = tuple(_file_key(f.name) for f in fields(ConstraintParams))
SOLVER_KEYS = tuple(f.name for f in fields(SolverTolerances))


@dataclass(frozen=True)
class ParameterSet:
    car: CarParams
    cons: ConstraintParams
    solver: SolverTolerances

    def to_dict(self) -> dict:
        out = dict(asdict(self.car))
        out.update({_file_key(k): v for k, v in asdict(self.cons).items()})
        out.update(asdict(self.solver))
        return out


def parse_params(doc: dict) -> ParameterSet:
    """Build a :class:`ParameterSet` from a flat mapping, rejecting missing or extra keys."""
    if not isinstance(doc, dict):
        raise ParameterError("parameter document must be a flat key-value mapping")
    required = set(CAR_KEYS) | set(CONSTRAINT_KEYS)
    allowed = required | set(SOLVER_KEYS)
    missing = sorted(required - doc.keys())
    extra = sorted(set(doc) - allowed)
    if missing:
        raise ParameterError(f"missing parameter keys: {', '.join(missing)}")
    if extra:
        raise ParameterError(f"unknown parameter keys: {', '.join(extra)}")
    values = {}
    for key, value in doc.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParameterError(f"parameter {key!r} must be numeric, got {value!r}")
        values[key] = value
    car = CarParams(**{k: float(values[k]) for k in CAR_KEYS})
    cons = ConstraintParams(**{f.name: float(values[_file_key(f.name)]) for f in fields(ConstraintParams)})
    solver_kw = {k: values[k] for k in SOLVER_KEYS if k in values}
    if "max_iter" in solver_kw:
        solver_kw["max_iter"] = int(solver_kw["max_iter"])
    return ParameterSet(car, cons, SolverTolerances(**solver_kw))


def load_params(path: str | Path) -> ParameterSet:
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ParameterError(f"{path}: not a valid key-value document: {exc}") from exc
    return parse_params(doc)


def save_params(params: ParameterSet, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(params.to_dict(), fh, sort_keys=False)


def default_params_path() -> Path:
    return Path(str(resources.files("curvrace") / "data" / "default_params.yaml"))


def default_params() -> ParameterSet:
    """Shipped defaults for a ~190 kg formula-student style car (not measured values)."""
    return load_params(default_params_path())
