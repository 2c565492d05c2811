"""Curvilinear dynamic bicycle model.

State vectors are plain arrays.  The time-domain state is

    [s, n, mu, v_x, v_y, r, delta, T]

and the space-domain state drops the progress ``s``.  Inputs are the rates
``[d_delta, d_T]`` in time units in both domains.

Every model function accepts either numpy arrays or casadi symbols.  With
numpy input the leading axis indexes the state components and any trailing
axes are broadcast, so a whole trajectory of shape ``(8, K)`` can be
evaluated at once.  Domain and singularity checks run for numeric input
only; symbolic callers are expected to enforce the same limits through
variable bounds.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import NamedTuple

import casadi as ca
import numpy as np

from .params import CarParams

S, N, MU, VX, VY, R, DELTA, T = range(8)
TIME_STATE_NAMES = ("s", "n", "mu", "v_x", "v_y", "r", "delta", "T_cmd")
SPATIAL_STATE_NAMES = TIME_STATE_NAMES[1:]
INPUT_NAMES = ("d_delta", "d_T")

EPS_SING = 1e-6
EPS_SDOT = 1e-3


class ModelDomainError(ValueError):
    """State outside the model's domain (e.g. v_x <= 0)."""


class SingularityError(ModelDomainError):
    """Curvilinear transformation is singular at this state."""


@dataclass
class TimeState:
    s: float
    n: float
    mu: float
    v_x: float
    v_y: float
    r: float
    delta: float
    T_cmd: float

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, x) -> "TimeState":
        return cls(*(float(v) for v in x))

    def spatial(self) -> "SpatialState":
        return SpatialState(*astuple(self)[1:])


@dataclass
class SpatialState:
    n: float
    mu: float
    v_x: float
    v_y: float
    r: float
    delta: float
    T_cmd: float

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, x) -> "SpatialState":
        return cls(*(float(v) for v in x))

    def with_progress(self, s: float) -> TimeState:
        return TimeState(s, *astuple(self))


class TireForces(NamedTuple):
    alpha_F: object
    alpha_R: object
    F_yF: object
    F_yR: object
    F_NF: float
    F_NR: float
    F_x: object
    F_M: object
    M_tv: object


class _NumOps:
    sin = staticmethod(np.sin)
    cos = staticmethod(np.cos)
    tan = staticmethod(np.tan)
    arctan = staticmethod(np.arctan)
    fabs = staticmethod(np.abs)
    sqrt = staticmethod(np.sqrt)
    symbolic = False

    @staticmethod
    def stack(parts):
        return np.stack(np.broadcast_arrays(*parts))


class _SymOps:
    sin = staticmethod(ca.sin)
    cos = staticmethod(ca.cos)
    tan = staticmethod(ca.tan)
    arctan = staticmethod(ca.atan)
    fabs = staticmethod(ca.fabs)
    sqrt = staticmethod(ca.sqrt)
    symbolic = True

    @staticmethod
    def stack(parts):
        return ca.vertcat(*parts)


def backend(*args):
    """Return the math namespace matching the argument types."""
    for a in args:
        if isinstance(a, (ca.SX, ca.MX)):
            return _SymOps
    return _NumOps


def _as_state(x):
    if isinstance(x, (ca.SX, ca.MX)):
        return x
    if isinstance(x, (TimeState, SpatialState)):
        return x.to_array()
    return np.asarray(x, dtype=float)


def _offset(x) -> int:
    dim = x.shape[0]
    if dim == 8:
        return 0
    if dim == 7:
        return -1
    raise ValueError(f"state must have 7 (spatial) or 8 (time) components, got {dim}")


def _check_vx(v_x):
    if np.any(np.asarray(v_x) <= 0):
        raise ModelDomainError("v_x must be > 0; the slip angles are undefined at standstill")


def pacejka_lateral(alpha, B, C, D, F_N, ops=None):
    """Simplified magic-formula lateral force ``F_N D sin(C atan(B alpha))``."""
    ops = ops or backend(alpha)
    return F_N * D * ops.sin(C * ops.arctan(B * alpha))


def tire_and_drivetrain(state, params: CarParams) -> TireForces:
    """Slip angles, lateral tire forces, drivetrain force and torque-vectoring moment.

    Accepts a time-domain (8) or space-domain (7) state.
    """
    x = _as_state(state)
    ops = backend(x)
    k = _offset(x)
    v_x, v_y, r = x[VX + k], x[VY + k], x[R + k]
    delta, T_cmd = x[DELTA + k], x[T + k]
    if not ops.symbolic:
        _check_vx(v_x)
    p = params
    alpha_F = ops.arctan((v_y + p.l_F * r) / v_x) - delta
    alpha_R = ops.arctan((v_y - p.l_R * r) / v_x)
    F_NF, F_NR = p.F_NF, p.F_NR
    # The slip angles above are measured velocity-minus-heading; the force
    # opposes the slip, so the force law is evaluated at -alpha.
    F_yF = pacejka_lateral(-alpha_F, p.B_F, p.C_F, p.D_F, F_NF, ops)
    F_yR = pacejka_lateral(-alpha_R, p.B_R, p.C_R, p.D_R, F_NR, ops)
    F_M = p.C_m * T_cmd
    F_x = F_M - p.C_r0 - p.C_r2 * v_x**2
    r_target = ops.tan(delta) * v_x / (p.l_R + p.l_F)
    M_tv = p.p_tv * (r_target - r)
    return TireForces(alpha_F, alpha_R, F_yF, F_yR, F_NF, F_NR, F_x, F_M, M_tv)


def progress_rate(state, kappa):
    """Rate of progress along the reference path, ``ds/dt``."""
    x = _as_state(state)
    ops = backend(x, kappa)
    k = _offset(x)
    n, mu, v_x, v_y = x[N + k], x[MU + k], x[VX + k], x[VY + k]
    denom = 1 - n * kappa
    if not ops.symbolic and np.any(np.abs(denom) < EPS_SING):
        raise SingularityError("1 - n*kappa vanishes: car at the reference path's center of curvature")
    return (v_x * ops.cos(mu) - v_y * ops.sin(mu)) / denom


def dynamics_time(state, u, kappa, params: CarParams):
    """Continuous time derivative of the 8-component time-domain state."""
    x = _as_state(state)
    ops = backend(x, u, kappa)
    if x.shape[0] != 8:
        raise ValueError("dynamics_time expects the 8-component time-domain state")
    mu, v_x, v_y, r, delta = x[MU], x[VX], x[VY], x[R], x[DELTA]
    if not ops.symbolic:
        _check_vx(v_x)
        u = np.asarray(u, dtype=float)
    p = params
    s_dot = progress_rate(x, kappa)
    f = tire_and_drivetrain(x, p)
    return ops.stack([
        s_dot,
        v_x * ops.sin(mu) + v_y * ops.cos(mu),
        r - kappa * s_dot,
        (f.F_x - f.F_yF * ops.sin(delta) + p.m * v_y * r) / p.m,
        (f.F_yR + f.F_yF * ops.cos(delta) - p.m * v_x * r) / p.m,
        (f.F_yF * p.l_F * ops.cos(delta) - f.F_yR * p.l_R + f.M_tv) / p.I_z,
        u[0] + 0 * v_x,
        u[1] + 0 * v_x,
    ])


def _with_dummy_progress(x, ops):
    if ops.symbolic:
        return ca.vertcat(0, x)
    return np.concatenate([np.zeros((1,) + x.shape[1:]), x])


def dynamics_space(state, u, kappa, params: CarParams):
    """Derivative of the 7-component spatial state with respect to progress ``s``."""
    x = _as_state(state)
    ops = backend(x, u, kappa)
    if x.shape[0] != 7:
        raise ValueError("dynamics_space expects the 7-component spatial state")
    full = _with_dummy_progress(x, ops)
    s_dot = progress_rate(full, kappa)
    if not ops.symbolic and np.any(s_dot <= EPS_SDOT):
        raise SingularityError("progress rate ds/dt <= eps: the space-domain model is singular when the car stops")
    f_t = dynamics_time(full, u, kappa, params)
    return f_t[1:] / s_dot


def dynamics_time_frozen(state, u, kappa, params: CarParams):
    """Time derivative of the 7-component state with ``s`` removed and ``kappa`` fixed."""
    x = _as_state(state)
    ops = backend(x, u, kappa)
    return dynamics_time(_with_dummy_progress(x, ops), u, kappa, params)[1:]


def step_time_rk4(state, u, track, dt: float, params: CarParams) -> np.ndarray:
    """Classical RK4 step of the time-domain model; curvature is looked up at every stage's ``s``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = _as_state(state)
    u = np.asarray(u, dtype=float)

    def f(y):
        return dynamics_time(y, u, track.kappa(y[S]), params)

    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step_time_rk4_frozen(state, u, kappa, dt: float, params: CarParams):
    """RK4 step of the 7-component model with curvature held at ``kappa``."""
    x = _as_state(state)

    def f(y):
        return dynamics_time_frozen(y, u, kappa, params)

    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step_space_euler(state, u, kappa, ds: float, params: CarParams):
    """Spatial forward Euler step ``x + ds * dx/ds``."""
    x = _as_state(state)
    if not isinstance(ds, (ca.SX, ca.MX)) and ds == 0:
        return x.copy() if isinstance(x, np.ndarray) else x
    return x + ds * dynamics_space(x, u, kappa, params)


def slip_cost(state, params: CarParams, q_beta: float):
    """Penalty on the gap between dynamic and kinematic side-slip angles."""
    x = _as_state(state)
    ops = backend(x)
    k = _offset(x)
    v_x, v_y, delta = x[VX + k], x[VY + k], x[DELTA + k]
    if not ops.symbolic:
        _check_vx(v_x)
    beta_dyn = ops.arctan(v_y / v_x)
    beta_kin = ops.arctan(delta * params.l_R / (params.l_F + params.l_R))
    return q_beta * (beta_dyn - beta_kin) ** 2


def body_accelerations(state, u, kappa, params: CarParams):
    """Longitudinal and lateral acceleration of the CoG in the body frame."""
    x = _as_state(state)
    d = dynamics_time(x, u, kappa, params)
    a_long = d[VX] - x[VY] * x[R]
    a_lat = d[VY] + x[VX] * x[R]
    return a_long, a_lat
