"""Track-boundary, friction-ellipse and input-box constraints.

All residuals follow the ``<= 0`` feasible convention.  Like the vehicle
model, the corridor and ellipse functions accept numpy or casadi input.
"""

from __future__ import annotations

import numpy as np

from .params import CarParams, ConstraintParams
from .vehicle import DELTA, MU, N, T, TireForces, _as_state, _offset, backend, tire_and_drivetrain


def smooth_abs(x, eps, ops, upper: bool):
    """Smooth bound of ``|x|`` within ``eps``: from above if ``upper`` else from below."""
    root = ops.sqrt(x * x + eps * eps)
    return root if upper else root - eps


def corridor_residuals(n, mu, N_L, N_R, params: CarParams, abs_eps: float = 0.0):
    """Heading-dependent track-boundary residuals ``(g_L, g_R)`` in meters.

    ``abs_eps > 0`` replaces ``|mu|`` by :func:`smooth_abs`, bounded from the
    side that can only tighten each residual, so smoothed-feasible implies
    exactly feasible.
    """
    ops = backend(n, mu)
    if abs_eps > 0:
        a_L = smooth_abs(mu, abs_eps, ops, upper=False)
        a_R = smooth_abs(mu, abs_eps, ops, upper=True)
    else:
        a_L = a_R = ops.fabs(mu)
    half_w = 0.5 * params.W_c * ops.cos(mu)
    g_L = n - 0.5 * params.L_c * ops.sin(a_L) + half_w - N_L
    g_R = -n + 0.5 * params.L_c * ops.sin(a_R) + half_w - N_R
    return g_L, g_R


def track_bounds(state, track, params: CarParams, s=None):
    """Corridor residuals of ``state`` on ``track``.

    ``state`` is a time-domain state (progress read from it) or a spatial
    state together with an explicit ``s``.
    """
    x = _as_state(state)
    k = _offset(x)
    if s is None:
        if k != 0:
            raise ValueError("a spatial state needs an explicit progress s")
        s = x[0]
    return corridor_residuals(x[N + k], x[MU + k], track.width_left(s), track.width_right(s), params)


def friction_ellipse(forces: TireForces, car: CarParams, cons: ConstraintParams):
    """Combined-force residuals ``(e_F, e_R)`` in N^2.

    The motor force is split 50/50 between the axles; the grip limit of an
    axle is ``lambda * D * F_N``.
    """
    f_m_axle = 0.5 * forces.F_M
    lim_F = cons.lambda_ * car.D_F * forces.F_NF
    lim_R = cons.lambda_ * car.D_R * forces.F_NR
    e_F = (cons.rho_long * f_m_axle) ** 2 + forces.F_yF**2 - lim_F**2
    e_R = (cons.rho_long * f_m_axle) ** 2 + forces.F_yR**2 - lim_R**2
    return e_F, e_R


def friction_ellipse_scaled(state, car: CarParams, cons: ConstraintParams):
    """Ellipse residuals divided by the squared peak force (dimensionless)."""
    f = tire_and_drivetrain(state, car)
    e_F, e_R = friction_ellipse(f, car, cons)
    return e_F / (car.D_F * f.F_NF) ** 2, e_R / (car.D_R * f.F_NR) ** 2


def input_box(a, cons: ConstraintParams) -> np.ndarray:
    """Box residuals ``|a_i| - bound_i`` for ``a = (delta, T_cmd, d_delta, d_T)``."""
    a = np.asarray(a, dtype=float)
    bounds = np.array([cons.delta_max, cons.T_max, cons.d_delta_max, cons.d_T_max])
    return np.abs(a) - bounds.reshape((4,) + (1,) * (a.ndim - 1))


def physical_inputs(state, u):
    """Stack ``(delta, T_cmd, d_delta, d_T)`` from a state and an input rate vector."""
    x = _as_state(state)
    k = _offset(x)
    u = np.asarray(u, dtype=float)
    return np.stack(np.broadcast_arrays(x[DELTA + k], x[T + k], u[0], u[1]))
