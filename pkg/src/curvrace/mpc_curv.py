"""Receding-horizon path-following controller in the time domain.

The controller optimizes ``T_horizon`` steps of ``dt`` seconds over the
spatial state ``[n, mu, v_x, v_y, r, delta, T_cmd]`` relative to a reference
path.  Progress ``s`` is not a decision variable: before every solve the
progress along the horizon is fixed from the previous prediction, and the
curvature and corridor widths are frozen at those values.

The input vector is ``[d_delta, d_T, slack]``; the non-negative slack
softens the corridor constraint so that a state estimate slightly outside
the corridor still yields a solvable problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import casadi as ca
import numpy as np

from . import kernels
from . import nlp as nlpmod
from .constraints import corridor_residuals, friction_ellipse_scaled
from .lto import ABS_EPS, INPUT_SCALE, MU_LIMIT, SPATIAL_SCALE
from .params import CarParams, ConstraintParams, SolverTolerances
from .track import RaceLinePath, Track
from .vehicle import S, VX, progress_rate, slip_cost, step_time_rk4_frozen

log = logging.getLogger(__name__)

MPC_INPUT_SCALE = np.append(INPUT_SCALE, 0.1)


class MpcConfigError(ValueError):
    pass


def _default_mpc_tolerances() -> SolverTolerances:
    return SolverTolerances(tol_stat=1e-4, tol_feas=1e-6, max_iter=200)


@dataclass(frozen=True)
class MpcConfig:
    """Controller tuning.

    Attributes:
        T_horizon: number of prediction steps.
        dt: sampling time [s].
        q_n, q_mu: lateral-deviation and heading weights.
        q_beta: side-slip mismatch weight.
        R_diag: weights on the input rates ``(d_delta, d_T)``.
        terminal_constraint_enabled: bound ``v_x`` at the last stage by the
            reference speed profile (needs a :class:`RaceLinePath` reference).
        slack_linear, slack_quadratic: corridor-slack penalty weights.
        jit: compile the problem functions to C when a compiler is available.
    """

    T_horizon: int = 40
    dt: float = 0.025
    q_n: float = 50.0
    q_mu: float = 10.0
    q_beta: float = 0.1
    R_diag: tuple[float, float] = (1e-2, 1e-4)
    terminal_constraint_enabled: bool = True
    slack_linear: float = 100.0
    slack_quadratic: float = 1000.0
    v_x_min: float = 1.0
    jit: bool = True
    tolerances: SolverTolerances = field(default_factory=_default_mpc_tolerances)

    def __post_init__(self):
        if self.T_horizon < 2:
            raise MpcConfigError("T_horizon must be at least 2")
        if not self.dt > 0:
            raise MpcConfigError("dt must be positive")
        weights = (self.q_n, self.q_mu, self.q_beta, *self.R_diag, self.slack_linear, self.slack_quadratic)
        if min(weights) < 0:
            raise MpcConfigError("weights must be non-negative")


@dataclass
class MpcSolveRecord:
    """Outcome of one control step.

    ``X``/``U`` are the predicted spatial states and inputs (``U`` includes
    the slack column), ``s_profile`` the fixed progress used for the solve,
    and ``v_ref_T`` the terminal speed bound (``inf`` when disabled).
    """

    X: np.ndarray
    U: np.ndarray
    u_applied: np.ndarray
    s_profile: np.ndarray
    v_ref_T: float
    success: bool
    stats: dict
    solve_time: float
    iterations: int
    duals: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def terminal_margin(self) -> float:
        """``v_x,T - V_ref(s_T)``; non-positive when the terminal bound holds."""
        return float(self.X[-1, 2] - self.v_ref_T)


def _stage_functions(car: CarParams, cons: ConstraintParams, cfg: MpcConfig):
    x = ca.SX.sym("x", 7)
    u = ca.SX.sym("u", 3)
    p = ca.SX.sym("p", 3)  # kappa, N_L, N_R at the fixed progress
    kappa = p[0]
    s_dot = progress_rate(x, kappa)
    sigma = u[2]
    R = cfg.R_diag
    cost = (
        -cfg.dt * s_dot
        + cfg.q_n * x[0] ** 2
        + cfg.q_mu * x[1] ** 2
        + R[0] * u[0] ** 2
        + R[1] * u[1] ** 2
        + slip_cost(x, car, cfg.q_beta)
        + cfg.slack_linear * sigma
        + cfg.slack_quadratic * sigma**2
    )
    nxt = step_time_rk4_frozen(x, u[:2], kappa, cfg.dt, car)
    g_L, g_R = corridor_residuals(x[0], x[1], p[1], p[2], car, abs_eps=ABS_EPS)
    e_F, e_R = friction_ellipse_scaled(x, car, cons)
    return (
        ca.Function("mpc_cost", [x, u, p], [cost]),
        ca.Function("mpc_dynamics", [x, u, p], [nxt]),
        ca.Function("mpc_path", [x, u, p], [ca.vertcat(g_L - sigma, g_R - sigma, e_F, e_R)]),
    )


_STRUCTURES: dict = {}
# Barrier parameter for warm-started solves (primal and dual shifted by one node).
_WARM_MU = 1e-6


def mpc_structure(car: CarParams, cons: ConstraintParams, cfg: MpcConfig) -> nlpmod.StageStructure:
    """Stage structure of the controller problem, built once per (car, constraints, config).

    Path constraints start at node 1: node 0 is pinned to the estimate, so
    constraints there could only make the problem infeasible.
    """
    key = (car, cons, cfg.T_horizon, cfg.dt, cfg.q_n, cfg.q_mu, cfg.q_beta, cfg.R_diag,
           cfg.slack_linear, cfg.slack_quadratic, cfg.jit)
    if key not in _STRUCTURES:
        cost, dyn, path = _stage_functions(car, cons, cfg)
        _STRUCTURES[key] = nlpmod.StageStructure(
            n_nodes=cfg.T_horizon + 1, nx=7, nu=3, n_param=3, cost=cost, dynamics=dyn, path=path,
            path_from=1, x_scale=SPATIAL_SCALE, u_scale=MPC_INPUT_SCALE, name=f"mpc_T{cfg.T_horizon}", jit=cfg.jit,
        )
    return _STRUCTURES[key]


def _rollout_profile(x_hat: np.ndarray, reference: Track, car: CarParams, cfg: MpcConfig) -> np.ndarray:
    """Progress of a constant-input rollout (input rates zero, so delta and T_cmd are held)."""
    packed = kernels.pack_params(car)
    x = np.array(x_hat, dtype=float)
    s = [x[S]]
    for _ in range(cfg.T_horizon):
        x = kernels.rk4_plant(x, (0.0, 0.0), packed, reference, cfg.dt, 1)
        s.append(x[S])
    return np.array(s)


def _repair_monotone(s: np.ndarray) -> np.ndarray:
    return np.maximum.accumulate(s)


def fix_progress_profile(prev: MpcSolveRecord | None, x_hat, reference: Track, car: CarParams,
                         cfg: MpcConfig) -> np.ndarray:
    """Progress values ``s_0..s_T`` at which the next problem is evaluated.

    ``x_hat`` is the 8-component time-domain estimate relative to
    ``reference``.  ``s_0`` is the estimate's progress; later entries come
    from the previous prediction shifted by one step, the last one
    extrapolated with the previous terminal progress rate.  Without a previous
    solve the current state is rolled out at constant inputs.  The profile is
    unwrapped around ``s_0`` (it may exceed the lap length) and made
    non-decreasing.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    s0 = float(x_hat[S])
    T = cfg.T_horizon
    if prev is None or len(prev.s_profile) != T + 1:
        prof = _rollout_profile(x_hat, reference, car, cfg)
    else:
        kappa = np.asarray(reference.kappa(prev.s_profile))
        s_dot = progress_rate(prev.X.T, kappa)
        pred = prev.s_profile[0] + np.concatenate([[0.0], np.cumsum(cfg.dt * s_dot[:-1])])
        prof = np.empty(T + 1)
        prof[:T] = pred[1:]
        prof[T] = pred[T] + cfg.dt * s_dot[T]
        if reference.closed:
            prof += round((s0 - prof[0]) / reference.length) * reference.length
    prof[0] = s0
    return _repair_monotone(prof)


def build_mpc(x_hat, s_profile, reference: Track, car: CarParams, cons: ConstraintParams,
              cfg: MpcConfig) -> nlpmod.StageNlp:
    """Instantiate the controller problem at the estimate ``x_hat`` (time-domain, 8 components)."""
    s_profile = np.asarray(s_profile, dtype=float)
    T = cfg.T_horizon
    if s_profile.shape != (T + 1,):
        raise MpcConfigError(f"s_profile must have {T + 1} entries")
    if np.any(np.diff(s_profile) < 0) or not np.all(np.isfinite(s_profile)):
        raise MpcConfigError("s_profile must be finite and non-decreasing")
    if not reference.closed and (s_profile[0] < 0 or s_profile[-1] > reference.length):
        raise MpcConfigError("s_profile leaves the reference domain")
    structure = mpc_structure(car, cons, cfg)
    params = np.column_stack([
        reference.kappa(s_profile), reference.width_left(s_profile), reference.width_right(s_profile)])
    x_lb = np.tile([-np.inf, -MU_LIMIT, cfg.v_x_min, -np.inf, -np.inf, -cons.delta_max, -cons.T_max], (T + 1, 1))
    x_ub = np.tile([np.inf, MU_LIMIT, cons.v_x_max, np.inf, np.inf, cons.delta_max, cons.T_max], (T + 1, 1))
    if cfg.terminal_constraint_enabled:
        x_ub[T, 2] = min(x_ub[T, 2], terminal_speed(reference, s_profile[T]))
    u_b = np.array([cons.d_delta_max, cons.d_T_max, np.inf])
    u_lb = np.array([-cons.d_delta_max, -cons.d_T_max, 0.0])
    x_init = np.asarray(x_hat, dtype=float)[1:]
    return nlpmod.StageNlp(structure, params, x_lb, x_ub, u_lb, u_b, x_init=x_init)


def terminal_speed(reference: Track, s_T: float) -> float:
    if not isinstance(reference, RaceLinePath):
        raise MpcConfigError("the terminal speed bound needs a race-line reference")
    return float(reference.v_ref(s_T))


def _shift(A: np.ndarray) -> np.ndarray:
    return np.vstack([A[1:], A[-1:]])


def _shift_duals(prev: MpcSolveRecord | None, structure: nlpmod.StageStructure):
    """Shift constraint and bound multipliers by one node, matching :func:`_shift`."""
    if prev is None or prev.duals is None:
        return None
    lam_g, lam_x = prev.duals
    n, nx, nv = structure.n_nodes, structure.nx, structure.nx + structure.nu
    if lam_x.size != n * nv or lam_g.size != structure.n_con:
        return None
    n_links = structure.n_links
    links = _shift(lam_g[:n_links].reshape(n - 1, nx))
    path = _shift(lam_g[n_links:].reshape(n - structure.path_from, structure.n_path))
    bounds = _shift(lam_x.reshape(n, nv))
    return np.concatenate([links.ravel(), path.ravel()]), bounds.ravel()


def _guess(prev: MpcSolveRecord | None, x_hat: np.ndarray, s_profile, reference: Track,
           car: CarParams, cons: ConstraintParams, cfg: MpcConfig):
    """Primal guess: the shifted previous prediction, or a reference-following trajectory.

    The cold guess blends the estimate's lateral offset and heading linearly
    to zero, keeps the current speed (clipped to the admissible range and,
    with the terminal bound, to the reference speed), and uses kinematic
    steering and drag-balancing drive along the fixed progress profile.
    """
    T = cfg.T_horizon
    x_hat = np.asarray(x_hat, dtype=float)
    if prev is not None and prev.X.shape == (T + 1, 7):
        X, U = _shift(prev.X), _shift(prev.U)
        U[:, 2] = 0.0
    else:
        kappa = np.asarray(reference.kappa(s_profile))
        fade = np.linspace(1.0, 0.0, T + 1)
        v_hi = cons.v_x_max
        if cfg.terminal_constraint_enabled:
            v_hi = min(v_hi, float(np.min(reference.v_ref(s_profile))))
        v = float(np.clip(x_hat[VX], cfg.v_x_min, max(v_hi, cfg.v_x_min)))
        X = np.zeros((T + 1, 7))
        X[:, 0] = x_hat[1] * fade
        X[:, 1] = x_hat[2] * fade
        X[:, 2] = v
        X[:, 4] = kappa * v
        X[:, 5] = np.clip(np.arctan(kappa * car.wheelbase), -cons.delta_max, cons.delta_max)
        X[:, 6] = np.clip((car.C_r0 + car.C_r2 * v**2) / car.C_m, -cons.T_max, cons.T_max)
        U = np.zeros((T + 1, 3))
    X[0] = x_hat[1:]
    return X, U


def control_step(x_hat, prev: MpcSolveRecord | None, reference: Track, car: CarParams,
                 cons: ConstraintParams, cfg: MpcConfig) -> MpcSolveRecord:
    """One receding-horizon step.

    On solver failure the previous prediction's next input is applied
    instead (degraded mode) and the record is flagged ``success=False``.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    s_profile = fix_progress_profile(prev, x_hat, reference, car, cfg)
    problem = build_mpc(x_hat, s_profile, reference, car, cons, cfg)
    v_ref_T = problem.x_ub[-1, 2] if cfg.terminal_constraint_enabled else np.inf
    guess = _guess(prev, x_hat, s_profile, reference, car, cons, cfg)
    duals = _shift_duals(prev, problem.structure)
    if duals is None:
        opts = nlpmod.SolveOptions(mu_init=1e-3, track_best=False)
    else:
        opts = nlpmod.SolveOptions(warm_start=True, mu_init=_WARM_MU, track_best=False)
    try:
        sol = nlpmod.solve(problem, guess, cfg.tolerances, opts, duals=duals)
    except nlpmod.NlpError as exc:
        log.debug("controller solve failed: %s", exc)
        sol = exc.solution
        if prev is not None and prev.X.shape == (cfg.T_horizon + 1, 7):
            X, U = _shift(prev.X), _shift(prev.U)
        else:
            X, U = guess
        u = np.clip(U[0, :2], -np.array([cons.d_delta_max, cons.d_T_max]), [cons.d_delta_max, cons.d_T_max])
        return MpcSolveRecord(X, U, u, s_profile, float(v_ref_T), False, sol.stats(), sol.wall_time,
                              sol.iterations)
    u = np.clip(sol.U[0, :2], -np.array([cons.d_delta_max, cons.d_T_max]), [cons.d_delta_max, cons.d_T_max])
    return MpcSolveRecord(sol.X, sol.U, u, s_profile, float(v_ref_T), True, sol.stats(), sol.wall_time,
                          sol.iterations, (sol.lam_g, sol.lam_x))


class MpcController:
    """Stateful wrapper keeping the previous solution between calls."""

    def __init__(self, reference: Track, car: CarParams, cons: ConstraintParams, cfg: MpcConfig):
        if cfg.terminal_constraint_enabled and not isinstance(reference, RaceLinePath):
            raise MpcConfigError("the terminal constraint needs a race-line reference")
        self.reference = reference
        self.car = car
        self.cons = cons
        self.cfg = cfg
        self.prev: MpcSolveRecord | None = None

    def reset(self) -> None:
        self.prev = None

    def step(self, x_hat) -> MpcSolveRecord:
        rec = control_step(x_hat, self.prev, self.reference, self.car, self.cons, self.cfg)
        self.prev = rec
        return rec
