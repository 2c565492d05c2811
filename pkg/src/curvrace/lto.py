"""Periodic minimum-lap-time problem in the space domain.

The lap is split into ``N + 1`` stages of equal length ``ds = L / (N + 1)``
along the centerline.  Stage ``k`` carries the spatial state and input at
``s_k = k * ds``; consecutive stages are linked by a forward Euler step in
``s`` and the last stage's successor is tied back to the first one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import casadi as ca
import numpy as np

from . import nlp as nlpmod
from .constraints import corridor_residuals, friction_ellipse_scaled, input_box, physical_inputs
from .params import CarParams, ConstraintParams, SolverTolerances
from .track import RaceLinePath, Track, reparametrize_raceline
from .vehicle import progress_rate, slip_cost, step_space_euler

log = logging.getLogger(__name__)

SPATIAL_SCALE = np.array([1.0, 0.2, 10.0, 1.0, 1.0, 0.2, 1.0])
INPUT_SCALE = np.array([1.0, 5.0])
MU_LIMIT = np.pi / 3
ABS_EPS = 1e-3


class LtoConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LtoConfig:
    N: int = 1000
    q_beta: float = 0.1
    R_diag: tuple[float, float] = (1e-3, 1e-5)
    v_init: float = 5.0
    v_x_min: float = 1.0
    tolerances: SolverTolerances = field(default_factory=SolverTolerances)

    def __post_init__(self):
        if self.N < 10:
            raise LtoConfigError("N must be at least 10")
        if self.q_beta < 0 or min(self.R_diag) < 0:
            raise LtoConfigError("weights must be non-negative")
        if self.v_init <= self.v_x_min:
            raise LtoConfigError("v_init must exceed v_x_min")


@dataclass
class RaceLine:
    s: np.ndarray
    X: np.ndarray
    U: np.ndarray
    kappa: np.ndarray
    ds: float
    lap_time: float
    path: RaceLinePath | None
    residuals: dict
    solver: dict
    duals: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def v_x(self) -> np.ndarray:
        return self.X[:, 2]

    def to_document(self) -> dict:
        names = ("n", "mu", "v_x", "v_y", "r", "delta", "T_cmd")
        doc = {"version": 1, "lap_time": self.lap_time, "ds": self.ds, "s": self.s.tolist()}
        for i, name in enumerate(names):
            doc[name] = self.X[:, i].tolist()
        doc["d_delta"] = self.U[:, 0].tolist()
        doc["d_T"] = self.U[:, 1].tolist()
        doc["residuals"] = self.residuals
        doc["solver"] = self.solver
        return doc


def stage_grid(track: Track, N: int) -> tuple[np.ndarray, float]:
    ds = track.length / (N + 1)
    if ds < track.grid_ds:
        raise LtoConfigError(
            f"track too short for N={N}: ds={ds:.4f} m is below the track grid spacing {track.grid_ds:.4f} m")
    return np.arange(N + 1) * ds, ds


def stage_functions(car: CarParams, cons: ConstraintParams, cfg: LtoConfig, ds: float):
    """Symbolic cost, dynamics and path functions of one LTO stage."""
    x = ca.SX.sym("x", 7)
    u = ca.SX.sym("u", 2)
    p = ca.SX.sym("p", 3)  # kappa, N_L, N_R
    kappa = p[0]
    s_dot = progress_rate(x, kappa)
    R = np.asarray(cfg.R_diag, dtype=float)
    cost = ds / s_dot + R[0] * u[0] ** 2 + R[1] * u[1] ** 2 + slip_cost(x, car, cfg.q_beta)
    nxt = step_space_euler(x, u, kappa, ds, car)
    g_L, g_R = corridor_residuals(x[0], x[1], p[1], p[2], car, abs_eps=ABS_EPS)
    e_F, e_R = friction_ellipse_scaled(x, car, cons)
    return (
        ca.Function("lto_cost", [x, u, p], [cost]),
        ca.Function("lto_dynamics", [x, u, p], [nxt]),
        ca.Function("lto_path", [x, u, p], [ca.vertcat(g_L, g_R, e_F, e_R)]),
    )


def build_lto(track: Track, car: CarParams, cons: ConstraintParams, cfg: LtoConfig,
              cyclic: bool = True, x_init=None) -> nlpmod.StageNlp:
    """Assemble the lap-time NLP on the uniform ``s`` grid of ``track``.

    ``cyclic=False`` together with ``x_init`` gives the point-to-point variant.
    """
    if cyclic and not track.closed:
        raise LtoConfigError("the periodic problem needs a closed track")
    s, ds = stage_grid(track, cfg.N)
    cost, dyn, path = stage_functions(car, cons, cfg, ds)
    structure = nlpmod.StageStructure(
        n_nodes=cfg.N + 1, nx=7, nu=2, n_param=3, cost=cost, dynamics=dyn, path=path,
        cyclic=cyclic, x_scale=SPATIAL_SCALE, u_scale=INPUT_SCALE, name="lto",
    )
    params = np.column_stack([track.kappa(s), track.width_left(s), track.width_right(s)])
    x_lb = [-np.inf, -MU_LIMIT, cfg.v_x_min, -np.inf, -np.inf, -cons.delta_max, -cons.T_max]
    x_ub = [np.inf, MU_LIMIT, cons.v_x_max, np.inf, np.inf, cons.delta_max, cons.T_max]
    u_b = np.array([cons.d_delta_max, cons.d_T_max])
    return nlpmod.StageNlp(structure, params, x_lb, x_ub, -u_b, u_b, x_init=x_init)


def initial_guess(track: Track, cfg: LtoConfig, car: CarParams) -> tuple[np.ndarray, np.ndarray]:
    """Centerline guess at constant speed with the drag-balancing driver command."""
    n = cfg.N + 1
    X = np.zeros((n, 7))
    X[:, 2] = cfg.v_init
    X[:, 6] = (car.C_r0 + car.C_r2 * cfg.v_init**2) / car.C_m
    return X, np.zeros((n, 2))


def lap_time(X: np.ndarray, kappa: np.ndarray, ds: float) -> float:
    return float(np.sum(ds / progress_rate(X.T, kappa)))


def trajectory_residuals(X, U, s, kappa, ds, track: Track, car: CarParams, cons: ConstraintParams) -> dict:
    """Re-evaluate every LTO constraint with the numeric model (independent of the solver)."""
    nxt = step_space_euler(X.T, U.T, kappa, ds, car).T
    links = (nxt[:-1] - X[1:]) / SPATIAL_SCALE
    period = (nxt[-1] - X[0]) / SPATIAL_SCALE
    g_L, g_R = corridor_residuals(X[:, 0], X[:, 1], track.width_left(s), track.width_right(s), car)
    e_F, e_R = friction_ellipse_scaled(X.T, car, cons)
    box = input_box(physical_inputs(X.T, U.T), cons)
    return {
        "periodicity": float(np.max(np.abs(period))),
        "dynamics": float(np.max(np.abs(links))) if len(links) else 0.0,
        "track": float(max(np.max(g_L), np.max(g_R))),
        "ellipse": float(max(np.max(e_F), np.max(e_R))),
        "box": float(np.max(box)),
        "v_x_max": float(np.max(X[:, 2]) - cons.v_x_max),
    }


def solve_lto(track: Track, car: CarParams, cons: ConstraintParams, cfg: LtoConfig,
              warm_start: RaceLine | None = None, with_path: bool = True) -> RaceLine:
    """Solve the periodic lap-time problem and package the result as a :class:`RaceLine`."""
    problem = build_lto(track, car, cons, cfg)
    s, ds = stage_grid(track, cfg.N)
    kappa = problem.params[:, 0]
    if warm_start is not None:
        guess, duals = (warm_start.X, warm_start.U), warm_start.duals
        opts = nlpmod.SolveOptions(warm_start=duals is not None, mu_init=1e-9)
    else:
        guess, duals = initial_guess(track, cfg, car), None
        opts = nlpmod.SolveOptions()
    sol = nlpmod.solve(problem, guess, cfg.tolerances, opts, duals=duals)
    log.info("LTO solved: %s", sol.stats())
    res = trajectory_residuals(sol.X, sol.U, s, kappa, ds, track, car, cons)
    path = None
    if with_path:
        path = reparametrize_raceline(track, s, sol.X[:, 0], sol.X[:, 1], sol.X[:, 2])
    return RaceLine(
        s=s, X=sol.X, U=sol.U, kappa=kappa, ds=ds, lap_time=lap_time(sol.X, kappa, ds),
        path=path, residuals=res, solver=sol.stats(), duals=(sol.lam_g, sol.lam_x),
    )
