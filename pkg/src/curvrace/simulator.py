"""Closed-loop simulation of the controller against the bicycle-model plant.

The plant state lives in the curvilinear frame of the track centerline and
is integrated with RK4 sub-steps that look curvature up continuously.  At
every control step the plant pose is projected onto the controller's
reference path (centerline or race line), the controller is called, and its
input is applied after an optional latency of whole control steps.

Run logs are column-oriented.  The CSV export holds only simulation data so
that reruns are byte-identical; wall-clock solve times go to the JSON
summary.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .constraints import corridor_residuals, friction_ellipse_scaled
from .mpc_curv import MpcConfig, MpcController
from .params import CarParams, ConstraintParams
from .track import ProjectionError, RaceLinePath, Track
from .vehicle import ModelDomainError, S, body_accelerations

log = logging.getLogger(__name__)

RUNLOG_FORMAT = "curvrace-runlog"
RUNLOG_VERSION = 1

COLUMNS = (
    "step", "t", "s", "lap", "n", "mu", "v_x", "v_y", "r", "delta", "T_cmd",
    "x", "y", "heading", "ref_s", "ref_n", "ref_mu",
    "d_delta", "d_T", "a_long", "a_lat", "g_L", "g_R", "e_F", "e_R",
    "solver_ok", "iterations", "slack", "v_ref_T", "v_x_T",
)
COLUMN_DOC = {
    "step": "control step index",
    "t": "time at the start of the step [s]",
    "s": "centerline progress, unwrapped [m]",
    "lap": "completed laps at the start of the step",
    "n": "lateral offset from the centerline, left positive [m]",
    "mu": "heading relative to the centerline [rad]",
    "v_x": "body longitudinal speed [m/s]",
    "v_y": "body lateral speed [m/s]",
    "r": "yaw rate [rad/s]",
    "delta": "steering angle [rad]",
    "T_cmd": "driver command [-]",
    "x": "global x [m]",
    "y": "global y [m]",
    "heading": "global heading [rad]",
    "ref_s": "progress on the controller reference [m]",
    "ref_n": "lateral offset from the controller reference [m]",
    "ref_mu": "heading relative to the controller reference [rad]",
    "d_delta": "applied steering rate [rad/s]",
    "d_T": "applied driver-command rate [1/s]",
    "a_long": "body-frame longitudinal acceleration [m/s^2]",
    "a_lat": "body-frame lateral acceleration [m/s^2]",
    "g_L": "left track-bound residual on the physical track [m]",
    "g_R": "right track-bound residual on the physical track [m]",
    "e_F": "front friction-ellipse residual, scaled [-]",
    "e_R": "rear friction-ellipse residual, scaled [-]",
    "solver_ok": "1 if the controller solve met its contract",
    "iterations": "solver iterations",
    "slack": "corridor slack at the first predicted stage [m]",
    "v_ref_T": "terminal speed bound (inf when disabled) [m/s]",
    "v_x_T": "predicted terminal speed [m/s]",
}


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Closed-loop run settings.

    Attributes:
        plant: plant parameters; ``None`` uses the controller's.
        substeps: RK4 sub-steps per control step.
        n_laps: laps to complete before stopping.
        x0: initial time-domain state in the centerline frame; ``None`` starts
            on the centerline at ``v_start``.
        seed: seed of the measurement-noise generator.
        latency: actuator delay in whole control steps.
        noise_std: standard deviations of additive noise on the measured
            ``(n, mu, v_x, v_y, r)``; zeros disable noise.
        max_lap_time: a lap taking longer than this aborts the run [s].
        v_start: initial speed when ``x0`` is not given [m/s].
    """

    plant: CarParams | None = None
    substeps: int = 10
    n_laps: int = 1
    x0: tuple | None = None
    seed: int = 0
    latency: int = 0
    noise_std: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    max_lap_time: float = 120.0
    v_start: float = 5.0

    def __post_init__(self):
        if self.substeps < 1:
            raise SimConfigError("substeps must be >= 1")
        if self.n_laps < 1:
            raise SimConfigError("n_laps must be >= 1")
        if self.latency < 0:
            raise SimConfigError("latency must be >= 0")
        if len(self.noise_std) != 5 or min(self.noise_std) < 0:
            raise SimConfigError("noise_std needs five non-negative entries")
        if self.x0 is not None and len(self.x0) != 8:
            raise SimConfigError("x0 must be an 8-component time-domain state")


@dataclass
class RunLog:
    """Time series and lap data of one closed-loop run."""

    columns: dict
    lap_times: list
    crossing_times: list
    crash: dict | None
    dt: float
    track_length: float
    solve_times: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.columns["t"])

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]


def start_state(track: Track, car: CarParams, v: float, s: float = 0.0) -> np.ndarray:
    """Centerline state at speed ``v`` with kinematic steering and drag-balancing drive."""
    kappa = track.kappa(s)
    delta = math.atan(kappa * car.wheelbase)
    T_cmd = (car.C_r0 + car.C_r2 * v * v) / car.C_m
    return np.array([s, 0.0, 0.0, v, 0.0, kappa * v, delta, T_cmd])


def _crossings(s_prev: float, s_new: float, t_prev: float, dt: float, length: float):
    """Times at which progress passes a multiple of ``length`` within one step."""
    out = []
    k_prev = math.floor(s_prev / length)
    k_new = math.floor(s_new / length)
    for k in range(k_prev + 1, k_new + 1):
        frac = (k * length - s_prev) / (s_new - s_prev)
        out.append(t_prev + frac * dt)
    return out


def run_closed_loop(mpc_cfg: MpcConfig, sim_cfg: SimConfig, track: Track, car: CarParams,
                    cons: ConstraintParams, reference: Track | None = None) -> RunLog:
    """Simulate the controller on ``track`` until ``n_laps`` are done or the car crashes.

    ``reference`` is the controller's path: the centerline (default) or a
    :class:`RaceLinePath`.  A crash (car center outside the track, failed
    projection onto the reference, or a model domain error) ends the run
    with a crash record.
    """
    if not track.closed:
        raise SimConfigError("closed-loop laps need a closed track")
    reference = track if reference is None else reference
    plant = sim_cfg.plant or car
    packed = kernels.pack_params(plant)
    ctl = MpcController(reference, car, cons, mpc_cfg)
    dt = mpc_cfg.dt
    rng = np.random.default_rng(sim_cfg.seed)
    noise = np.asarray(sim_cfg.noise_std, dtype=float)

    x = np.asarray(sim_cfg.x0, dtype=float) if sim_cfg.x0 is not None else start_state(track, plant, sim_cfg.v_start)
    x = x.copy()
    rows = {c: [] for c in COLUMNS}
    solve_times = []
    crossings: list = []
    crash = None
    pending = deque([np.zeros(2)] * sim_cfg.latency)
    hint = None
    same_frame = reference is track
    L = track.length
    s_start = float(x[S])
    max_steps = int(math.ceil(sim_cfg.n_laps * sim_cfg.max_lap_time / dt))
    u_last = np.zeros(2)

    for k in range(max_steps):
        t = k * dt
        gx, gy, hd = track.from_curvilinear(x[S], x[1], x[2])
        gx, gy, hd = float(gx), float(gy), float(hd)
        try:
            if same_frame:
                rs, rn, rmu = float(track.wrap_s(x[S])), float(x[1]), float(x[2])
            elif hint is None:
                rs, rn, rmu = reference.project_global(gx, gy, hd)
            else:
                rs, rn, rmu = reference.to_curvilinear(gx, gy, hd, hint)
        except ProjectionError as exc:
            crash = {"step": k, "t": t, "s": float(x[S]), "reason": f"projection: {exc}"}
            break
        hint = rs
        x_hat = np.concatenate([[rs, rn, rmu], x[3:]])
        if np.any(noise > 0):
            x_hat[1:6] += noise * rng.standard_normal(5)
            x_hat[3] = max(x_hat[3], mpc_cfg.v_x_min)

        t0 = time.perf_counter()
        rec = ctl.step(x_hat)
        solve_times.append(time.perf_counter() - t0)
        pending.append(rec.u_applied)
        u = pending.popleft()
        u_last = u

        kappa = track.kappa(x[S])
        a_long, a_lat = body_accelerations(x, u, kappa, plant)
        g_L, g_R = corridor_residuals(x[1], x[2], track.width_left(x[S]), track.width_right(x[S]), plant)
        e_F, e_R = friction_ellipse_scaled(x, plant, cons)
        values = {
            "step": k, "t": t, "s": x[S], "lap": len(crossings), "n": x[1], "mu": x[2], "v_x": x[3],
            "v_y": x[4], "r": x[5], "delta": x[6], "T_cmd": x[7], "x": gx, "y": gy, "heading": hd,
            "ref_s": rs, "ref_n": rn, "ref_mu": rmu, "d_delta": u[0], "d_T": u[1],
            "a_long": a_long, "a_lat": a_lat, "g_L": g_L, "g_R": g_R, "e_F": e_F, "e_R": e_R,
            "solver_ok": int(rec.success), "iterations": rec.iterations, "slack": rec.U[1, 2] if len(rec.U) > 1 else 0.0,
            "v_ref_T": rec.v_ref_T, "v_x_T": rec.X[-1, 2],
        }
        for c in COLUMNS:
            rows[c].append(float(values[c]))

        try:
            x_new = kernels.rk4_plant(x, u, packed, track, dt, sim_cfg.substeps)
        except ModelDomainError as exc:
            crash = {"step": k, "t": t, "s": float(x[S]), "reason": f"model domain: {exc}"}
            break
        crossings.extend(_crossings(x[S] - s_start, x_new[S] - s_start, t, dt, L))
        x = x_new
        n_L, n_R = track.width_left(x[S]), track.width_right(x[S])
        if not (-n_R < x[1] < n_L) or not np.all(np.isfinite(x)):
            crash = {"step": k + 1, "t": t + dt, "s": float(x[S]), "n": float(x[1]), "reason": "left the track"}
            break
        if len(crossings) >= sim_cfg.n_laps:
            break
        last = crossings[-1] if crossings else 0.0
        if t + dt - last > sim_cfg.max_lap_time:
            crash = {"step": k + 1, "t": t + dt, "s": float(x[S]), "reason": "lap time limit exceeded"}
            break

    cols = {c: np.asarray(v, dtype=float) for c, v in rows.items()}
    bounds = [0.0] + crossings
    lap_times = [b - a for a, b in zip(bounds[:-1], bounds[1:])]
    meta = {
        "reference": "raceline" if isinstance(reference, RaceLinePath) else "centerline",
        "T_horizon": mpc_cfg.T_horizon,
        "dt": dt,
        "terminal_constraint": mpc_cfg.terminal_constraint_enabled,
        "substeps": sim_cfg.substeps,
        "seed": sim_cfg.seed,
        "latency": sim_cfg.latency,
        "final_state": [float(v) for v in x],
        "last_input": [float(v) for v in u_last],
    }
    return RunLog(cols, lap_times, crossings, crash, dt, L, np.asarray(solve_times), meta)


def lap_metrics(runlog: RunLog, budget: float | None = None) -> dict:
    """Aggregate a run: lap times, solve-time statistics, accelerations and violation counts.

    ``budget`` defaults to the control period.
    """
    if len(runlog) == 0:
        raise ValueError("empty run log")
    c = runlog.columns
    budget = runlog.dt if budget is None else budget
    st = runlog.solve_times
    over = st > budget
    return {
        "n_steps": len(runlog),
        "laps_completed": len(runlog.lap_times),
        "lap_times": [float(v) for v in runlog.lap_times],
        "best_lap": float(min(runlog.lap_times)) if runlog.lap_times else None,
        "crashed": runlog.crash is not None,
        "crash": runlog.crash,
        "solve_time_mean": float(np.mean(st)) if st.size else None,
        "solve_time_max": float(np.max(st)) if st.size else None,
        "solve_time_budget": float(budget),
        "over_budget_fraction": float(np.mean(over)) if st.size else None,
        "solver_failures": int(np.sum(c["solver_ok"] == 0)),
        "solver_failure_fraction": float(np.mean(c["solver_ok"] == 0)),
        "mean_iterations": float(np.mean(c["iterations"])),
        "max_abs_a_lat": float(np.max(np.abs(c["a_lat"]))),
        "max_abs_a_long": float(np.max(np.abs(c["a_long"]))),
        "max_abs_ref_n": float(np.max(np.abs(c["ref_n"]))),
        "track_violations": int(np.sum((c["g_L"] > 0) | (c["g_R"] > 0))),
        "ellipse_violations": int(np.sum((c["e_F"] > 0) | (c["e_R"] > 0))),
        "terminal_violations": int(np.sum(c["v_x_T"] > c["v_ref_T"] + 1e-6)),
    }


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(runlog: RunLog, path) -> None:
    """Write the per-step columns with a versioned comment header."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# {RUNLOG_FORMAT} v{RUNLOG_VERSION}\n")
        for name in COLUMNS:
            fh.write(f"# {name}: {COLUMN_DOC[name]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        cols = [runlog.columns[c] for c in COLUMNS]
        for i in range(len(runlog)):
            w.writerow([_fmt(col[i]) for col in cols])


def read_csv(path) -> dict:
    """Read a run-log CSV back into columns; checks the format header."""
    path = Path(path)
    with path.open() as fh:
        first = fh.readline().strip()
        if first != f"# {RUNLOG_FORMAT} v{RUNLOG_VERSION}":
            raise ValueError(f"{path}: not a {RUNLOG_FORMAT} v{RUNLOG_VERSION} file")
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    data = np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def summary_document(runlog: RunLog, budget: float | None = None) -> dict:
    """Compact summary: metrics, crossings, metadata and the wall-clock solve times."""
    return {
        "format": RUNLOG_FORMAT,
        "version": RUNLOG_VERSION,
        "metrics": lap_metrics(runlog, budget),
        "crossing_times": [float(v) for v in runlog.crossing_times],
        "meta": runlog.meta,
        "solve_times": [float(v) for v in runlog.solve_times],
    }


def write_summary(runlog: RunLog, path, budget: float | None = None) -> None:
    Path(path).write_text(json.dumps(summary_document(runlog, budget), indent=1))
