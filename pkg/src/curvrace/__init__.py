"""Curvilinear-coordinate race-line optimisation and model predictive control.

Modules:
    vehicle      single-track model with Pacejka lateral tires, in time and arc-length form
    track        spline tracks, Frenet projection, race-line paths
    constraints  corridor, friction-ellipse and input-box residuals
    nlp          stage-structured NLP layer on casadi/IPOPT
    lto          periodic minimum-lap-time optimisation (the race line)
    mpc_curv     receding-horizon controller with frozen progress and terminal speed bound
    simulator    closed-loop simulation, lap metrics and run logs
    cli          ``curvrace validate | lto | sim``
"""

from .lto import LtoConfig, RaceLine, solve_lto
from .mpc_curv import MpcConfig, MpcController
from .params import CarParams, ConstraintParams, ParameterSet, SolverTolerances, default_params, load_params
from .simulator import RunLog, SimConfig, lap_metrics, run_closed_loop
from .track import RaceLinePath, Track, TrackSpec, build_track, load_track

__version__ = "0.1.0"

__all__ = [
    "CarParams", "ConstraintParams", "LtoConfig", "MpcConfig", "MpcController", "ParameterSet",
    "RaceLine", "RaceLinePath", "RunLog", "SimConfig", "SolverTolerances", "Track", "TrackSpec",
    "build_track", "default_params", "lap_metrics", "load_params", "load_track", "run_closed_loop",
    "solve_lto",
]
