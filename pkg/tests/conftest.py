import time

import numpy as np
import pytest

from curvrace import tracks
from curvrace.lto import LtoConfig, solve_lto
from curvrace.params import default_params
from curvrace.track import build_track

# Acceptance results collected by tests/test_acceptance.py, printed at the end of the run.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def params():
    return default_params()


@pytest.fixture(scope="session")
def car(params):
    return params.car


@pytest.fixture(scope="session")
def cons(params):
    return params.cons


@pytest.fixture(scope="session")
def circle_track():
    return build_track(tracks.circle(radius=25.0, n_points=100, width=2.0))


@pytest.fixture(scope="session")
def hairpin_track():
    return build_track(tracks.hairpin_track())


@pytest.fixture(scope="session")
def oval_track():
    return build_track(tracks.oval())


class TimedRaceLine:
    def __init__(self, raceline, wall):
        self.raceline = raceline
        self.wall = wall


@pytest.fixture(scope="session")
def circle_raceline_500(circle_track, car, cons):
    t0 = time.perf_counter()
    rl = solve_lto(circle_track, car, cons, LtoConfig(N=500))
    return TimedRaceLine(rl, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def circle_raceline_1000(circle_track, car, cons):
    t0 = time.perf_counter()
    rl = solve_lto(circle_track, car, cons, LtoConfig(N=1000))
    return TimedRaceLine(rl, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def hairpin_raceline(hairpin_track, car, cons):
    t0 = time.perf_counter()
    rl = solve_lto(hairpin_track, car, cons, LtoConfig(N=1000))
    return TimedRaceLine(rl, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def oval_raceline(oval_track, car, cons):
    return solve_lto(oval_track, car, cons, LtoConfig(N=400))


def lto_start_state(rl):
    """Time-domain state at the first LTO stage (s = 0)."""
    return tuple(np.concatenate([[0.0], rl.X[0]]))
