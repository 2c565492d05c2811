import numpy as np
import pytest

from curvrace import nlp, tracks
from curvrace.lto import (
    LtoConfig, LtoConfigError, build_lto, initial_guess, lap_time, solve_lto, stage_functions,
    stage_grid, trajectory_residuals,
)
from curvrace.track import TrackSpec, build_track
from curvrace.vehicle import step_space_euler


@pytest.fixture(scope="module")
def rect_track():
    return build_track(tracks.rounded_rectangle())


@pytest.fixture(scope="module")
def rect_raceline(rect_track, car, cons):
    return solve_lto(rect_track, car, cons, LtoConfig(N=300))


# -- problem assembly ---------------------------------------------------------------------

@pytest.mark.parametrize("N", [10, 57, 200])
def test_variable_count(circle_track, car, cons, N):
    prob = build_lto(circle_track, car, cons, LtoConfig(N=N))
    assert prob.structure.n_var == (N + 1) * (7 + 2)
    lb, _ = prob.bounds()
    assert lb.size == (N + 1) * 9


def test_stage_grid_covers_lap(circle_track):
    s, ds = stage_grid(circle_track, 99)
    assert len(s) == 100
    assert len(s) * ds == pytest.approx(circle_track.length, rel=1e-12)


def test_track_too_short_for_N(car, cons):
    trk = build_track(tracks.circle(radius=5.0))
    with pytest.raises(LtoConfigError):
        build_lto(trk, car, cons, LtoConfig(N=1000))


def test_config_validation():
    with pytest.raises(LtoConfigError):
        LtoConfig(N=5)
    with pytest.raises(LtoConfigError):
        LtoConfig(q_beta=-1.0)
    with pytest.raises(LtoConfigError):
        LtoConfig(v_init=0.5)


def test_stage_cost_at_constant_speed_on_straight(car, cons):
    cost, _, _ = stage_functions(car, cons, LtoConfig(N=100), ds=0.4)
    v = 7.0
    x = [0, 0, v, 0, 0, 0, (car.C_r0 + car.C_r2 * v**2) / car.C_m]
    assert float(cost(x, [0, 0], [0.0, 1.0, 1.0])) == pytest.approx(0.4 / v, rel=1e-12)


def test_point_to_point_variant(rect_track, car, cons):
    cfg = LtoConfig(N=100)
    X0, U0 = initial_guess(rect_track, cfg, car)
    prob = build_lto(rect_track, car, cons, cfg, cyclic=False, x_init=X0[0])
    st = prob.structure
    assert not st.cyclic
    assert st.n_links == cfg.N * 7
    sol = nlp.solve(prob, (X0, U0))
    np.testing.assert_allclose(sol.X[0], X0[0], atol=1e-9)
    assert sol.success


def test_open_track_needs_point_to_point(car, cons):
    pts = np.column_stack([np.linspace(0, 100, 101), np.zeros(101)])
    trk = build_track(TrackSpec(pts, 1.5, 1.5, closed=False))
    with pytest.raises(LtoConfigError):
        build_lto(trk, car, cons, LtoConfig(N=50))


# -- initial guess ----------------------------------------------------------------------------

def test_guess_is_consistent_on_straights(rect_track, car, cons):
    cfg = LtoConfig(N=300)
    X, U = initial_guess(rect_track, cfg, car)
    s, ds = stage_grid(rect_track, cfg.N)
    # on a straight (kappa = 0) each guess stage maps exactly onto the next
    nxt = step_space_euler(X.T, U.T, np.zeros(len(s)), ds, car).T
    np.testing.assert_allclose(nxt[:-1], X[1:], rtol=0, atol=1e-12)
    kappa = rect_track.kappa(s)
    res = trajectory_residuals(X, U, s, kappa, ds, rect_track, car, cons)
    assert res["track"] < 0
    np.testing.assert_array_equal(X[:, [0, 1, 3, 4, 5]], 0.0)
    np.testing.assert_array_equal(U, 0.0)


# -- solutions ------------------------------------------------------------------------------

def test_raceline_invariants(rect_raceline, cons):
    rl = rect_raceline
    tol = 1e-6
    assert rl.residuals["periodicity"] <= tol
    assert rl.residuals["dynamics"] <= tol
    for key in ("track", "ellipse", "box", "v_x_max"):
        assert rl.residuals[key] <= tol, key
    assert np.max(rl.v_x) <= cons.v_x_max + tol
    assert rl.lap_time == pytest.approx(lap_time(rl.X, rl.kappa, rl.ds), rel=1e-12)
    assert rl.solver["success"]


def test_lap_time_beats_centerline_guess(rect_track, rect_raceline, car):
    X, _ = initial_guess(rect_track, LtoConfig(N=300), car)
    assert rect_raceline.lap_time <= lap_time(X, rect_raceline.kappa, rect_raceline.ds)


def test_binding_grip_in_corners(rect_raceline, car, cons):
    # the most grip-limited stage sits in or within five stages of a corner
    from curvrace.constraints import friction_ellipse_scaled
    e_F, e_R = friction_ellipse_scaled(rect_raceline.X.T, car, cons)
    worst = np.argmax(np.maximum(e_F, e_R))
    kappa = np.abs(rect_raceline.kappa)
    near = np.abs((np.arange(len(kappa)) - worst + len(kappa) // 2) % len(kappa) - len(kappa) // 2) <= 5
    assert kappa[near].max() >= 0.9 / 8.0


def test_oval_straights_reach_speed_cap(oval_raceline, oval_track, cons):
    v = oval_raceline.v_x
    assert v.max() == pytest.approx(cons.v_x_max, abs=1e-4)
    # a sustained run of stages at the cap on the straights
    at_cap = (v >= cons.v_x_max - 1e-3) & (np.abs(oval_raceline.kappa) < 1e-6)
    assert at_cap.sum() * oval_raceline.ds >= 20.0


def test_warm_start_reproduces_solution(rect_track, rect_raceline, car, cons):
    again = solve_lto(rect_track, car, cons, LtoConfig(N=300), warm_start=rect_raceline)
    assert again.solver["iterations"] <= 5
    assert again.lap_time == pytest.approx(rect_raceline.lap_time, rel=1e-6)


def test_mirrored_track_same_lap_time(car, cons):
    spec = tracks.hairpin_track()
    mirrored = TrackSpec(spec.points * [-1.0, 1.0], spec.width_right, spec.width_left)
    cfg = LtoConfig(N=300)
    a = solve_lto(build_track(spec), car, cons, cfg, with_path=False)
    b = solve_lto(build_track(mirrored), car, cons, cfg, with_path=False)
    # the two problems are exact mirror images, but the solver may settle in
    # different nearby local optima; only the lap time is compared
    assert b.lap_time == pytest.approx(a.lap_time, rel=5e-3)


def test_tighter_corridor_never_faster(car, cons):
    times = []
    for width in (2.0, 1.5, 1.0):
        trk = build_track(tracks.rounded_rectangle(width=width))
        times.append(solve_lto(trk, car, cons, LtoConfig(N=200), with_path=False).lap_time)
    assert times[0] <= times[1] * (1 + 1e-6)
    assert times[1] <= times[2] * (1 + 1e-6)
    assert times[0] < times[2]


def test_document_fields(rect_raceline):
    doc = rect_raceline.to_document()
    for key in ("s", "n", "mu", "v_x", "v_y", "r", "delta", "T_cmd", "d_delta", "d_T", "lap_time"):
        assert key in doc
    assert len(doc["n"]) == 301
