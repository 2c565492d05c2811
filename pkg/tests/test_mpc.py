import numpy as np
import pytest

from curvrace import kernels
from curvrace.mpc_curv import (
    MpcConfig, MpcConfigError, MpcController, build_mpc, control_step, fix_progress_profile,
    terminal_speed,
)
from curvrace.lto import LtoConfig, solve_lto
from curvrace.params import SolverTolerances
from curvrace.simulator import SimConfig, lap_metrics, run_closed_loop, start_state
from curvrace.track import TrackSpec, build_track
from conftest import lto_start_state

COLD = dict(jit=False)


@pytest.fixture(scope="module")
def straight():
    pts = np.column_stack([np.linspace(0.0, 300.0, 301), np.zeros(301)])
    return build_track(TrackSpec(pts, 1.5, 1.5, closed=False))


def _cruise(car, v, s=10.0, n=0.0, mu=0.0):
    return np.array([s, n, mu, v, 0.0, 0.0, 0.0, (car.C_r0 + car.C_r2 * v * v) / car.C_m])


def test_config_validation():
    with pytest.raises(MpcConfigError):
        MpcConfig(T_horizon=1)
    with pytest.raises(MpcConfigError):
        MpcConfig(dt=0.0)
    with pytest.raises(MpcConfigError):
        MpcConfig(q_n=-1.0)


def test_terminal_bound_needs_raceline(circle_track, car, cons):
    with pytest.raises(MpcConfigError):
        MpcController(circle_track, car, cons, MpcConfig())
    with pytest.raises(MpcConfigError):
        terminal_speed(circle_track, 3.0)


# -- progress profile -----------------------------------------------------------------

def test_profile_steady_straight_is_arithmetic(straight, car):
    cfg = MpcConfig(terminal_constraint_enabled=False, **COLD)
    prof = fix_progress_profile(None, _cruise(car, 10.0), straight, car, cfg)
    assert prof.shape == (41,)
    np.testing.assert_allclose(np.diff(prof), 0.25, rtol=0, atol=1e-9)


def test_first_profile_is_constant_input_rollout(hairpin_track, car):
    cfg = MpcConfig(T_horizon=10, terminal_constraint_enabled=False, **COLD)
    x = start_state(hairpin_track, car, 8.0, s=120.0)
    x[1], x[4] = 0.2, 0.1
    prof = fix_progress_profile(None, x, hairpin_track, car, cfg)
    packed = kernels.pack_params(car)
    expect = [x[0]]
    for _ in range(10):
        x = kernels.rk4_plant(x, (0.0, 0.0), packed, hairpin_track, cfg.dt, 1)
        expect.append(x[0])
    np.testing.assert_array_equal(prof, expect)


def test_profile_shift_consistency(straight, car, cons):
    # converged steady solve (cruising at the speed cap on a straight): the next
    # profile is the previous one shifted by one stage; the 1e-9 oracle needs
    # solves converged well below the controller's default tolerances
    tight = SolverTolerances(tol_stat=1e-10, tol_feas=1e-11, max_iter=200)
    cfg = MpcConfig(T_horizon=20, terminal_constraint_enabled=False, q_n=10.0, tolerances=tight, **COLD)
    ctl = MpcController(straight, car, cons, cfg)
    x = _cruise(car, cons.v_x_max)
    packed = kernels.pack_params(car)
    records = []
    for _ in range(4):
        rec = ctl.step(x)
        records.append(rec)
        x = kernels.rk4_plant(x, rec.u_applied, packed, straight, cfg.dt, 1)
    a, b = records[-2], records[-1]
    assert a.success and b.success
    np.testing.assert_allclose(b.s_profile[:-1], a.s_profile[1:], rtol=0, atol=1e-9)


def test_profile_repairs_non_monotone_data(straight, car, cons):
    cfg = MpcConfig(T_horizon=5, terminal_constraint_enabled=False, **COLD)
    x = _cruise(car, 5.0)
    rec = control_step(x, None, straight, car, cons, cfg)
    rec.X[:, 2] = 5.0
    rec.X[2, 1] = np.pi / 2 + 0.4  # heading beyond 90 deg: negative progress rate
    prof = fix_progress_profile(rec, x, straight, car, cfg)
    assert np.all(np.diff(prof) >= 0)


# -- problem assembly ----------------------------------------------------------------------

def test_problem_shape_and_pin(straight, car, cons):
    cfg = MpcConfig(terminal_constraint_enabled=False, **COLD)
    x = _cruise(car, 8.0, n=0.3)
    prof = fix_progress_profile(None, x, straight, car, cfg)
    prob = build_mpc(x, prof, straight, car, cons, cfg)
    assert prob.structure.n_nodes == 41
    assert prob.structure.nx == 7  # progress is not a decision variable
    lb, ub = prob.bounds()
    np.testing.assert_allclose(prob.unpack(lb)[0][0], x[1:])
    np.testing.assert_allclose(prob.unpack(ub)[0][0], x[1:])


def test_bad_profiles_rejected(straight, car, cons):
    cfg = MpcConfig(T_horizon=5, terminal_constraint_enabled=False, **COLD)
    x = _cruise(car, 8.0)
    with pytest.raises(MpcConfigError):
        build_mpc(x, np.arange(5.0), straight, car, cons, cfg)
    with pytest.raises(MpcConfigError):
        build_mpc(x, np.array([5, 4, 6, 7, 8, 9.0]), straight, car, cons, cfg)
    with pytest.raises(MpcConfigError):
        build_mpc(x, np.linspace(290, 310, 6), straight, car, cons, cfg)


def test_exact_tracking_without_progress_reward(straight, car, cons):
    # large path weights and no progress term: staying on the line is optimal
    cfg = MpcConfig(T_horizon=20, terminal_constraint_enabled=False, q_n=1e4, q_mu=1e4, **COLD)
    from curvrace import mpc_curv
    cost, _, _ = mpc_curv._stage_functions(car, cons, cfg)
    x = _cruise(car, 8.0)
    on_line = np.array([0, 0, 8.0, 0, 0, 0, x[7]])
    off_line = on_line + [0.01, 0.0, 0, 0, 0, 0, 0]
    p = [0.0, 1.5, 1.5]
    progress = -cfg.dt * 8.0
    assert float(cost(off_line, [0, 0, 0], p)) - progress > float(cost(on_line, [0, 0, 0], p)) - progress
    rec = control_step(x, None, straight, car, cons, cfg)
    assert rec.success
    assert np.max(np.abs(rec.X[:, :2])) <= 1e-6


# -- closed loop on the race line ---------------------------------------------------------------

def _lto_heading_on_path(rl, track):
    """Heading of the LTO trajectory relative to its own path, as a function of path progress.

    The body axis is not the path tangent: it differs by the side-slip angle.
    """
    x, y, h = track.from_curvilinear(rl.s, rl.X[:, 0], rl.X[:, 1])
    proj = np.array([rl.path.project_global(float(a), float(b), float(c)) for a, b, c in zip(x, y, h)])
    order = np.argsort(proj[:, 0])
    s_p, mu_p = proj[order, 0], proj[order, 2]
    L = rl.path.length
    return lambda q: np.interp(np.mod(q, L), s_p, mu_p, period=L)


@pytest.fixture(scope="module")
def fine_hairpin_raceline(hairpin_track, car, cons):
    return solve_lto(hairpin_track, car, cons, LtoConfig(N=2000))


def test_invariance_on_raceline(fine_hairpin_raceline, hairpin_track, car, cons):
    # The race line's forward-Euler steps are first-order accurate in ds, so the
    # continuous plant cannot follow the discrete line exactly; at N = 1000 the
    # heading mismatch alone reaches about 0.015 rad, at N = 2000 about half that.
    rl = fine_hairpin_raceline
    cfg = MpcConfig(T_horizon=40)
    # stop after 100 control steps through the lap-time limit
    sim = SimConfig(x0=lto_start_state(rl), max_lap_time=100 * cfg.dt - 1e-9)
    log = run_closed_loop(cfg, sim, hairpin_track, car, cons, reference=rl.path)
    assert len(log) >= 100
    ref_s, ref_n, ref_mu = (log.column(c)[:100] for c in ("ref_s", "ref_n", "ref_mu"))
    mu_lto = _lto_heading_on_path(rl, hairpin_track)(ref_s)
    # deviation from the LTO trajectory (offset, heading) the car started on
    assert np.max(np.hypot(ref_n, ref_mu - mu_lto)) <= 1e-2


def test_warm_start_on_arc(circle_track, car, cons):
    # steady cornering on the circle centerline: warm-started solves converge fast
    cfg = MpcConfig(T_horizon=40, terminal_constraint_enabled=False)
    log = run_closed_loop(cfg, SimConfig(x0=tuple(start_state(circle_track, car, 6.0)), max_lap_time=4.0),
                          circle_track, car, cons)
    iters = log.column("iterations")
    assert np.all(log.column("solver_ok")[40:] == 1)
    assert np.max(iters[-40:]) <= 5


def test_path_weight_reduces_lateral_deviation(hairpin_track, car, cons):
    # 3-point check: larger path weights never increase the RMS lateral deviation
    rms = []
    for q in (0.0, 5.0, 50.0):
        cfg = MpcConfig(T_horizon=30, terminal_constraint_enabled=False, q_n=q, q_mu=q / 5)
        log = run_closed_loop(cfg, SimConfig(v_start=6.0, max_lap_time=6.0), hairpin_track, car, cons)
        rms.append(float(np.sqrt(np.mean(log.column("n") ** 2))))
    assert rms[0] >= rms[1] >= rms[2]


def test_terminal_bound_respected(hairpin_raceline, hairpin_track, car, cons):
    rl = hairpin_raceline.raceline
    cfg = MpcConfig(T_horizon=40)
    log = run_closed_loop(cfg, SimConfig(x0=lto_start_state(rl)), hairpin_track, car, cons, reference=rl.path)
    ok = log.column("solver_ok") == 1
    assert ok.mean() >= 0.9
    assert np.all(log.column("v_x_T")[ok] <= log.column("v_ref_T")[ok] + 1e-6)
    assert lap_metrics(log)["terminal_violations"] == 0
