import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvrace.vehicle import (
    ModelDomainError, SingularityError, SpatialState, TimeState, dynamics_space, dynamics_time,
    pacejka_lateral, progress_rate, slip_cost, step_space_euler, step_time_rk4, tire_and_drivetrain,
)


def generic_state():
    return np.array([3.0, 0.4, 0.1, 9.0, 0.3, 0.6, 0.08, 0.2])


def oracle_dynamics(x, u, kappa, p):
    """Scalar re-implementation of the curvilinear single-track model."""
    s, n, mu, vx, vy, r, delta, T = (float(v) for v in x)
    dd, dT = u
    a_F = math.atan((vy + p.l_F * r) / vx) - delta
    a_R = math.atan((vy - p.l_R * r) / vx)
    F_NF = p.l_R / (p.l_F + p.l_R) * p.m * p.g
    F_NR = p.l_F / (p.l_F + p.l_R) * p.m * p.g
    # restoring convention: the lateral force opposes the slip angle
    FyF = F_NF * p.D_F * math.sin(p.C_F * math.atan(p.B_F * -a_F))
    FyR = F_NR * p.D_R * math.sin(p.C_R * math.atan(p.B_R * -a_R))
    Fx = p.C_m * T - p.C_r0 - p.C_r2 * vx * vx
    Mtv = p.p_tv * (math.tan(delta) * vx / (p.l_F + p.l_R) - r)
    sdot = (vx * math.cos(mu) - vy * math.sin(mu)) / (1 - n * kappa)
    return np.array([
        sdot,
        vx * math.sin(mu) + vy * math.cos(mu),
        r - kappa * sdot,
        (Fx - FyF * math.sin(delta) + p.m * vy * r) / p.m,
        (FyR + FyF * math.cos(delta) - p.m * vx * r) / p.m,
        (FyF * p.l_F * math.cos(delta) - FyR * p.l_R + Mtv) / p.I_z,
        dd,
        dT,
    ])


class ConstantTrack:
    """Minimal stand-in exposing a constant curvature."""

    def __init__(self, kappa):
        self._k = kappa

    def kappa(self, s):
        return self._k + 0.0 * np.asarray(s, dtype=float)


# -- tire_and_drivetrain ----------------------------------------------------

def test_zero_slip_symmetry(car):
    f = tire_and_drivetrain([0, 0, 0, 10.0, 0.0, 0.0, 0.05, 0.0], car)
    assert f.alpha_F == pytest.approx(-0.05, abs=1e-15)
    assert f.alpha_R == 0.0
    assert f.F_yR == 0.0


def test_zero_steer_torque_vectoring(car):
    r = 0.7
    f = tire_and_drivetrain([0, 0, 0, 10.0, 0.0, r, 0.0, 0.0], car)
    assert f.M_tv == pytest.approx(-car.p_tv * r, rel=1e-15)


def test_pacejka_formula_oracle():
    B, C, D, F_N, alpha = 10.0, 1.5, 1.0, 600.0, 0.08
    expected = F_N * D * math.sin(C * math.atan(B * alpha))
    assert pacejka_lateral(alpha, B, C, D, F_N) == pytest.approx(expected, rel=1e-12)


def test_rear_force_through_model(car):
    # choose m so that the static rear load is 600 N
    wb = car.l_F + car.l_R
    p = car.replace(B_R=10.0, C_R=1.5, D_R=1.0, m=600.0 * wb / (car.l_F * car.g))
    assert p.F_NR == pytest.approx(600.0, rel=1e-12)
    v_x = 10.0
    v_y = math.tan(0.08) * v_x  # r = 0 -> alpha_R = 0.08
    f = tire_and_drivetrain([0, 0, 0, v_x, v_y, 0.0, 0.0, 0.0], p)
    assert f.alpha_R == pytest.approx(0.08, rel=1e-12)
    expected = -600.0 * 1.0 * math.sin(1.5 * math.atan(10.0 * 0.08))
    assert f.F_yR == pytest.approx(expected, rel=1e-12)


def test_normal_load_split(car):
    f = tire_and_drivetrain(generic_state(), car)
    assert f.F_NF + f.F_NR == pytest.approx(car.m * car.g, rel=1e-14)
    assert f.F_NF == pytest.approx(car.l_R / (car.l_F + car.l_R) * car.m * car.g, rel=1e-14)


def test_drivetrain_force(car):
    x = generic_state()
    f = tire_and_drivetrain(x, car)
    assert f.F_M == pytest.approx(car.C_m * x[7])
    assert f.F_x == pytest.approx(car.C_m * x[7] - car.C_r0 - car.C_r2 * x[3] ** 2)


def test_tire_requires_positive_speed(car):
    with pytest.raises(ModelDomainError):
        tire_and_drivetrain([0, 0, 0, 0.0, 0, 0, 0, 0], car)


@given(st.floats(-0.5, 0.5))
def test_tire_force_is_odd(alpha):
    a = pacejka_lateral(alpha, 9.0, 1.45, 1.3, 1000.0)
    b = pacejka_lateral(-alpha, 9.0, 1.45, 1.3, 1000.0)
    assert a == pytest.approx(-b, abs=1e-9)


@given(st.floats(-0.4, 0.4), st.floats(1.0, 20.0))
def test_torque_vectoring_zero_at_target(car, delta, v_x):
    r_t = math.tan(delta) * v_x / (car.l_F + car.l_R)
    f = tire_and_drivetrain([0, 0, 0, v_x, 0.0, r_t, delta, 0.0], car)
    assert f.M_tv == pytest.approx(0.0, abs=1e-9)


# -- dynamics_time ------------------------------------------------------------

def test_straight_track_decoupling(car):
    x = np.array([0.0, 0.7, 0.0, 8.0, 0.0, 0.3, 0.0, 0.1])
    d = dynamics_time(x, [0.0, 0.0], 0.0, car)
    assert d[0] == pytest.approx(8.0)
    assert d[1] == pytest.approx(0.0, abs=1e-15)
    assert d[2] == pytest.approx(0.3)


def test_singularity_at_curvature_center(car):
    kappa = 0.1
    x = np.array([0.0, 1 / kappa, 0.0, 8.0, 0.0, 0.0, 0.0, 0.0])
    with pytest.raises(SingularityError):
        dynamics_time(x, [0.0, 0.0], kappa, car)


def test_dynamics_time_domain_error(car):
    with pytest.raises(ModelDomainError):
        dynamics_time([0, 0, 0, -1.0, 0, 0, 0, 0], [0, 0], 0.0, car)


@pytest.mark.parametrize("seed", range(5))
def test_dynamics_time_duplicate_oracle(car, seed):
    rng = np.random.default_rng(seed)
    x = np.array([rng.uniform(0, 100), rng.uniform(-1, 1), rng.uniform(-0.4, 0.4), rng.uniform(2, 17),
                  rng.uniform(-1, 1), rng.uniform(-1.5, 1.5), rng.uniform(-0.4, 0.4), rng.uniform(-1, 1)])
    u = rng.uniform(-2, 2, 2)
    kappa = rng.uniform(-0.15, 0.15)
    got = dynamics_time(x, u, kappa, car)
    want = oracle_dynamics(x, u, kappa, car)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12 * np.max(np.abs(want)))


def test_state_dataclasses_roundtrip():
    ts = TimeState.from_array(generic_state())
    np.testing.assert_array_equal(ts.to_array(), generic_state())
    sp = ts.spatial()
    assert isinstance(sp, SpatialState)
    np.testing.assert_array_equal(sp.with_progress(ts.s).to_array(), generic_state())


# -- dynamics_space -------------------------------------------------------------

def test_space_scalar_division(car):
    # v_x = 2, mu chosen so that n-dot = v_x sin(mu) = 0.5 and s-dot = v_x cos(mu) / (1 - n kappa) = 2
    mu = math.asin(0.25)
    v_x = 2.0
    kappa = 0.1
    n = 1 / kappa * (1 - v_x * math.cos(mu) / 2.0)
    x = np.array([n, mu, v_x, 0.0, 0.0, 0.0, 0.0])
    assert progress_rate(np.concatenate([[0.0], x]), kappa) == pytest.approx(2.0)
    d = dynamics_space(x, [0, 0], kappa, car)
    assert d[0] == pytest.approx(0.25, rel=1e-12)


def test_space_singular_when_stopped(car):
    # heading perpendicular to the path: s-dot = 0
    x = np.array([0.0, math.pi / 2, 5.0, 0.0, 0.0, 0.0, 0.0])
    with pytest.raises(SingularityError):
        dynamics_space(x, [0, 0], 0.0, car)


def test_space_multiply_back_identity(car):
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = np.array([0.0, rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(2, 17),
                      rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.4, 0.4), rng.uniform(-1, 1)])
        u = rng.uniform(-2, 2, 2)
        kappa = rng.uniform(-0.15, 0.15)
        ft = dynamics_time(x, u, kappa, car)
        fs = dynamics_space(x[1:], u, kappa, car)
        np.testing.assert_allclose(ft[0] * fs, ft[1:], rtol=1e-12, atol=1e-12 * np.max(np.abs(ft)))


# -- step_time_rk4 ---------------------------------------------------------------

def test_rk4_exact_on_constant_derivative(car):
    # steady straight motion: only s grows (at constant rate)
    v = 10.0
    T_cmd = (car.C_r0 + car.C_r2 * v * v) / car.C_m
    x = np.array([5.0, 0.2, 0.0, v, 0.0, 0.0, 0.0, T_cmd])
    f = dynamics_time(x, [0, 0], 0.0, car)
    got = step_time_rk4(x, [0.0, 0.0], ConstantTrack(0.0), 0.025, car)
    np.testing.assert_allclose(got, x + 0.025 * f, rtol=0, atol=1e-13)


def _euler(x, u, kappa, dt, car, n):
    h = dt / n
    for _ in range(n):
        x = x + h * dynamics_time(x, u, kappa, car)
    return x


def test_rk4_against_fine_euler(car):
    # near-steady cornering with small input rates; 1000 Euler sub-steps as reference
    kappa, v = 0.05, 10.0
    x = np.array([0.0, 0.2, 0.02, v, 0.0, kappa * v, math.atan(kappa * car.wheelbase),
                  (car.C_r0 + car.C_r2 * v * v) / car.C_m])
    u = np.array([0.1, 0.2])
    got = step_time_rk4(x, u, ConstantTrack(kappa), 0.025, car)
    ref = _euler(x, u, kappa, 0.025, car, 1000)
    assert np.max(np.abs(got[:2] - ref[:2])) <= 1e-6


def test_rk4_convergence_order(car, circle_track):
    x = np.array([3.0, 0.2, 0.05, 10.0, 0.1, 0.4, 0.05, 0.1])
    u = np.array([0.3, 0.5])
    t_end = 0.2

    def run(dt):
        y = x.copy()
        for _ in range(int(round(t_end / dt))):
            y = step_time_rk4(y, u, ConstantTrack(0.04), dt, car)
        return y

    ref = run(0.2 / 400)
    errs = [np.max(np.abs(run(dt) - ref)) for dt in (0.05, 0.025, 0.0125)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 3.8, orders


def test_rk4_rejects_nonpositive_dt(car):
    with pytest.raises(ValueError):
        step_time_rk4(generic_state(), [0, 0], ConstantTrack(0.0), 0.0, car)


# -- step_space_euler ----------------------------------------------------------------

def test_space_euler_zero_step(car):
    x = generic_state()[1:]
    np.testing.assert_array_equal(step_space_euler(x, [0.1, 0.1], 0.05, 0.0, car), x)


def test_space_euler_constant_speed_elapsed_time(car):
    v = 10.0
    T_cmd = (car.C_r0 + car.C_r2 * v * v) / car.C_m
    x = np.array([0.0, 0.0, v, 0.0, 0.0, 0.0, T_cmd])
    L, ds = 50.0, 0.5
    t = 0.0
    for _ in range(int(L / ds)):
        t += ds / progress_rate(np.concatenate([[0.0], x]), 0.0)
        x = step_space_euler(x, [0, 0], 0.0, ds, car)
    assert t == pytest.approx(L / v, rel=1e-12)


def test_space_euler_second_order_local_error(car):
    # straight track, zero heading, constant inputs: the exact segment follows from
    # a very fine integration of the same ODE; Euler's one-step error is O(ds^2)
    x = np.array([0.1, 0.02, 10.0, 0.1, 0.2, 0.05, 0.3])
    u = np.array([0.2, 0.5])

    def exact(ds, n=4000):
        y = x.copy()
        h = ds / n
        for _ in range(n):
            k1 = dynamics_space(y, u, 0.0, car)
            k2 = dynamics_space(y + 0.5 * h * k1, u, 0.0, car)
            k3 = dynamics_space(y + 0.5 * h * k2, u, 0.0, car)
            k4 = dynamics_space(y + h * k3, u, 0.0, car)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        return y

    errs = [np.max(np.abs(step_space_euler(x, u, 0.0, ds, car) - exact(ds))) for ds in (0.2, 0.1)]
    assert math.log2(errs[0] / errs[1]) == pytest.approx(2.0, abs=0.2)


# -- slip_cost -------------------------------------------------------------------------

def test_slip_cost_zero(car):
    assert slip_cost([0, 0, 0, 10.0, 0.0, 0.0, 0.0, 0.0], car, 1.0) == 0.0


def test_slip_cost_matched(car):
    delta = 0.1
    beta = math.atan(delta * car.l_R / (car.l_F + car.l_R))
    v_x = 10.0
    x = [0, 0, 0, v_x, v_x * math.tan(beta), 0.0, delta, 0.0]
    assert slip_cost(x, car, 1.0) == pytest.approx(0.0, abs=1e-20)


def test_slip_cost_oracle(car):
    x = [0, 0, 0, 10.0, 0.5, 0.0, 0.0, 0.0]
    assert slip_cost(x, car, 1.0) == pytest.approx(math.atan(0.05) ** 2, rel=1e-14)


def test_slip_cost_domain(car):
    with pytest.raises(ModelDomainError):
        slip_cost([0, 0, 0, 0.0, 0.0, 0.0, 0.0, 0.0], car, 1.0)


# -- time/space equivalence ------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.3, 0.3), st.floats(3.0, 16.0), st.floats(-0.08, 0.08))
def test_space_time_identity_property(car, n, mu, v_x, kappa):
    x = np.array([0.0, n, mu, v_x, 0.2, 0.3, 0.05, 0.1])
    ft = dynamics_time(x, [0.1, 0.2], kappa, car)
    fs = dynamics_space(x[1:], [0.1, 0.2], kappa, car)
    np.testing.assert_allclose(ft[0] * fs, ft[1:], rtol=1e-12, atol=1e-12 * np.max(np.abs(ft)))
