"""Pure-Python plant kernels; mirror of ``_kernels.pyx`` used when the extension is unavailable."""

import math

import numpy as np

OK, ERR_VX, ERR_SING = 0, 1, 2
EPS_SING = 1e-6


def _kappa_at(s, kappa_grid, grid_ds, length, closed):
    m = len(kappa_grid)
    if closed:
        s = s % length
        pos = s / grid_ds
        i = int(pos)
        if i >= m:
            i = m - 1
        w = pos - i
        return (1.0 - w) * kappa_grid[i] + w * kappa_grid[(i + 1) % m]
    if s <= 0.0:
        return kappa_grid[0]
    pos = s / grid_ds
    i = int(pos)
    if i >= m - 1:
        return kappa_grid[m - 1]
    w = pos - i
    return (1.0 - w) * kappa_grid[i] + w * kappa_grid[i + 1]


def _deriv(x, u0, u1, kappa, p, out):
    m, I_z, l_F, l_R, B_F, C_F, D_F, B_R, C_R, D_R, F_NF, F_NR, C_m, C_r0, C_r2, p_tv = p
    n, mu, v_x, v_y, r, delta, T = x[1], x[2], x[3], x[4], x[5], x[6], x[7]
    if v_x <= 0.0:
        return ERR_VX
    denom = 1.0 - n * kappa
    if abs(denom) < EPS_SING:
        return ERR_SING
    cmu, smu = math.cos(mu), math.sin(mu)
    s_dot = (v_x * cmu - v_y * smu) / denom
    alpha_F = math.atan((v_y + l_F * r) / v_x) - delta
    alpha_R = math.atan((v_y - l_R * r) / v_x)
    F_yF = F_NF * D_F * math.sin(C_F * math.atan(-B_F * alpha_F))
    F_yR = F_NR * D_R * math.sin(C_R * math.atan(-B_R * alpha_R))
    F_x = C_m * T - C_r0 - C_r2 * v_x * v_x
    M_tv = p_tv * (math.tan(delta) * v_x / (l_R + l_F) - r)
    cd, sd = math.cos(delta), math.sin(delta)
    out[0] = s_dot
    out[1] = v_x * smu + v_y * cmu
    out[2] = r - kappa * s_dot
    out[3] = (F_x - F_yF * sd + m * v_y * r) / m
    out[4] = (F_yR + F_yF * cd - m * v_x * r) / m
    out[5] = (F_yF * l_F * cd - F_yR * l_R + M_tv) / I_z
    out[6] = u0
    out[7] = u1
    return OK


def dynamics_time(x, u, kappa, p):
    """Returns ``(code, derivative)``; ``code`` is non-zero on a domain error."""
    out = [0.0] * 8
    code = _deriv([float(v) for v in x], float(u[0]), float(u[1]), float(kappa), tuple(p), out)
    return code, np.array(out)


def rk4_plant(x, u, p, kappa_grid, grid_ds, length, closed, dt, substeps):
    """Integrate ``substeps`` RK4 steps over ``dt`` with curvature re-evaluated at every stage.

    Returns ``(code, state)``; on error ``state`` is the last valid state.
    """
    p = tuple(float(v) for v in p)
    kg = [float(v) for v in kappa_grid]
    y = [float(v) for v in x]
    u0, u1 = float(u[0]), float(u[1])
    h = dt / substeps
    k1, k2, k3, k4 = [0.0] * 8, [0.0] * 8, [0.0] * 8, [0.0] * 8
    tmp = [0.0] * 8
    for _ in range(substeps):
        for k, base, c in ((k1, y, 0.0), (k2, k1, 0.5), (k3, k2, 0.5), (k4, k3, 1.0)):
            if c == 0.0:
                tmp[:] = y
            else:
                for i in range(8):
                    tmp[i] = y[i] + c * h * base[i]
            code = _deriv(tmp, u0, u1, _kappa_at(tmp[0], kg, grid_ds, length, closed), p, k)
            if code:
                return code, np.array(y)
        for i in range(8):
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return OK, np.array(y)
