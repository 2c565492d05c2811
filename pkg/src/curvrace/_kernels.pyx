# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled plant kernels.  Same interface and arithmetic as ``_kernels_py``."""

import numpy as np
from libc.math cimport atan, cos, fabs, fmod, sin, tan

DEF OK = 0
DEF ERR_VX = 1
DEF ERR_SING = 2
DEF EPS_SING = 1e-6


cdef inline double _kappa_at(double s, const double[::1] kg, double grid_ds,
                             double length, bint closed) nogil:
    cdef Py_ssize_t m = kg.shape[0]
    cdef Py_ssize_t i
    cdef double pos, w
    if closed:
        s = fmod(s, length)
        if s < 0.0:
            s += length
        pos = s / grid_ds
        i = <Py_ssize_t>pos
        if i >= m:
            i = m - 1
        w = pos - i
        return (1.0 - w) * kg[i] + w * kg[(i + 1) % m]
    if s <= 0.0:
        return kg[0]
    pos = s / grid_ds
    i = <Py_ssize_t>pos
    if i >= m - 1:
        return kg[m - 1]
    w = pos - i
    return (1.0 - w) * kg[i] + w * kg[i + 1]


cdef int _deriv(const double* x, double u0, double u1, double kappa,
                const double* p, double* out) nogil:
    cdef double m = p[0], I_z = p[1], l_F = p[2], l_R = p[3]
    cdef double B_F = p[4], C_F = p[5], D_F = p[6], B_R = p[7], C_R = p[8], D_R = p[9]
    cdef double F_NF = p[10], F_NR = p[11], C_m = p[12], C_r0 = p[13], C_r2 = p[14], p_tv = p[15]
    cdef double n = x[1], mu = x[2], v_x = x[3], v_y = x[4], r = x[5], delta = x[6], T = x[7]
    cdef double denom, cmu, smu, s_dot, alpha_F, alpha_R, F_yF, F_yR, F_x, M_tv, cd, sd
    if v_x <= 0.0:
        return ERR_VX
    denom = 1.0 - n * kappa
    if fabs(denom) < EPS_SING:
        return ERR_SING
    cmu = cos(mu)
    smu = sin(mu)
    s_dot = (v_x * cmu - v_y * smu) / denom
    alpha_F = atan((v_y + l_F * r) / v_x) - delta
    alpha_R = atan((v_y - l_R * r) / v_x)
    F_yF = F_NF * D_F * sin(C_F * atan(-B_F * alpha_F))
    F_yR = F_NR * D_R * sin(C_R * atan(-B_R * alpha_R))
    F_x = C_m * T - C_r0 - C_r2 * v_x * v_x
    M_tv = p_tv * (tan(delta) * v_x / (l_R + l_F) - r)
    cd = cos(delta)
    sd = sin(delta)
    out[0] = s_dot
    out[1] = v_x * smu + v_y * cmu
    out[2] = r - kappa * s_dot
    out[3] = (F_x - F_yF * sd + m * v_y * r) / m
    out[4] = (F_yR + F_yF * cd - m * v_x * r) / m
    out[5] = (F_yF * l_F * cd - F_yR * l_R + M_tv) / I_z
    out[6] = u0
    out[7] = u1
    return OK


def dynamics_time(x, u, double kappa, p):
    """Returns ``(code, derivative)``; ``code`` is non-zero on a domain error."""
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    out = np.zeros(8)
    cdef double[::1] ov = out
    cdef int code = _deriv(&xv[0], float(u[0]), float(u[1]), kappa, &pv[0], &ov[0])
    return code, out


def rk4_plant(x, u, p, kappa_grid, double grid_ds, double length, bint closed,
              double dt, int substeps):
    """Integrate ``substeps`` RK4 steps over ``dt`` with curvature re-evaluated at every stage.

    Returns ``(code, state)``; on error ``state`` is the last valid state.
    """
    y_arr = np.array(x, dtype=np.float64)
    cdef double[::1] y = y_arr
    cdef double[::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef const double[::1] kg = np.ascontiguousarray(kappa_grid, dtype=np.float64)
    cdef double u0 = float(u[0]), u1 = float(u[1])
    cdef double h = dt / substeps
    cdef double k1[8]
    cdef double k2[8]
    cdef double k3[8]
    cdef double k4[8]
    cdef double tmp[8]
    cdef int step, i, code = OK
    with nogil:
        for step in range(substeps):
            code = _deriv(&y[0], u0, u1, _kappa_at(y[0], kg, grid_ds, length, closed), &pv[0], k1)
            if code:
                break
            for i in range(8):
                tmp[i] = y[i] + 0.5 * h * k1[i]
            code = _deriv(tmp, u0, u1, _kappa_at(tmp[0], kg, grid_ds, length, closed), &pv[0], k2)
            if code:
                break
            for i in range(8):
                tmp[i] = y[i] + 0.5 * h * k2[i]
            code = _deriv(tmp, u0, u1, _kappa_at(tmp[0], kg, grid_ds, length, closed), &pv[0], k3)
            if code:
                break
            for i in range(8):
                tmp[i] = y[i] + h * k3[i]
            code = _deriv(tmp, u0, u1, _kappa_at(tmp[0], kg, grid_ds, length, closed), &pv[0], k4)
            if code:
                break
            for i in range(8):
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return code, y_arr
