"""Plant integration kernels.

The compiled extension is used when it was built; otherwise the pure-Python
implementation is loaded.  Set ``CURVRACE_PURE_PYTHON=1`` to force the
fallback.
"""

from __future__ import annotations

import os

import numpy as np

from .params import CarParams
from .vehicle import ModelDomainError, SingularityError

if os.environ.get("CURVRACE_PURE_PYTHON"):
    from . import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        from . import _kernels_py as _impl

        BACKEND = "python"


def pack_params(car: CarParams) -> np.ndarray:
    return np.array([
        car.m, car.I_z, car.l_F, car.l_R, car.B_F, car.C_F, car.D_F, car.B_R, car.C_R, car.D_R,
        car.F_NF, car.F_NR, car.C_m, car.C_r0, car.C_r2, car.p_tv,
    ], dtype=float)


def _raise(code: int):
    if code == 1:
        raise ModelDomainError("v_x must be > 0")
    if code == 2:
        raise SingularityError("1 - n*kappa vanishes")


def dynamics_time(x, u, kappa: float, packed: np.ndarray, impl=None) -> np.ndarray:
    code, out = (impl or _impl).dynamics_time(x, u, float(kappa), packed)
    _raise(code)
    return out


def rk4_plant(x, u, packed: np.ndarray, track, dt: float, substeps: int, impl=None) -> np.ndarray:
    """Advance the time-domain state by ``dt`` on ``track``'s curvature grid."""
    code, out = (impl or _impl).rk4_plant(
        x, u, packed, track.kappa_grid, track.grid_ds, track.length, track.closed, dt, int(substeps))
    _raise(code)
    return out
