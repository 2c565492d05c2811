import os
import subprocess
import sys

import numpy as np
import pytest

from curvrace import _kernels_py, kernels
from curvrace.simulator import start_state
from curvrace.vehicle import ModelDomainError, SingularityError

compiled = pytest.importorskip("curvrace._kernels", reason="compiled extension not built")


def _random_states(rng, n):
    return np.column_stack([
        rng.uniform(0, 150, n), rng.uniform(-1, 1, n), rng.uniform(-0.5, 0.5, n), rng.uniform(2, 17, n),
        rng.uniform(-1, 1, n), rng.uniform(-2, 2, n), rng.uniform(-0.4, 0.4, n), rng.uniform(-1, 1, n),
    ])


def test_dynamics_backends_identical(car):
    rng = np.random.default_rng(5)
    packed = kernels.pack_params(car)
    for x in _random_states(rng, 200):
        u = rng.uniform(-2, 2, 2)
        k = float(rng.uniform(-0.1, 0.1))
        a = kernels.dynamics_time(x, u, k, packed, impl=compiled)
        b = kernels.dynamics_time(x, u, k, packed, impl=_kernels_py)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


def test_rk4_backends_agree_over_many_steps(hairpin_track, car):
    packed = kernels.pack_params(car)
    a = b = start_state(hairpin_track, car, 9.0, s=40.0)
    for _ in range(200):
        a = kernels.rk4_plant(a, (0.1, 0.3), packed, hairpin_track, 0.025, 10, impl=compiled)
        b = kernels.rk4_plant(b, (0.1, 0.3), packed, hairpin_track, 0.025, 10, impl=_kernels_py)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("impl", [compiled, _kernels_py], ids=["compiled", "python"])
def test_domain_errors_raised(circle_track, car, impl):
    packed = kernels.pack_params(car)
    with pytest.raises(ModelDomainError):
        kernels.dynamics_time(np.array([0, 0, 0, 0.0, 0, 0, 0, 0]), (0, 0), 0.04, packed, impl=impl)
    with pytest.raises(SingularityError):
        kernels.dynamics_time(np.array([0, 25.0, 0, 5.0, 0, 0, 0, 0]), (0, 0), 0.04, packed, impl=impl)


def test_fallback_selected_by_environment():
    code = "from curvrace import kernels; print(kernels.BACKEND)"
    env = {**os.environ, "CURVRACE_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    env.pop("CURVRACE_PURE_PYTHON")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "compiled"
