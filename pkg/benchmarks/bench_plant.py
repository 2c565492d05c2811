"""Compare the compiled and pure-Python plant kernels.

Times one simulator step (RK4 over 25 ms with 10 substeps, curvature looked up
at every stage) and one dynamics evaluation, and checks both backends agree.

    python3 benchmarks/bench_plant.py [--repeat 2000]
"""

import argparse
import timeit

import numpy as np

from curvrace import _kernels_py, kernels, tracks
from curvrace.params import default_params
from curvrace.track import build_track

try:
    from curvrace import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--substeps", type=int, default=10)
    args = ap.parse_args(argv)

    car = default_params().car
    packed = kernels.pack_params(car)
    track = build_track(tracks.hairpin_track())
    x = np.array([125.0, 0.3, 0.05, 8.0, 0.2, 0.9, 0.15, -0.2])
    u = np.array([0.4, 1.0])

    impls = {"python": _kernels_py}
    if _kernels_c is not None:
        impls["compiled"] = _kernels_c
    else:
        print("compiled extension not built; timing the Python fallback only")

    results = {}
    for name, impl in impls.items():
        step = lambda: kernels.rk4_plant(x, u, packed, track, 0.025, args.substeps, impl=impl)  # noqa: E731
        deriv = lambda: kernels.dynamics_time(x, u, 0.1, packed, impl=impl)  # noqa: E731
        n = args.repeat if name == "compiled" else max(args.repeat // 20, 10)
        t_step = min(timeit.repeat(step, number=n, repeat=3)) / n
        t_deriv = min(timeit.repeat(deriv, number=n, repeat=3)) / n
        results[name] = (step(), t_step, t_deriv)
        print(f"{name:<9} step {1e6 * t_step:9.1f} us   dynamics {1e6 * t_deriv:8.2f} us")

    if len(results) == 2:
        diff = np.max(np.abs(results["compiled"][0] - results["python"][0]))
        print(f"speed-up: step x{results['python'][1] / results['compiled'][1]:.1f}, "
              f"dynamics x{results['python'][2] / results['compiled'][2]:.1f}; "
              f"max state difference {diff:.2e}")
    print(f"active backend: {kernels.BACKEND}")


if __name__ == "__main__":
    main()
