"""Command-line entry point: ``curvrace {validate,lto,sim}``.

Exit codes: 0 success, 1 runtime failure (solver, crash-free batch not
possible, I/O), 2 input validation failure.

``--track`` takes a track file or the name of a built-in fixture
(``circle``, ``oval``, ``rounded_rectangle``, ``hairpin``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import tracks
from .lto import LtoConfig, LtoConfigError, RaceLine, solve_lto
from .mpc_curv import MpcConfig, MpcConfigError
from .nlp import NlpError, NlpValidationError
from .params import ParameterError, ParameterSet, default_params_path, load_params
from .simulator import SimConfig, run_closed_loop, write_csv, write_summary, lap_metrics
from .track import (
    RaceLinePath, Track, TrackError, TrackSpec, build_track, load_track, load_track_file,
    save_track,
)

log = logging.getLogger("curvrace")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2
VARIANTS = ("centerline", "lto", "lto+terminal")
DEFAULT_HORIZONS = {"centerline": 40, "lto": 80, "lto+terminal": 40}


class ValidationFailure(Exception):
    """Bad user input; maps to exit code 2."""


# -- input resolution ----------------------------------------------------

def resolve_track_spec(name: str) -> TrackSpec:
    path = Path(name)
    if path.exists():
        spec, _ = load_track_file(path)
        return spec
    if name in tracks.FIXTURES:
        return tracks.FIXTURES[name]()
    raise ValidationFailure(f"track file not found: {name}")


def resolve_track(name: str) -> Track:
    try:
        return build_track(resolve_track_spec(name))
    except TrackError as exc:
        raise ValidationFailure(f"invalid track {name}: {exc}") from exc


SHIPPED_PARAMS = ("default", "low_grip")


def resolve_params_path(name: str | None) -> Path:
    """A parameter file path, or the name of a shipped set (``default``, ``low_grip``)."""
    if not name:
        return default_params_path()
    if name in SHIPPED_PARAMS and not Path(name).exists():
        return default_params_path().with_name(f"{name}_params.yaml")
    return Path(name)


def resolve_params(path: str | None) -> ParameterSet:
    p = resolve_params_path(path)
    if not p.exists():
        raise ValidationFailure(f"parameter file not found: {p}")
    try:
        return load_params(p)
    except ParameterError as exc:
        raise ValidationFailure(f"invalid parameters {p}: {exc}") from exc


# -- validate ------------------------------------------------------------

def _check(report: list, name: str, fn) -> bool:
    try:
        fn()
    except (ParameterError, TrackError, ValidationFailure, ValueError, OSError) as exc:
        report.append((name, False, str(exc)))
        return False
    report.append((name, True, ""))
    return True


def validate_inputs(params_file: str | None, track_file: str | None) -> list:
    """Static checks on the parameter and track inputs; returns ``(check, ok, message)`` rows."""
    report: list = []
    if params_file is not None or track_file is None:
        _check(report, "params: file parses with all keys and positivity invariants",
               lambda: resolve_params(params_file))
    if track_file is not None:
        holder = {}

        def parse():
            path = Path(track_file)
            if path.exists():
                holder["spec"], _ = load_track_file(path)
            elif track_file in tracks.FIXTURES:
                holder["spec"] = tracks.FIXTURES[track_file]()
            else:
                raise ValidationFailure(f"track file not found: {track_file}")

        if _check(report, "track: document schema", parse):
            spec = holder["spec"]

            def closure():
                if spec.closed and np.allclose(spec.points[0], spec.points[-1]):
                    raise TrackError("first and last points coincide; closure is implied and must not be repeated")

            def widths():
                if np.any(spec.width_left <= 0) or np.any(spec.width_right <= 0):
                    raise TrackError("widths must be positive at every point")

            _check(report, "track: closure (first/last points distinct)", closure)
            _check(report, "track: width positivity", widths)
            if _check(report, "track: geometry (>= 4 points, no repeats, no self-intersection)", spec.validate):
                def fitted():
                    tr = build_track(spec)
                    if np.any(tr.width_left_grid <= 0) or np.any(tr.width_right_grid <= 0):
                        raise TrackError("fitted widths are not positive everywhere")
                    if not np.all(np.isfinite(tr.kappa_grid)):
                        raise TrackError("fitted curvature is not finite")
                _check(report, "track: spline fit and tabulation", fitted)
    return report


def cmd_validate(args) -> int:
    report = validate_inputs(args.params, args.track)
    for name, ok, msg in report:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f": {msg}" if msg else ""))
    failed = sum(not ok for _, ok, _ in report)
    print(f"{len(report) - failed}/{len(report)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_VALIDATION


# -- lto -----------------------------------------------------------------

def write_lto_artifacts(rl: RaceLine, out: Path, elapsed: float | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "raceline.json").write_text(json.dumps(rl.to_document(), indent=1))
    save_track(rl.path, out / "raceline_track.json")
    report = {"lap_time": rl.lap_time, "N": len(rl.s) - 1, "ds": rl.ds,
              "residuals": rl.residuals, "solver": rl.solver}
    if elapsed is not None:
        report["wall_time_total"] = elapsed
    (out / "report.json").write_text(json.dumps(report, indent=1))
    with (out / "vx_s.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "v_x", "n", "mu"])
        for s, x in zip(rl.s, rl.X):
            w.writerow([repr(float(s)), repr(float(x[2])), repr(float(x[0])), repr(float(x[1]))])


def load_lto_artifacts(out: Path) -> tuple[np.ndarray, RaceLinePath]:
    """Initial LTO state (centerline frame, time-domain) and the race-line path from ``cmd_lto`` output."""
    doc = json.loads((out / "raceline.json").read_text())
    names = ("n", "mu", "v_x", "v_y", "r", "delta", "T_cmd")
    x0 = np.array([doc["s"][0]] + [doc[k][0] for k in names])
    path = load_track(out / "raceline_track.json")
    if not isinstance(path, RaceLinePath):
        raise ValidationFailure(f"{out}/raceline_track.json has no velocity profile")
    return x0, path


def run_lto(track_name: str, params: ParameterSet, out: Path, n_stages: int | None) -> RaceLine:
    import time

    track = resolve_track(track_name)
    cfg = LtoConfig(tolerances=params.solver) if n_stages is None else LtoConfig(N=n_stages, tolerances=params.solver)
    t0 = time.perf_counter()
    rl = solve_lto(track, params.car, params.cons, cfg)
    write_lto_artifacts(rl, out, time.perf_counter() - t0)
    return rl


def cmd_lto(args) -> int:
    params = resolve_params(args.params)
    out = Path(args.out)
    try:
        rl = run_lto(args.track, params, out, args.n_stages)
    except LtoConfigError as exc:
        raise ValidationFailure(str(exc)) from exc
    print(f"lap time {rl.lap_time:.4f} s  (N={len(rl.s) - 1}, "
          f"iterations {rl.solver['iterations']}, solver {rl.solver['wall_time']:.2f} s)")
    print(f"artifacts written to {out}")
    return EXIT_OK


# -- sim -----------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    name: str
    track: str
    params: str | None
    variant: str
    horizon: int
    dt: float
    n_laps: int
    seed: int


def parse_variant(text: str, default_horizon: int | None) -> tuple[str, int]:
    name, _, horizon = text.partition(":")
    if name not in VARIANTS:
        raise ValidationFailure(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    if horizon:
        try:
            T = int(horizon)
        except ValueError as exc:
            raise ValidationFailure(f"bad horizon in {text!r}") from exc
    else:
        T = default_horizon or DEFAULT_HORIZONS[name]
    return name, T


def scenarios_from_args(args) -> list[Scenario]:
    if args.experiment:
        try:
            doc = yaml.safe_load(Path(args.experiment).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ValidationFailure(f"cannot read experiment file: {exc}") from exc
        if not isinstance(doc, dict) or not isinstance(doc.get("scenarios"), list):
            raise ValidationFailure("experiment file needs a 'scenarios' list")
        out = []
        for i, sc in enumerate(doc["scenarios"]):
            if not isinstance(sc, dict):
                raise ValidationFailure(f"scenarios[{i}] must be a mapping")
            extra = set(sc) - {"name", "track", "params", "variant", "horizon", "dt", "laps", "seed"}
            if extra:
                raise ValidationFailure(f"scenarios[{i}]: unknown keys {sorted(extra)}")
            variant, T = parse_variant(str(sc.get("variant", "lto+terminal")), sc.get("horizon"))
            out.append(Scenario(
                name=str(sc.get("name", f"{i:02d}_{variant}")), track=str(sc.get("track", args.track)),
                params=sc.get("params", args.params), variant=variant, horizon=T,
                dt=float(sc.get("dt", args.dt)), n_laps=int(sc.get("laps", args.laps)),
                seed=int(sc.get("seed", args.seed)),
            ))
    else:
        variants = args.variant or list(VARIANTS)
        out = []
        for v in variants:
            variant, T = parse_variant(v, args.horizon)
            out.append(Scenario(f"{variant.replace('+', '_')}_T{T}", args.track, args.params, variant, T,
                                args.dt, args.laps, args.seed))
    names = [s.name for s in out]
    if len(set(names)) != len(names):
        raise ValidationFailure("scenario names must be unique")
    for s in out:
        if s.horizon < 2 or not s.dt > 0 or s.n_laps < 1:
            raise ValidationFailure(f"scenario {s.name}: horizon >= 2, dt > 0 and laps >= 1 are required")
    return out


def _lto_dir(out: Path, sc: Scenario, raceline_dir: str | None) -> Path:
    if raceline_dir:
        return Path(raceline_dir)
    tag = Path(sc.track).stem if Path(sc.track).exists() else sc.track
    if sc.params and sc.params != "default":
        tag += "__" + resolve_params_path(sc.params).stem
    return out / "lto" / tag


def run_scenario(sc: Scenario, out: Path, lto_dir: Path) -> dict:
    """Run one scenario; writes ``runlog.csv``, ``summary.json``, ``vx_s.csv`` and ``gg.csv``."""
    params = resolve_params(sc.params)
    track = resolve_track(sc.track)
    x0, path = load_lto_artifacts(lto_dir)
    reference = track if sc.variant == "centerline" else path
    cfg = MpcConfig(T_horizon=sc.horizon, dt=sc.dt, terminal_constraint_enabled=(sc.variant == "lto+terminal"))
    sim = SimConfig(n_laps=sc.n_laps, x0=tuple(float(v) for v in x0), seed=sc.seed)
    runlog = run_closed_loop(cfg, sim, track, params.car, params.cons, reference)
    d = out / sc.name
    d.mkdir(parents=True, exist_ok=True)
    write_csv(runlog, d / "runlog.csv")
    write_summary(runlog, d / "summary.json")
    c = runlog.columns
    with (d / "vx_s.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "v_x"])
        for s, v in zip(c["s"], c["v_x"]):
            w.writerow([repr(float(s)), repr(float(v))])
    with (d / "gg.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a_long", "a_lat"])
        for a, b in zip(c["a_long"], c["a_lat"]):
            w.writerow([repr(float(a)), repr(float(b))])
    return {"scenario": sc.name, "variant": sc.variant, "horizon": sc.horizon, **lap_metrics(runlog)}


def _fmt_opt(v, spec):
    return "-" if v is None else format(v, spec)


def write_comparison(rows: list, out: Path) -> None:
    """Deterministic comparison table (CSV) plus the timing statistics (JSON)."""
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "variant", "horizon", "laps_completed", "best_lap", "last_lap", "crashed",
                    "solver_failures", "max_abs_a_lat", "max_abs_a_long", "track_violations"])
        for r in rows:
            laps = r["lap_times"]
            w.writerow([r["scenario"], r["variant"], r["horizon"], r["laps_completed"],
                        repr(r["best_lap"]) if r["best_lap"] is not None else "",
                        repr(laps[-1]) if laps else "", int(r["crashed"]), r["solver_failures"],
                        repr(r["max_abs_a_lat"]), repr(r["max_abs_a_long"]), r["track_violations"]])
    timing = {r["scenario"]: {k: r[k] for k in ("solve_time_mean", "solve_time_max", "solve_time_budget",
                                                  "over_budget_fraction")} for r in rows}
    (out / "timing.json").write_text(json.dumps(timing, indent=1))


def print_comparison(rows: list) -> None:
    head = f"{'scenario':<22}{'variant':<14}{'T':>4}{'laps':>6}{'best lap [s]':>14}{'crash':>7}" \
           f"{'fails':>7}{'mean solve [ms]':>17}{'over budget':>13}"
    print(head)
    print("-" * len(head))
    for r in rows:
        mean = r["solve_time_mean"]
        print(f"{r['scenario']:<22}{r['variant']:<14}{r['horizon']:>4}{r['laps_completed']:>6}"
              f"{_fmt_opt(r['best_lap'], '.3f'):>14}{'yes' if r['crashed'] else 'no':>7}{r['solver_failures']:>7}"
              f"{_fmt_opt(None if mean is None else 1e3 * mean, '.2f'):>17}"
              f"{_fmt_opt(r['over_budget_fraction'], '.1%'):>13}")


def cmd_sim(args) -> int:
    scenarios = scenarios_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # race lines first (once per track), so scenarios can run concurrently
    lto_dirs = {}
    for sc in scenarios:
        d = _lto_dir(out, sc, args.raceline)
        lto_dirs[sc.name] = d
        if not (d / "raceline.json").exists():
            if args.raceline:
                raise ValidationFailure(f"no race line found in {d}")
            log.info("computing race line for %s", sc.track)
            run_lto(sc.track, resolve_params(sc.params), d, args.n_stages)
    rows = []
    if args.jobs > 1 and len(scenarios) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(run_scenario, sc, out, lto_dirs[sc.name]) for sc in scenarios]
            rows = [f.result() for f in futures]
    else:
        rows = [run_scenario(sc, out, lto_dirs[sc.name]) for sc in scenarios]
    write_comparison(rows, out)
    print_comparison(rows)
    for r in rows:
        if r["crashed"]:
            print(f"crash in {r['scenario']}: {r['crash']}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curvrace", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="static checks on parameter and track inputs")
    v.add_argument("--params", help="parameter file or shipped set name: default, low_grip")
    v.add_argument("--track", help="track file or fixture name")
    v.set_defaults(func=cmd_validate)

    lto = sub.add_parser("lto", help="compute the minimum-lap-time race line")
    lto.add_argument("--track", required=True)
    lto.add_argument("--params", help="parameter file or shipped set name")
    lto.add_argument("--out", required=True)
    lto.add_argument("--n-stages", type=int, help="number of stages N (default 1000)")
    lto.set_defaults(func=cmd_lto)

    sim = sub.add_parser("sim", help="closed-loop controller comparison")
    sim.add_argument("--track", default="hairpin")
    sim.add_argument("--params", help="parameter file or shipped set name")
    sim.add_argument("--out", required=True)
    sim.add_argument("--variant", action="append",
                     help="centerline | lto | lto+terminal, optionally suffixed ':T' (repeatable)")
    sim.add_argument("--horizon", type=int, help="horizon for variants without an explicit ':T'")
    sim.add_argument("--dt", type=float, default=0.025)
    sim.add_argument("--laps", type=int, default=2)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--n-stages", type=int, help="LTO stages when the race line is computed on demand")
    sim.add_argument("--raceline", help="directory with existing 'lto' output")
    sim.add_argument("--experiment", help="YAML/JSON file with a 'scenarios' list")
    sim.set_defaults(func=cmd_sim)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationFailure, ParameterError, TrackError, LtoConfigError, MpcConfigError,
            NlpValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NlpError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
