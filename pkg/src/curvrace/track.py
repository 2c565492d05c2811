"""Arc-length parametrized reference paths.

A :class:`Track` is a cubic spline through the centerline points (periodic for
closed tracks), re-parametrized by arc length.  Curvature and corridor widths
are tabulated on a uniform ``s`` grid and linearly interpolated; positions
and headings are evaluated on the spline itself, so frame conversions are
exact inverses of one another.

Sign convention: ``n > 0`` is left of the path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

TRACK_FORMAT_VERSION = 1
_SUBDIV = 16
_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(5)


class TrackError(ValueError):
    """Invalid track description."""


class ProjectionError(ValueError):
    """A point could not be projected onto the path uniquely."""


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2 * np.pi)


@dataclass
class TrackSpec:
    points: np.ndarray
    width_left: np.ndarray
    width_right: np.ndarray
    closed: bool = True

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.width_left = np.broadcast_to(np.asarray(self.width_left, dtype=float), (len(self.points),)).copy()
        self.width_right = np.broadcast_to(np.asarray(self.width_right, dtype=float), (len(self.points),)).copy()

    def validate(self) -> None:
        pts = self.points
        if len(pts) < 4:
            raise TrackError(f"a track needs at least 4 centerline points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise TrackError("centerline points must be finite")
        if np.any(~np.isfinite(self.width_left)) or np.any(self.width_left <= 0):
            raise TrackError("width_left must be positive at every point")
        if np.any(~np.isfinite(self.width_right)) or np.any(self.width_right <= 0):
            raise TrackError("width_right must be positive at every point")
        seg = np.diff(np.vstack([pts, pts[:1]]) if self.closed else pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        scale = max(float(np.max(lengths)), 1e-300)
        bad = np.flatnonzero(lengths <= 1e-9 * scale)
        if bad.size:
            raise TrackError(f"degenerate input: repeated point at index {int(bad[0])}")
        hit = self_intersection(pts, self.closed)
        if hit is not None:
            raise TrackError(f"self-intersecting centerline: segments {hit[0]} and {hit[1]} cross")

    def reversed(self) -> "TrackSpec":
        """Same track driven in the opposite direction (left and right swap)."""
        return TrackSpec(self.points[::-1].copy(), self.width_right[::-1].copy(),
                         self.width_left[::-1].copy(), self.closed)


def self_intersection(points: np.ndarray, closed: bool = True):
    """Return the first pair of non-adjacent crossing segment indices, or None."""
    pts = np.asarray(points, dtype=float)
    a = pts
    b = np.roll(pts, -1, axis=0) if closed else pts[1:]
    if not closed:
        a = pts[:-1]
    m = len(a)
    d = b - a
    for i in range(m - 2):
        j = np.arange(i + 2, m)
        if closed and i == 0:
            j = j[j != m - 1]
        if j.size == 0:
            continue
        # segment i: a_i + t d_i ; segment j: a_j + u d_j
        denom = d[i, 0] * d[j, 1] - d[i, 1] * d[j, 0]
        diff = a[j] - a[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (diff[:, 0] * d[j, 1] - diff[:, 1] * d[j, 0]) / denom
            u = (diff[:, 0] * d[i, 1] - diff[:, 1] * d[i, 0]) / denom
        crossing = (np.abs(denom) > 1e-14) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
        if np.any(crossing):
            return i, int(j[np.argmax(crossing)])
    return None


class Track:
    """Reference path with curvature and corridor widths over arc length."""

    def __init__(self, knots: np.ndarray, closed: bool, grid_ds: float):
        if grid_ds <= 0:
            raise TrackError("grid_ds must be positive")
        knots = np.asarray(knots, dtype=float)
        self.closed = bool(closed)
        self.knots = knots
        pts = np.vstack([knots, knots[:1]]) if closed else knots
        chord = np.hypot(*np.diff(pts, axis=0).T)
        t = np.concatenate([[0.0], np.cumsum(chord)])
        bc = "periodic" if closed else "not-a-knot"
        self._spline = CubicSpline(t, pts, bc_type=bc, axis=0)
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)
        self._t_knots = t
        self._t_end = t[-1]

        # Piecewise-linear t <-> s table; exact inverses of each other.
        sub = np.linspace(0.0, 1.0, _SUBDIV + 1)
        t_tab = (t[:-1, None] + np.diff(t)[:, None] * sub[None, :-1]).ravel()
        t_tab = np.append(t_tab, t[-1])
        lo, hi = t_tab[:-1], t_tab[1:]
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        nodes = mid[:, None] + half[:, None] * _GAUSS_X[None, :]
        speed = np.hypot(*self._d1(nodes.ravel()).T).reshape(nodes.shape)
        seg_len = half * (speed @ _GAUSS_W)
        self._t_tab = t_tab
        self._s_tab = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length = float(self._s_tab[-1])
        self._s_knots = np.interp(t, t_tab, self._s_tab)

        n_grid = max(int(math.ceil(self.length / grid_ds)), 4)
        if closed:
            self.grid_s = np.arange(n_grid) * (self.length / n_grid)
        else:
            self.grid_s = np.linspace(0.0, self.length, n_grid + 1)
        self.grid_ds = self.length / n_grid
        self.kappa_grid = self.curvature_exact(self.grid_s)
        self.width_left_grid = np.ones_like(self.grid_s)
        self.width_right_grid = np.ones_like(self.grid_s)

    # -- parametrization -------------------------------------------------
    def wrap_s(self, s):
        s = np.asarray(s, dtype=float)
        if self.closed:
            return np.mod(s, self.length)
        return np.clip(s, 0.0, self.length)

    def t_of_s(self, s):
        return np.interp(self.wrap_s(s), self._s_tab, self._t_tab)

    def s_of_t(self, t):
        if self.closed:
            t = np.mod(t, self._t_end)
        return np.interp(t, self._t_tab, self._s_tab)

    @property
    def knot_s(self) -> np.ndarray:
        """Arc length of each knot (without the closing duplicate)."""
        return self._s_knots[:len(self.knots)]

    # -- grid quantities -------------------------------------------------
    def _grid_interp(self, s, values):
        s = self.wrap_s(s)
        if self.closed:
            xp = np.append(self.grid_s, self.length)
            fp = np.append(values, values[0])
        else:
            xp, fp = self.grid_s, values
        out = np.interp(s, xp, fp)
        return float(out) if out.ndim == 0 else out

    def kappa(self, s):
        """Curvature at ``s`` (linear interpolation of the tabulated grid)."""
        return self._grid_interp(s, self.kappa_grid)

    def width_left(self, s):
        return self._grid_interp(s, self.width_left_grid)

    def width_right(self, s):
        return self._grid_interp(s, self.width_right_grid)

    # -- exact geometry --------------------------------------------------
    def _geometry_t(self, t):
        c = self._spline(t)
        d = self._d1(t)
        return c, d

    def position(self, s):
        return self._spline(self.t_of_s(s))

    def heading(self, s):
        d = self._d1(self.t_of_s(s))
        return np.arctan2(d[..., 1], d[..., 0])

    def curvature_exact(self, s):
        t = self.t_of_s(s)
        d1, d2 = self._d1(t), self._d2(t)
        cross = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
        return cross / np.hypot(d1[..., 0], d1[..., 1]) ** 3

    def speed_wrt_parameter(self, t):
        return np.hypot(*np.moveaxis(self._d1(t), -1, 0))

    @property
    def parameter_end(self) -> float:
        return float(self._t_end)

    # -- frame conversions -----------------------------------------------
    def from_curvilinear(self, s, n, mu):
        """Global ``(x, y, heading)`` of a curvilinear pose."""
        t = self.t_of_s(s)
        c, d = self._geometry_t(t)
        theta = np.arctan2(d[..., 1], d[..., 0])
        n = np.asarray(n, dtype=float)
        x = c[..., 0] - n * np.sin(theta)
        y = c[..., 1] + n * np.cos(theta)
        return x, y, wrap_angle(theta + np.asarray(mu, dtype=float))

    def _newton_project(self, px, py, t0, max_iter=50):
        px, py = np.asarray(px, dtype=float), np.asarray(py, dtype=float)
        t = np.array(t0, dtype=float, copy=True)
        max_step = 0.25 * float(np.min(np.diff(self._t_knots)))
        for _ in range(max_iter):
            c, d1, d2 = self._spline(t), self._d1(t), self._d2(t)
            ex, ey = c[..., 0] - px, c[..., 1] - py
            phi = ex * d1[..., 0] + ey * d1[..., 1]
            dphi = d1[..., 0] ** 2 + d1[..., 1] ** 2 + ex * d2[..., 0] + ey * d2[..., 1]
            step = np.where(dphi > 0, -phi / np.where(dphi > 0, dphi, 1.0), -np.sign(phi) * max_step)
            step = np.clip(step, -max_step, max_step)
            t = t + step
            if not self.closed:
                t = np.clip(t, 0.0, self._t_end)
            if np.all(np.abs(step) <= 1e-14 * max(1.0, self._t_end)):
                break
        c, d1, d2 = self._spline(t), self._d1(t), self._d2(t)
        ex, ey = px - c[..., 0], py - c[..., 1]
        nrm = np.hypot(d1[..., 0], d1[..., 1])
        n = (-ex * d1[..., 1] + ey * d1[..., 0]) / nrm
        along = (ex * d1[..., 0] + ey * d1[..., 1]) / nrm
        curv = (d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]) / nrm**3
        converged = (np.abs(along) <= 1e-9 * max(1.0, float(np.max(np.abs(n))) if np.size(n) else 1.0)) & (1 - n * curv > 0)
        return t, n, converged

    def to_curvilinear(self, x, y, heading, hint_s, margin: float = 1.0):
        """Project a global pose onto the path near ``hint_s``.

        Returns ``(s, n, mu)``.  Raises :class:`ProjectionError` when the
        point is outside the corridor or the projection is not a local
        minimum of the distance.
        """
        t, n, ok = self._newton_project(x, y, self.t_of_s(hint_s))
        s = self.s_of_t(t)
        limit = np.maximum(self.width_left(s), self.width_right(s)) + margin
        if not np.all(ok) or np.any(np.abs(n) >= limit):
            raise ProjectionError("point is outside the projection corridor or the projection is not unique")
        d = self._d1(t)
        mu = wrap_angle(np.asarray(heading, dtype=float) - np.arctan2(d[..., 1], d[..., 0]))
        if np.ndim(s) == 0:
            return float(s), float(n), float(mu)
        return s, n, mu

    def project_global(self, x, y, heading, margin: float = 1.0):
        """Projection without a hint: seeds the local search from the closest grid node."""
        gx, gy = self.position(self.grid_s).T
        i = int(np.argmin((gx - x) ** 2 + (gy - y) ** 2))
        return self.to_curvilinear(x, y, heading, self.grid_s[i], margin)

    # -- edges / export --------------------------------------------------
    def edges(self, s=None):
        s = self.grid_s if s is None else s
        xl, yl, _ = self.from_curvilinear(s, self.width_left(s), 0.0)
        xr, yr, _ = self.from_curvilinear(s, -self.width_right(s), 0.0)
        return np.column_stack([xl, yl]), np.column_stack([xr, yr])

    def knot_widths(self):
        s = self.knot_s
        return self.width_left(s), self.width_right(s)

    def to_document(self) -> dict:
        wl, wr = self.knot_widths()
        return {
            "version": TRACK_FORMAT_VERSION,
            "closed": self.closed,
            "points": [
                {"x": float(p[0]), "y": float(p[1]), "w_left": float(a), "w_right": float(b)}
                for p, a, b in zip(self.knots, wl, wr)
            ],
        }


def _knot_interp(track: Track, values: np.ndarray, s):
    """Linear interpolation in the spline parameter of per-knot values."""
    t = track.t_of_s(s)
    tk = track._t_knots
    fp = np.append(values, values[0]) if track.closed else values
    return np.interp(t, tk, fp)


def build_track(spec: TrackSpec, grid_ds: float = 0.1) -> Track:
    """Fit a reference path through ``spec`` and tabulate curvature and widths."""
    spec.validate()
    track = Track(spec.points, spec.closed, grid_ds)
    track.width_left_grid = _knot_interp(track, spec.width_left, track.grid_s)
    track.width_right_grid = _knot_interp(track, spec.width_right, track.grid_s)
    return track


class RaceLinePath(Track):
    """Track-shaped geometry of an optimized line plus its speed profile."""

    velocity_grid: np.ndarray

    def v_ref(self, s):
        """Reference speed at ``s`` (linear interpolation)."""
        return self._grid_interp(s, self.velocity_grid)

    def knot_velocity(self):
        return self.v_ref(self.knot_s)

    def to_document(self) -> dict:
        doc = super().to_document()
        doc["velocity"] = [float(v) for v in self.knot_velocity()]
        return doc


def _corridor_distance(track: Track, px, py, nx, ny, hint_s, side: int, d_max: float, iters: int = 60):
    """Distance along the unit normal ``(nx, ny)`` from ``p`` to the track edge on ``side``.

    ``side=+1`` targets the left edge, ``-1`` the right edge.  Vectorized bisection.
    """
    def excess(d):
        qx, qy = px + side * d * nx, py + side * d * ny
        t, n, _ = track._newton_project(qx, qy, track.t_of_s(hint_s))
        s = track.s_of_t(t)
        if side > 0:
            return n - track.width_left(s)
        return -n - track.width_right(s)

    lo = np.zeros_like(px)
    hi = np.full_like(px, d_max)
    if np.any(excess(lo) >= 0):
        raise TrackError("race line leaves the original corridor")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pos = excess(mid) >= 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    return 0.5 * (lo + hi)


def reparametrize_raceline(track: Track, s, n, mu, v_x, grid_ds: float | None = None) -> RaceLinePath:
    """Turn a periodic trajectory relative to ``track`` into a new reference path.

    The new path passes through the trajectory samples; its corridor widths
    re-express the edges of ``track`` relative to the new path, and its
    speed profile is the sampled ``v_x`` over the new arc length.
    """
    s = np.asarray(s, dtype=float)
    n = np.asarray(n, dtype=float)
    v_x = np.asarray(v_x, dtype=float)
    if not track.closed:
        raise TrackError("race lines are only defined on closed tracks")
    if np.any(np.diff(s) <= 0):
        raise TrackError("trajectory samples must be strictly ordered in s")
    if np.any(v_x <= 0):
        raise TrackError("race-line speed must be positive")
    x, y, _ = track.from_curvilinear(s, n, 0.0)
    spec = TrackSpec(np.column_stack([x, y]), 1.0, 1.0, closed=True)
    spec.validate()
    path = RaceLinePath(spec.points, True, grid_ds or track.grid_ds)

    gs = path.grid_s
    gx, gy = path.position(gs).T
    theta = path.heading(gs)
    nx, ny = -np.sin(theta), np.cos(theta)
    # original-track progress of each new grid node, seeded by the sample it follows
    idx = np.searchsorted(path.knot_s, gs, side="right") - 1
    hint = s[np.clip(idx, 0, len(s) - 1)]
    d_max = float(np.max(track.width_left_grid) + np.max(track.width_right_grid)) + 1.0
    path.width_left_grid = _corridor_distance(track, gx, gy, nx, ny, hint, +1, d_max)
    path.width_right_grid = _corridor_distance(track, gx, gy, nx, ny, hint, -1, d_max)
    path.velocity_grid = _knot_interp(path, v_x, gs)
    return path


# -- file IO -------------------------------------------------------------

def parse_track_document(doc: dict) -> tuple[TrackSpec, np.ndarray | None]:
    if not isinstance(doc, dict):
        raise TrackError("track document must be an object")
    extra = set(doc) - {"version", "closed", "points", "velocity"}
    if extra:
        raise TrackError(f"unknown track fields: {', '.join(sorted(extra))}")
    if "closed" not in doc or not isinstance(doc["closed"], bool):
        raise TrackError("field 'closed' (bool) is required")
    pts = doc.get("points")
    if not isinstance(pts, list):
        raise TrackError("field 'points' (list) is required")
    rows = []
    for i, p in enumerate(pts):
        if not isinstance(p, dict) or set(p) != {"x", "y", "w_left", "w_right"}:
            raise TrackError(f"points[{i}] must have exactly x, y, w_left, w_right")
        try:
            rows.append([float(p["x"]), float(p["y"]), float(p["w_left"]), float(p["w_right"])])
        except (TypeError, ValueError) as exc:
            raise TrackError(f"points[{i}] has a non-numeric field") from exc
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    spec = TrackSpec(arr[:, :2], arr[:, 2], arr[:, 3], doc["closed"])
    velocity = None
    if "velocity" in doc:
        velocity = np.asarray(doc["velocity"], dtype=float)
        if velocity.shape != (len(arr),):
            raise TrackError("'velocity' must have one entry per point")
    return spec, velocity


def load_track_file(path: str | Path) -> tuple[TrackSpec, np.ndarray | None]:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TrackError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return parse_track_document(doc)


def load_track(path: str | Path, grid_ds: float = 0.1) -> Track:
    spec, velocity = load_track_file(path)
    if velocity is not None:
        return raceline_from_spec(spec, velocity, grid_ds)
    return build_track(spec, grid_ds)


def raceline_from_spec(spec: TrackSpec, velocity: np.ndarray, grid_ds: float = 0.1) -> RaceLinePath:
    spec.validate()
    if np.any(velocity <= 0):
        raise TrackError("race-line speed must be positive")
    path = RaceLinePath(spec.points, spec.closed, grid_ds)
    path.width_left_grid = _knot_interp(path, spec.width_left, path.grid_s)
    path.width_right_grid = _knot_interp(path, spec.width_right, path.grid_s)
    path.velocity_grid = _knot_interp(path, velocity, path.grid_s)
    return path


def save_track(track: Track, path: str | Path) -> None:
    Path(path).write_text(json.dumps(track.to_document(), indent=1))
