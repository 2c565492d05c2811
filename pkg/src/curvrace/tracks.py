"""Built-in track fixtures used by tests, benchmarks and the CLI examples."""

from __future__ import annotations

import numpy as np

from .track import TrackSpec


def circle(radius: float = 25.0, n_points: int = 100, width: float = 2.0) -> TrackSpec:
    """Counter-clockwise circle; the inside of the circle is the left side."""
    th = np.arange(n_points) * (2 * np.pi / n_points)
    pts = np.column_stack([radius * np.cos(th), radius * np.sin(th)])
    return TrackSpec(pts, width, width, closed=True)


def turtle(segments, start=(0.0, 0.0), heading=0.0, spacing=1.0):
    """Sample a path made of ``(length, curvature)`` segments every ~``spacing`` meters.

    Returns the sample points and the exact end pose ``(x, y, heading)``.
    """
    x, y, th = float(start[0]), float(start[1]), float(heading)
    pts = []
    for length, kappa in segments:
        m = max(int(np.ceil(length / spacing)), 1)
        s = np.arange(m) * (length / m)
        if abs(kappa) < 1e-12:
            px = x + s * np.cos(th)
            py = y + s * np.sin(th)
            x, y = x + length * np.cos(th), y + length * np.sin(th)
        else:
            rad = 1.0 / kappa
            px = x + rad * (np.sin(th + kappa * s) - np.sin(th))
            py = y - rad * (np.cos(th + kappa * s) - np.cos(th))
            x = x + rad * (np.sin(th + kappa * length) - np.sin(th))
            y = y - rad * (np.cos(th + kappa * length) - np.cos(th))
            th += kappa * length
        pts.append(np.column_stack([px, py]))
    return np.vstack(pts), (x, y, th)


def rounded_rectangle(length: float = 40.0, height: float = 20.0, radius: float = 8.0,
                      spacing: float = 1.0, width: float = 1.5) -> TrackSpec:
    """Axis-aligned rectangle with quarter-circle corners; straights have the given lengths."""
    q = 0.5 * np.pi * radius
    segs = [(length, 0.0), (q, 1 / radius), (height, 0.0), (q, 1 / radius),
            (length, 0.0), (q, 1 / radius), (height, 0.0), (q, 1 / radius)]
    pts, _ = turtle(segs, spacing=spacing)
    return TrackSpec(pts, width, width, closed=True)


def oval(straight: float = 80.0, radius: float = 15.0, spacing: float = 1.0, width: float = 2.0) -> TrackSpec:
    """Two long straights joined by semicircles."""
    half = np.pi * radius
    segs = [(straight, 0.0), (half, 1 / radius), (straight, 0.0), (half, 1 / radius)]
    pts, _ = turtle(segs, spacing=spacing)
    return TrackSpec(pts, width, width, closed=True)


def hairpin_track(main_straight: float = 120.0, spacing: float = 1.0, width: float = 2.0) -> TrackSpec:
    """~300 m benchmark: long straight into a tight hairpin, a chicane and a long sweeper.

    The sweeper radius and the back-straight length are solved so the loop closes.
    """
    r_hairpin, top_straight, r_chicane = 7.0, 25.0, 12.0
    a = np.pi / 4
    chicane_dy = 2 * r_chicane * (1 - np.cos(a))
    chicane_dx = 2 * r_chicane * np.sin(a)
    r_sweep = 0.5 * (2 * r_hairpin + chicane_dy)
    back = main_straight - top_straight - chicane_dx
    segs = [
        (main_straight, 0.0),
        (np.pi * r_hairpin, 1 / r_hairpin),
        (top_straight, 0.0),
        (a * r_chicane, -1 / r_chicane),
        (a * r_chicane, 1 / r_chicane),
        (back, 0.0),
        (np.pi * r_sweep, 1 / r_sweep),
    ]
    pts, end = turtle(segs, spacing=spacing)
    assert np.hypot(end[0], end[1]) < 1e-9
    return TrackSpec(pts, width, width, closed=True)


FIXTURES = {
    "circle": circle,
    "oval": oval,
    "rounded_rectangle": rounded_rectangle,
    "hairpin": hairpin_track,
}
