"""Hot inner loops, shared by the numba and pure-numpy backends.

All functions are scalar loops over preallocated numpy arrays so the jitted
and fallback paths produce bit-identical results.  See
``benchmarks/backend_bench.py`` for a speed comparison.
"""

from __future__ import annotations

import numpy as np

from .accel import maybe_njit

# Proximity map geometry (meters).
MAP_ROWS = 13
MAP_COLS = 3
MAP_EXTENT_LONG = 65.0
MAP_EXTENT_LAT = 10.5
CELL_LONG = MAP_EXTENT_LONG / MAP_ROWS  # 5.0
CELL_LAT = MAP_EXTENT_LAT / MAP_COLS  # 3.5


@maybe_njit
def bin_proximity(rel, dists, window, cells, labels):
    """Bin vehicle track fragments into the ego-centered occupancy grid.

    rel     : (A, T, 2) positions relative to the ego frame, agent-major.
    dists   : (A,) distance of each agent to the ego at the window center;
              when two agents land in one cell at one tick the nearer wins.
    window  : K, the number of consecutive positions stored per cell.
    cells   : (13, 3, T, 2*K) output, zero-initialized.
    labels  : (13, 3, T) int64 output, -1 initialized; receives the agent
              row index that owns each occupied cell.
    """
    n_agents = rel.shape[0]
    n_ticks = rel.shape[1]
    half_long = MAP_EXTENT_LONG / 2.0
    half_lat = MAP_EXTENT_LAT / 2.0
    for i in range(n_ticks):
        for a in range(n_agents):
            x = rel[a, i, 0]
            y = rel[a, i, 1]
            if x < -half_long or x >= half_long:
                continue
            if y < -half_lat or y >= half_lat:
                continue
            row = int((x + half_long) / CELL_LONG)
            col = int((y + half_lat) / CELL_LAT)
            if row >= MAP_ROWS:
                row = MAP_ROWS - 1
            if col >= MAP_COLS:
                col = MAP_COLS - 1
            prev = labels[row, col, i]
            if prev >= 0 and dists[prev] <= dists[a]:
                continue
            labels[row, col, i] = a
            for k in range(window):
                j = i - (window - 1) + k
                if j < 0:
                    j = 0
                cells[row, col, i, 2 * k] = rel[a, j, 0]
                cells[row, col, i, 2 * k + 1] = rel[a, j, 1]


@maybe_njit
def polyline_project(pts, cumlen, s_prev, px, py, back, ahead):
    """Arc-length progress of (px, py) along a polyline, near a previous s.

    pts    : (W, 2) polyline vertices.
    cumlen : (W,) cumulative arc length (cumlen[0] == 0).
    s_prev : previous progress; only segments in [s_prev-back, s_prev+ahead]
             are searched, which keeps tracking stable at self-near routes.
    Returns (s, lateral_sq) of the closest point in the search window.
    """
    n = pts.shape[0]
    best_d = 1e30
    best_s = s_prev
    lo = s_prev - back
    hi = s_prev + ahead
    for i in range(n - 1):
        if cumlen[i + 1] < lo or cumlen[i] > hi:
            continue
        ax = pts[i, 0]
        ay = pts[i, 1]
        bx = pts[i + 1, 0]
        by = pts[i + 1, 1]
        dx = bx - ax
        dy = by - ay
        seg_len_sq = dx * dx + dy * dy
        if seg_len_sq <= 0.0:
            continue
        t = ((px - ax) * dx + (py - ay) * dy) / seg_len_sq
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        cx = ax + t * dx
        cy = ay + t * dy
        d = (px - cx) * (px - cx) + (py - cy) * (py - cy)
        if d < best_d:
            best_d = d
            best_s = cumlen[i] + t * (seg_len_sq**0.5)
    return best_s, best_d


@maybe_njit
def polyline_point(pts, cumlen, s):
    """Point and unit direction at arc length ``s`` (clamped to the ends)."""
    n = pts.shape[0]
    total = cumlen[n - 1]
    if s <= 0.0:
        s = 0.0
    elif s >= total:
        s = total
    i = 0
    while i < n - 2 and cumlen[i + 1] < s:
        i += 1
    ax = pts[i, 0]
    ay = pts[i, 1]
    bx = pts[i + 1, 0]
    by = pts[i + 1, 1]
    seg = cumlen[i + 1] - cumlen[i]
    if seg <= 0.0:
        return ax, ay, 1.0, 0.0
    t = (s - cumlen[i]) / seg
    dx = bx - ax
    dy = by - ay
    norm = (dx * dx + dy * dy) ** 0.5
    return ax + t * dx, ay + t * dy, dx / norm, dy / norm


@maybe_njit
def integrate_cars(states, cmds, is_car, dt, wheelbase, v_max):
    """Advance car states one tick by the kinematic bicycle model, in place.

    states : (A, 4) columns x, y, heading, speed.
    cmds   : (A, 2) columns steer, accel.
    is_car : (A,) uint8 mask; non-car rows are untouched.
    Displacement uses the pre-update speed; heading rate v*tan(steer)/L.
    """
    n = states.shape[0]
    for a in range(n):
        if is_car[a] == 0:
            continue
        x = states[a, 0]
        y = states[a, 1]
        h = states[a, 2]
        v = states[a, 3]
        steer = cmds[a, 0]
        accel = cmds[a, 1]
        states[a, 0] = x + v * np.cos(h) * dt
        states[a, 1] = y + v * np.sin(h) * dt
        h = h + v * np.tan(steer) / wheelbase * dt
        while h > np.pi:
            h -= 2.0 * np.pi
        while h <= -np.pi:
            h += 2.0 * np.pi
        states[a, 2] = h
        v = v + accel * dt
        if v < 0.0:
            v = 0.0
        elif v > v_max:
            v = v_max
        states[a, 3] = v


@maybe_njit
def segment_features(px, py, a_pts, b_pts, dist_out, s_out, lat_out):
    """Distance, along-segment progress and signed lateral per road segment.

    a_pts, b_pts : (S, 2) segment endpoints.
    Outputs are filled per segment: clamped-point distance, progress of the
    unclamped projection, and the signed lateral offset (positive left of
    the a->b direction).
    """
    n = a_pts.shape[0]
    for i in range(n):
        ax = a_pts[i, 0]
        ay = a_pts[i, 1]
        dx = b_pts[i, 0] - ax
        dy = b_pts[i, 1] - ay
        seg_len = (dx * dx + dy * dy) ** 0.5
        ux = dx / seg_len
        uy = dy / seg_len
        rx = px - ax
        ry = py - ay
        s = rx * ux + ry * uy
        lat = -rx * uy + ry * ux
        s_cl = s
        if s_cl < 0.0:
            s_cl = 0.0
        elif s_cl > seg_len:
            s_cl = seg_len
        cx = ax + s_cl * ux
        cy = ay + s_cl * uy
        dist_out[i] = ((px - cx) ** 2 + (py - cy) ** 2) ** 0.5
        s_out[i] = s
        lat_out[i] = lat
