"""Turn episode logs into training samples.

A sample packs the ego history E (T x K x 2), up to N neighbor histories
with a presence mask, the 13 x 3 x T x 2K proximity map, 8 context scalars,
a navigation command and the ground-truth ego/neighbor futures (fitted to
degree-4 polynomials and resampled on the 0.1 s grid).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import kernels, simworld
from .errors import DataFormatError
from .kernels import MAP_COLS, MAP_EXTENT_LAT, MAP_EXTENT_LONG, MAP_ROWS
from .simworld import AgentState, EpisodeLog, RoadNetwork
from .trajectory import (
    DT,
    HORIZON,
    PointSeries,
    Pose2D,
    sample_times,
    xy_to_frame,
)

T_STEPS = 20
K_WINDOW = 3
N_NEIGHBORS = 5
WINDOW_TICKS = 2 * T_STEPS  # 2 s past + 2 s future
DATASET_FORMAT_VERSION = 1

# Context feature caps (meters / rad / m/s); see ContextFeatures order below.
CTX_LIGHT_CAP = 50.0
CTX_INTER_CAP = 50.0
CTX_LEAD_CAP = 50.0
CTX_PED_CAP = 30.0
NC_ZONE_RADIUS = 15.0
NC_LOOKAHEAD_S = 5.0
NC_TURN_DEG = 30.0

_FUTURE_T = sample_times()
# Fixed-grid least squares: pinv of the degree-4 Vandermonde on the 20
# future instants.  Identical minimizer to fit_polynomial on this grid.
_FUTURE_VAND = np.vander(_FUTURE_T, 5)
_FUTURE_PINV = np.linalg.pinv(_FUTURE_VAND)


class NavigationCommand(IntEnum):
    LEFT = 0
    RIGHT = 1
    CROSS = 2
    KEEP_LANE = 3


@dataclass
class Sample:
    """One training record, all positions in the ego frame at window center."""

    e: np.ndarray  # (T, K, 2)
    v: np.ndarray  # (N, T, K, 2)
    v_mask: np.ndarray  # (N,) bool
    m_cells: np.ndarray  # (13, 3, T, 2K)
    m_labels: np.ndarray  # (13, 3, T) int64; -1 empty, 0 ego, >0 other cars
    ctx: np.ndarray  # (8,)
    nc: NavigationCommand
    ego_future: np.ndarray  # (T, 2), at t = 0.1 .. 2.0
    neigh_future: np.ndarray  # (N, T, 2), each relative to own center position
    episode_seed: int = 0
    center_tick: int = 0
    deviated: bool = False

    def ego_future_series(self) -> PointSeries:
        return PointSeries(_FUTURE_T, self.ego_future)

    def neigh_future_series(self, k: int) -> PointSeries:
        return PointSeries(_FUTURE_T, self.neigh_future[k])


def samples_equal(a: Sample, b: Sample, atol: float = 0.0) -> bool:
    for name in ("e", "v", "m_cells", "ctx", "ego_future", "neigh_future"):
        if not np.allclose(getattr(a, name), getattr(b, name), atol=atol, rtol=0.0):
            return False
    return (
        bool(np.array_equal(a.v_mask, b.v_mask))
        and bool(np.array_equal(a.m_labels, b.m_labels))
        and a.nc == b.nc
    )


def history_tensor(track: np.ndarray) -> np.ndarray:
    """(T, 2) positions -> (T, K, 2) sliding windows, oldest first.

    Window k at index i holds the position at tick i - K + 1 + k; missing
    past is padded by repeating the oldest known position.
    """
    track = np.asarray(track, dtype=np.float64)
    out = np.empty((T_STEPS, K_WINDOW, 2))
    for k in range(K_WINDOW):
        idx = np.maximum(np.arange(T_STEPS) - (K_WINDOW - 1) + k, 0)
        out[:, k, :] = track[idx]
    return out


def fit_future_points(xy: np.ndarray) -> np.ndarray:
    """Least-squares degree-4 smoothing of a (T, 2) future onto the t grid."""
    coeffs = _FUTURE_PINV @ np.asarray(xy, dtype=np.float64)
    return _FUTURE_VAND @ coeffs


def select_neighbors(
    ego_xy: np.ndarray, cars: list[tuple[int, np.ndarray]]
) -> list[int]:
    """Up to N nearest car agent ids, ascending distance, ties by id."""
    scored = sorted(
        (float(np.linalg.norm(xy - ego_xy)), agent_id) for agent_id, xy in cars
    )
    return [agent_id for _, agent_id in scored[:N_NEIGHBORS]]


def build_proximity_map(
    rel_tracks: np.ndarray, center_dists: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Bin all car tracks (ego row first) into the occupancy grid.

    rel_tracks   : (A, T, 2) ego-frame positions, row 0 is the ego itself.
    center_dists : (A,) distance to the ego at the window center (nearer
                   vehicle wins a contested cell).
    """
    cells = np.zeros((MAP_ROWS, MAP_COLS, T_STEPS, 2 * K_WINDOW))
    labels = np.full((MAP_ROWS, MAP_COLS, T_STEPS), -1, dtype=np.int64)
    kernels.bin_proximity(
        np.ascontiguousarray(rel_tracks, dtype=np.float64),
        np.ascontiguousarray(center_dists, dtype=np.float64),
        K_WINDOW,
        cells,
        labels,
    )
    return cells, labels


def compute_context(
    network: RoadNetwork,
    ego: tuple[float, float, float, float],
    cars: list[tuple[float, float, float, float]],
    peds: list[tuple[float, float]],
    light_green,
) -> np.ndarray:
    """The 8 context scalars; see the caps at the top of this module.

    Order: distance to next light stop line, light phase ahead (1 = red),
    distance to next intersection, signed lateral offset from the lane
    centerline (positive left), heading error vs lane, leading-vehicle
    distance, leading-vehicle relative speed, nearest crossing-pedestrian
    distance.
    """
    x, y, h, v = ego
    d_light, phase, d_inter = CTX_LIGHT_CAP, 0.0, CTX_INTER_CAP
    lat, herr = 0.0, 0.0
    hit = network.nearest_lane((x, y), h)
    if hit is None:
        d_inter = 0.0  # inside a junction core
    else:
        lane_id, s, lat = hit
        lane = network.lanes[lane_id]
        herr = float((h - lane.heading + np.pi) % (2 * np.pi) - np.pi)
        d_end = max(0.0, lane.length - s)
        to_node = network.nodes[lane.to_node]
        if to_node.kind == "junction":
            d_inter = min(d_end, CTX_INTER_CAP)
            if to_node.lit:
                seg_axis = network.segments[lane.seg_id].axis
                axis = seg_axis if seg_axis != 2 else 0
                d_light = min(d_end, CTX_LIGHT_CAP)
                phase = 0.0 if light_green(to_node.node_id, axis) else 1.0

    probe = AgentState(agent_id=-1, kind="car", x=x, y=y, heading=h, speed=v)
    others = [
        AgentState(agent_id=i, kind="car", x=c[0], y=c[1], heading=c[2], speed=c[3])
        for i, c in enumerate(cars)
    ]
    lead = simworld.leading_vehicle(probe, others)
    d_lead, lead_dv = (CTX_LEAD_CAP, 0.0)
    if lead is not None:
        d_lead, lead_dv = min(lead[0], CTX_LEAD_CAP), lead[1]
    ped_agents = [
        AgentState(agent_id=-2, kind="pedestrian", x=p[0], y=p[1], heading=0.0, speed=0.0)
        for p in peds
    ]
    d_ped = simworld.crossing_ped_distance(probe, ped_agents)
    d_ped = CTX_PED_CAP if d_ped is None else min(d_ped, CTX_PED_CAP)
    return np.array([d_light, phase, d_inter, float(lat), herr, d_lead, lead_dv, d_ped])


def compute_navigation_command(
    log: EpisodeLog, center_tick: int, network: RoadNetwork
) -> NavigationCommand:
    """Classify the upcoming maneuver from the recorded ego motion.

    If the ego enters a junction zone (15 m radius) within the next 5 s, the
    signed heading change across the zone decides left / right / cross;
    otherwise keep lane.
    """
    n = len(log)
    horizon = min(n - 1, center_tick + int(round(NC_LOOKAHEAD_S / simworld.TICK)))
    entry = None
    for i in range(center_tick, horizon + 1):
        node_id, d = network.nearest_junction(log.states[i][0, :2])
        if d < NC_ZONE_RADIUS:
            entry = (i, node_id)
            break
    if entry is None:
        return NavigationCommand.KEEP_LANE
    i, node_id = entry
    node_pos = network.nodes[node_id].pos
    j = i
    while (
        j < n - 1
        and float(np.linalg.norm(log.states[j][0, :2] - node_pos)) < NC_ZONE_RADIUS
    ):
        j += 1
    dh = float(
        (log.states[j][0, 2] - log.states[i][0, 2] + np.pi) % (2 * np.pi) - np.pi
    )
    if dh > np.deg2rad(NC_TURN_DEG):
        return NavigationCommand.LEFT
    if dh < -np.deg2rad(NC_TURN_DEG):
        return NavigationCommand.RIGHT
    return NavigationCommand.CROSS


def assemble_sample(
    network: RoadNetwork,
    frame: Pose2D,
    ego_speed: float,
    ego_past: np.ndarray,
    car_tracks: list[tuple[int, np.ndarray, tuple[float, float, float, float]]],
    peds: list[tuple[float, float]],
    light_green,
    nc: NavigationCommand,
) -> Sample:
    """Build the model inputs for one window (shared offline / live path).

    ego_past   : (T, 2) world positions, oldest first, ending at the center.
    car_tracks : per other car (agent_id, (T, 2) world track, center state).
    """
    rel_ego = xy_to_frame(ego_past, frame)
    e = history_tensor(rel_ego)

    order = select_neighbors(
        np.array([frame.x, frame.y]), [(aid, trk[-1]) for aid, trk, _ in car_tracks]
    )
    by_id = {aid: (trk, st) for aid, trk, st in car_tracks}
    v = np.zeros((N_NEIGHBORS, T_STEPS, K_WINDOW, 2))
    v_mask = np.zeros(N_NEIGHBORS, dtype=bool)
    for k, aid in enumerate(order):
        v[k] = history_tensor(xy_to_frame(by_id[aid][0], frame))
        v_mask[k] = True

    rel_tracks = np.empty((1 + len(car_tracks), T_STEPS, 2))
    rel_tracks[0] = rel_ego
    dists = np.empty(1 + len(car_tracks))
    dists[0] = 0.0
    ids_sorted = sorted(by_id)
    for row, aid in enumerate(ids_sorted, start=1):
        rel_tracks[row] = xy_to_frame(by_id[aid][0], frame)
        dists[row] = float(np.linalg.norm(rel_tracks[row][-1]))
    m_cells, m_labels = build_proximity_map(rel_tracks, dists)

    ctx = compute_context(
        network,
        (frame.x, frame.y, frame.heading, ego_speed),
        [st for _, _, st in [(a, t, s) for a, t, s in car_tracks]],
        peds,
        light_green,
    )
    return Sample(
        e=e,
        v=v,
        v_mask=v_mask,
        m_cells=m_cells,
        m_labels=m_labels,
        ctx=ctx,
        nc=nc,
        ego_future=np.zeros((T_STEPS, 2)),
        neigh_future=np.zeros((N_NEIGHBORS, T_STEPS, 2)),
    ), order


def extract_windows(log: EpisodeLog, network: RoadNetwork) -> list[Sample]:
    """One sample per valid center tick (stride 1)."""
    n = len(log)
    if n < WINDOW_TICKS:
        return []
    car_rows = log.car_indices()
    ped_rows = log.ped_indices()
    samples: list[Sample] = []
    ego_row = car_rows[0]
    other_rows = car_rows[1:]
    for c in range(T_STEPS - 1, n - T_STEPS):
        frame = Pose2D(*log.states[c][ego_row, :3])
        past = slice(c - T_STEPS + 1, c + 1)
        fut = slice(c + 1, c + 1 + T_STEPS)

        def light_green(node_id, axis, _tick=c):
            return log.light_green_at(_tick, node_id, axis)

        car_tracks = []
        for r in other_rows:
            st = tuple(log.states[c][r])
            car_tracks.append((log.agent_ids[r], log.states[past, r, :2], st))
        peds = [tuple(log.states[c][r, :2]) for r in ped_rows]
        nc = compute_navigation_command(log, c, network)
        sample, order = assemble_sample(
            network,
            frame,
            float(log.states[c][ego_row, 3]),
            log.states[past, ego_row, :2],
            car_tracks,
            peds,
            light_green,
            nc,
        )
        ego_fut_rel = xy_to_frame(log.states[fut, ego_row, :2], frame)
        sample.ego_future = fit_future_points(ego_fut_rel)
        row_of = {log.agent_ids[r]: r for r in other_rows}
        for k, aid in enumerate(order):
            r = row_of[aid]
            rel = xy_to_frame(log.states[fut, r, :2], frame)
            rel -= xy_to_frame(log.states[c][r, :2][None, :], frame)[0]
            sample.neigh_future[k] = fit_future_points(rel)
        sample.episode_seed = int(log.meta.get("seed", 0))
        sample.center_tick = c
        samples.append(sample)
    return samples


# -- serialization ------------------------------------------------------------


def dataset_header(extra: dict | None = None) -> dict:
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "T": T_STEPS,
        "K": K_WINDOW,
        "N": N_NEIGHBORS,
        "map_dims": [MAP_ROWS, MAP_COLS],
        "extent_m": [MAP_EXTENT_LONG, MAP_EXTENT_LAT],
        "map_channel_order": "xy_per_window_oldest_first",
    }
    if extra:
        header.update(extra)
    return header


def _sample_to_record(s: Sample) -> dict:
    occupied = np.argwhere(s.m_labels >= 0)
    m_sparse = [
        [int(r), int(c), int(t), int(s.m_labels[r, c, t])]
        + [float(x) for x in s.m_cells[r, c, t]]
        for r, c, t in occupied
    ]
    present = np.flatnonzero(s.v_mask)
    return {
        "e": s.e.ravel().tolist(),
        "v": {int(k): s.v[k].ravel().tolist() for k in present},
        "mask": s.v_mask.astype(int).tolist(),
        "m": m_sparse,
        "ctx": s.ctx.tolist(),
        "nc": int(s.nc),
        "ef": s.ego_future.ravel().tolist(),
        "vf": {int(k): s.neigh_future[k].ravel().tolist() for k in present},
        "ep": s.episode_seed,
        "ct": s.center_tick,
        "dev": int(s.deviated),
    }


def _record_to_sample(rec: dict) -> Sample:
    e = np.array(rec["e"]).reshape(T_STEPS, K_WINDOW, 2)
    v = np.zeros((N_NEIGHBORS, T_STEPS, K_WINDOW, 2))
    vf = np.zeros((N_NEIGHBORS, T_STEPS, 2))
    for k, vals in rec["v"].items():
        v[int(k)] = np.array(vals).reshape(T_STEPS, K_WINDOW, 2)
    for k, vals in rec["vf"].items():
        vf[int(k)] = np.array(vals).reshape(T_STEPS, 2)
    m_cells = np.zeros((MAP_ROWS, MAP_COLS, T_STEPS, 2 * K_WINDOW))
    m_labels = np.full((MAP_ROWS, MAP_COLS, T_STEPS), -1, dtype=np.int64)
    for entry in rec["m"]:
        r, c, t, label = int(entry[0]), int(entry[1]), int(entry[2]), int(entry[3])
        m_labels[r, c, t] = label
        m_cells[r, c, t] = entry[4:]
    return Sample(
        e=e,
        v=v,
        v_mask=np.array(rec["mask"], dtype=bool),
        m_cells=m_cells,
        m_labels=m_labels,
        ctx=np.array(rec["ctx"]),
        nc=NavigationCommand(rec["nc"]),
        ego_future=np.array(rec["ef"]).reshape(T_STEPS, 2),
        neigh_future=vf,
        episode_seed=int(rec.get("ep", 0)),
        center_tick=int(rec.get("ct", 0)),
        deviated=bool(rec.get("dev", 0)),
    )


def write_dataset(samples: list[Sample], path, extra_meta: dict | None = None) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(dataset_header(extra_meta)) + "\n")
        for s in samples:
            f.write(json.dumps(_sample_to_record(s)) + "\n")


def read_dataset(path) -> tuple[list[Sample], dict]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: corrupt header at line 1") from e
    if header.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: format_version {header.get('format_version')} unsupported"
        )
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            samples.append(_record_to_sample(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise DataFormatError(f"{path}: corrupt record at line {lineno}") from e
    return samples, header
