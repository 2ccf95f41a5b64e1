"""Deterministic 2D urban world: grid road networks, traffic lights,
kinematic car agents, crossing pedestrians and a rule-following expert
autopilot.  One world is owned by one simulation loop; everything is
seeded and replayable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DataFormatError, SpawnError
from .trajectory import Pose2D

TICK = 0.1
LANE_WIDTH = 3.5
LANE_OFFSET = LANE_WIDTH / 2.0  # centerline offset from the road axis
HALF_ROAD = LANE_WIDTH  # two lanes, one per direction
CORE_RADIUS = 7.0  # junction core: lanes are pulled back this far
CORE_OCCUPIED_RADIUS = 7.2
STUB_LEN = 30.0
WHEELBASE = 2.5
SPEED_LIMIT = 8.33  # hard world cap, m/s
TARGET_SPEED = 5.56  # autopilot target, 20 kph
PED_SPEED = 1.2
PED_CROSSING_CLEARANCE = 12.0  # peds wait at the kerb until cars are this far
CAR_RADIUS = 1.2
PED_RADIUS = 0.4
LOOKAHEAD = 4.0
TURN_RADIUS = 5.0  # junction connector radius; min feasible is WHEELBASE/tan(MAX_STEER)
FOLLOW_GAP = 8.0
PED_GAP = 6.0
STOP_MARGIN = 2.5
JUNCTION_SPEED = 4.0  # cap while traversing a junction connector
BRAKE_COMFORT = 1.8  # m/s^2 used to shape the approach speed profile
GREEN_S = 10.0
RED_S = 8.0
CYCLE_S = GREEN_S + RED_S
MAX_STEER = 0.5
ACCEL_MIN = -4.0
ACCEL_MAX = 2.0
LOG_FORMAT_VERSION = 1


@dataclass
class Node:
    node_id: int
    pos: np.ndarray
    kind: str  # "junction" | "boundary"
    lit: bool


@dataclass
class Segment:
    seg_id: int
    node_a: int
    node_b: int
    axis: int  # 0: x-aligned, 1: y-aligned, 2: diagonal


@dataclass
class Lane:
    lane_id: int
    seg_id: int
    from_node: int
    to_node: int
    p0: np.ndarray
    p1: np.ndarray
    direction: np.ndarray
    length: float
    width: float = LANE_WIDTH

    @property
    def heading(self) -> float:
        return float(np.arctan2(self.direction[1], self.direction[0]))


@dataclass
class Crosswalk:
    node_id: int
    p0: np.ndarray
    p1: np.ndarray


def _turn_of(h_in: float, h_out: float) -> str | None:
    """Classify a lane-to-lane transition; None marks a forbidden U-turn."""
    d = (h_out - h_in + np.pi) % (2 * np.pi) - np.pi
    if abs(d) > np.deg2rad(150):
        return None
    if d > np.deg2rad(30):
        return "left"
    if d < -np.deg2rad(30):
        return "right"
    return "cross"


class RoadNetwork:
    """Directed-lane road graph with junction cores and crosswalks."""

    def __init__(self, town_id: str, nodes, segments, lanes, crosswalks):
        self.town_id = town_id
        self.nodes = nodes
        self.segments = segments
        self.lanes = lanes
        self.crosswalks = crosswalks
        # Cached geometry arrays for the kernels.
        self.seg_a = np.array([nodes[s.node_a].pos for s in segments])
        self.seg_b = np.array([nodes[s.node_b].pos for s in segments])
        self.lane_p0 = np.array([l.p0 for l in lanes])
        self.lane_p1 = np.array([l.p1 for l in lanes])
        self.lane_dir = np.array([l.direction for l in lanes])
        self.lane_len = np.array([l.length for l in lanes])
        self._successors: dict[int, list[tuple[int, str]]] = {}
        by_from: dict[int, list[Lane]] = {}
        for l in lanes:
            by_from.setdefault(l.from_node, []).append(l)
        for l in lanes:
            succ = []
            for m in by_from.get(l.to_node, []):
                if m.to_node == l.from_node and m.seg_id == l.seg_id:
                    continue  # U-turn onto the reverse lane
                turn = _turn_of(l.heading, m.heading)
                if turn is not None:
                    succ.append((m.lane_id, turn))
            self._successors[l.lane_id] = sorted(succ)
        self.junction_ids = [n.node_id for n in nodes if n.kind == "junction"]
        self.junction_pos = np.array([nodes[i].pos for i in self.junction_ids])
        self._junction_index = {nid: k for k, nid in enumerate(self.junction_ids)}

    # -- queries -----------------------------------------------------------

    def successors(self, lane_id: int) -> list[tuple[int, str]]:
        return self._successors[lane_id]

    def lane_ends_at_junction(self, lane_id: int) -> bool:
        return self.nodes[self.lanes[lane_id].to_node].kind == "junction"

    def _segment_features(self, x: float, y: float):
        n = len(self.segments)
        dist = np.empty(n)
        s = np.empty(n)
        lat = np.empty(n)
        kernels.segment_features(x, y, self.seg_a, self.seg_b, dist, s, lat)
        return dist, s, lat

    def in_junction_core(self, xy, radius: float = CORE_RADIUS) -> bool:
        d = np.linalg.norm(self.junction_pos - np.asarray(xy), axis=1)
        return bool((d < radius).any())

    def nearest_junction(self, xy) -> tuple[int, float]:
        d = np.linalg.norm(self.junction_pos - np.asarray(xy), axis=1)
        k = int(np.argmin(d))
        return self.junction_ids[k], float(d[k])

    def drivable(self, xy) -> bool:
        x, y = float(xy[0]), float(xy[1])
        dist, _, _ = self._segment_features(x, y)
        if (dist <= HALF_ROAD).any():
            return True
        return self.in_junction_core(xy, CORE_RADIUS + 0.5)

    def nearest_lane(self, xy, heading: float | None = None):
        """Best matching lane id, progress s and signed lateral offset.

        Returns None when the position is not within any lane corridor
        (e.g. inside a junction core).
        """
        x, y = float(xy[0]), float(xy[1])
        n = len(self.lanes)
        dist = np.empty(n)
        s = np.empty(n)
        lat = np.empty(n)
        kernels.segment_features(x, y, self.lane_p0, self.lane_p1, dist, s, lat)
        ok = (np.abs(lat) <= LANE_WIDTH * 0.75) & (s >= -1.0) & (s <= self.lane_len + 1.0)
        if heading is not None:
            hvec = np.array([np.cos(heading), np.sin(heading)])
            ok &= self.lane_dir @ hvec > 0.0
        if not ok.any():
            return None
        idx = np.flatnonzero(ok)
        best = idx[np.argmin(np.abs(lat[idx]))]
        return int(best), float(s[best]), float(lat[best])

    def validate(self) -> None:
        """Graph closure: every lane endpoint resolves to a known node."""
        for l in self.lanes:
            for node_id in (l.from_node, l.to_node):
                if not 0 <= node_id < len(self.nodes):
                    raise DataFormatError(f"lane {l.lane_id} has dangling node")
        for s in self.segments:
            assert self.nodes[s.node_a].kind in ("junction", "boundary")
            assert self.nodes[s.node_b].kind in ("junction", "boundary")


def build_town(town_id: str, scale: float | None = None) -> RoadNetwork:
    """Construct one of the two fixed towns.

    train: 4x4 junction grid, 100 m blocks, boundary stubs on the perimeter
    (40 road segments, 16 junctions).  test: 3x5 grid, 70 m blocks, plus one
    diagonal connector; topologically distinct from the train town.
    """
    if town_id == "train":
        nx_, ny_ = 4, 4
        block = scale if scale else 100.0
        diagonal = None
    elif town_id == "test":
        nx_, ny_ = 3, 5
        block = scale if scale else 70.0
        diagonal = ((0, 0), (1, 1))
    else:
        raise ValueError(f"unknown town {town_id!r}")

    nodes: list[Node] = []
    grid: dict[tuple[int, int], int] = {}
    for i in range(nx_):
        for j in range(ny_):
            grid[(i, j)] = len(nodes)
            nodes.append(
                Node(len(nodes), np.array([i * block, j * block]), "junction", True)
            )

    segments: list[Segment] = []

    def add_segment(a: int, b: int, axis: int):
        segments.append(Segment(len(segments), a, b, axis))

    for i in range(nx_):
        for j in range(ny_):
            if i + 1 < nx_:
                add_segment(grid[(i, j)], grid[(i + 1, j)], 0)
            if j + 1 < ny_:
                add_segment(grid[(i, j)], grid[(i, j + 1)], 1)
    if diagonal is not None:
        add_segment(grid[diagonal[0]], grid[diagonal[1]], 2)

    # Boundary stubs: one per missing grid neighbor on the perimeter.
    for i in range(nx_):
        for j in range(ny_):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                if (i + di, j + dj) in grid:
                    continue
                direction = np.array([di, dj], dtype=float)
                pos = nodes[grid[(i, j)]].pos + direction * STUB_LEN
                stub = Node(len(nodes), pos, "boundary", False)
                nodes.append(stub)
                add_segment(grid[(i, j)], stub.node_id, 0 if di else 1)

    lanes: list[Lane] = []
    for seg in segments:
        pa = nodes[seg.node_a].pos.astype(float)
        pb = nodes[seg.node_b].pos.astype(float)
        for from_n, to_n in ((seg.node_a, seg.node_b), (seg.node_b, seg.node_a)):
            a = nodes[from_n].pos.astype(float)
            b = nodes[to_n].pos.astype(float)
            d = b - a
            length = float(np.linalg.norm(d))
            u = d / length
            right = np.array([u[1], -u[0]])
            pull_a = CORE_RADIUS if nodes[from_n].kind == "junction" else 0.0
            pull_b = CORE_RADIUS if nodes[to_n].kind == "junction" else 0.0
            p0 = a + u * pull_a + right * LANE_OFFSET
            p1 = b - u * pull_b + right * LANE_OFFSET
            lanes.append(
                Lane(
                    len(lanes),
                    seg.seg_id,
                    from_n,
                    to_n,
                    p0,
                    p1,
                    u,
                    float(np.linalg.norm(p1 - p0)),
                )
            )

    crosswalks: list[Crosswalk] = []
    for seg in segments:
        for node_id in (seg.node_a, seg.node_b):
            node = nodes[node_id]
            if node.kind != "junction":
                continue
            other = seg.node_b if node_id == seg.node_a else seg.node_a
            u = nodes[other].pos - node.pos
            u = u / np.linalg.norm(u)
            right = np.array([u[1], -u[0]])
            # Far enough out that a car stopped at the stop line (1.5 m behind
            # the core boundary) keeps > 2 m clearance from the walking line.
            center = node.pos + u * (CORE_RADIUS + 5.0)
            half = HALF_ROAD + 1.5
            crosswalks.append(Crosswalk(node_id, center - right * half, center + right * half))

    net = RoadNetwork(town_id, nodes, segments, lanes, crosswalks)
    net.validate()
    return net


# -- traffic lights ---------------------------------------------------------


@dataclass(frozen=True)
class LightGroup:
    """One signal group: a junction approach axis with its own cycle."""

    group_id: int
    node_id: int
    axis: int  # 0: x-aligned approaches, 1: y-aligned
    green: float
    red: float
    offset: float

    def is_green(self, clock: float) -> bool:
        return (clock + self.offset) % (self.green + self.red) < self.green

    def time_to_red(self, clock: float) -> float:
        """Remaining green time; 0 when already red."""
        phase = (clock + self.offset) % (self.green + self.red)
        return max(0.0, self.green - phase)


@dataclass(frozen=True)
class TrafficLightState:
    group_id: int
    phase: str  # "red" | "green"
    time_in_phase: float
    cycle: tuple[float, float]


def light_state(group: LightGroup, clock: float) -> TrafficLightState:
    phase = (clock + group.offset) % (group.green + group.red)
    if phase < group.green:
        return TrafficLightState(group.group_id, "green", phase, (group.green, group.red))
    return TrafficLightState(
        group.group_id, "red", phase - group.green, (group.green, group.red)
    )


def make_light_groups(network: RoadNetwork, rng: np.random.Generator) -> list[LightGroup]:
    """Two complementary groups per lit junction.

    The y-axis group runs the nominal 10 s green / 8 s red cycle; the x-axis
    group gets the complementary window (8 s green / 10 s red, shifted) so
    conflicting approaches are never green together.  Diagonal approaches
    map onto the x-axis group.
    """
    groups: list[LightGroup] = []
    for node in network.nodes:
        if not node.lit:
            continue
        offset = float(rng.uniform(0.0, CYCLE_S))
        groups.append(LightGroup(len(groups), node.node_id, 1, GREEN_S, RED_S, offset))
        # (clock + offset + RED_S) % cycle < RED_S  <=>  y-group phase in
        # [GREEN_S, cycle): exactly the y-group's red window.
        groups.append(
            LightGroup(len(groups), node.node_id, 0, RED_S, GREEN_S, offset + RED_S)
        )
    return groups


# -- routes -----------------------------------------------------------------


@dataclass
class RouteEvent:
    s_stop: float  # arc length of the stop line (end of the incoming lane)
    s_exit: float  # arc length where the outgoing lane begins
    node_id: int
    axis: int  # approach axis of the incoming lane
    turn: str  # "left" | "right" | "cross"
    lit: bool


class Route:
    """A lane sequence flattened into a waypoint polyline with junction events."""

    def __init__(self, network: RoadNetwork, lane_ids: list[int]):
        self.network = network
        self.lane_ids: list[int] = []
        self.points = np.zeros((0, 2))
        self.cumlen = np.zeros(0)
        self.events: list[RouteEvent] = []
        for lid in lane_ids:
            self.extend(lid)

    @property
    def length(self) -> float:
        return float(self.cumlen[-1]) if self.cumlen.size else 0.0

    def _append_points(self, pts: np.ndarray) -> None:
        last = self.points[-1] if self.points.shape[0] else None
        keep = []
        for p in pts:
            if last is not None and np.linalg.norm(p - last) <= 1e-9:
                continue
            keep.append(p)
            last = p
        if not keep:
            return
        self.points = np.vstack([self.points, np.array(keep)])
        d = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.cumlen = np.concatenate([[0.0], np.cumsum(d)])

    def extend(self, lane_id: int) -> None:
        net = self.network
        lane = net.lanes[lane_id]
        if self.lane_ids:
            prev = net.lanes[self.lane_ids[-1]]
            node = net.nodes[prev.to_node]
            turn = _turn_of(prev.heading, lane.heading)
            s_stop = float(self.cumlen[-1])
            conn, s_join = _connector(prev.p1, prev.direction, lane)
            join = lane.p0 + lane.direction * s_join
            self._append_points(conn)
            seg = net.segments[prev.seg_id]
            self.events.append(
                RouteEvent(
                    s_stop,
                    float(self.cumlen[-1]),
                    node.node_id,
                    seg.axis if seg.axis != 2 else 0,
                    turn or "cross",
                    node.lit,
                )
            )
        if self.lane_ids:
            self._append_points(np.vstack([join, lane.p1]))
        else:
            self._append_points(np.vstack([lane.p0, lane.p1]))
        self.lane_ids.append(lane_id)

    def point_at(self, s: float):
        x, y, ux, uy = kernels.polyline_point(self.points, self.cumlen, float(s))
        return np.array([x, y]), np.array([ux, uy])

    def project(self, xy, s_prev: float) -> float:
        s, _ = kernels.polyline_project(
            self.points, self.cumlen, float(s_prev), float(xy[0]), float(xy[1]), 8.0, 20.0
        )
        return float(s)

    def next_event(self, s: float, committed: float = 0.3) -> RouteEvent | None:
        for ev in self.events:
            if ev.s_stop > s - committed and s < ev.s_exit:
                return ev
            if ev.s_stop > s:
                return ev
        return None

    def turn_count(self) -> int:
        return sum(1 for ev in self.events if ev.turn in ("left", "right"))


def _left_normal(h: float) -> np.ndarray:
    return np.array([-np.sin(h), np.cos(h)])


def _dubins_csc(p0, h0, p1, h1, radius: float):
    """Shortest arc-straight-arc path between two poses.

    Returns (waypoints, largest_arc_sweep_rad) or None when no circle
    tangent exists.  Constant-radius arcs keep the path drivable by a
    kinematic bicycle with a bounded steering angle.
    """
    best = None
    best_total = np.inf
    for s0 in (1.0, -1.0):
        c0 = p0 + radius * s0 * _left_normal(h0)
        for s1 in (1.0, -1.0):
            c1 = p1 + radius * s1 * _left_normal(h1)
            d = c1 - c0
            dist = float(np.hypot(d[0], d[1]))
            theta = float(np.arctan2(d[1], d[0]))
            if s0 == s1:
                th = theta
            else:
                if dist < 2.0 * radius:
                    continue
                th = theta + s0 * float(np.arcsin(2.0 * radius / dist))
            a = c0 - radius * s0 * _left_normal(th)
            b = c1 - radius * s1 * _left_normal(th)
            straight = float(np.dot([np.cos(th), np.sin(th)], b - a))
            if straight < -1e-6:
                continue
            sw0 = (s0 * (th - h0)) % (2.0 * np.pi)
            sw1 = (s1 * (h1 - th)) % (2.0 * np.pi)
            if sw0 > 2.0 * np.pi - 1e-6:
                sw0 = 0.0
            if sw1 > 2.0 * np.pi - 1e-6:
                sw1 = 0.0
            total = radius * (sw0 + sw1) + max(straight, 0.0)
            if total < best_total:
                best_total = total
                best = (s0, c0, sw0, s1, c1, sw1, a, b, th)
    if best is None:
        return None
    s0, c0, sw0, s1, c1, sw1, a, b, th = best
    pts = [np.asarray(p0, dtype=float)]

    def _arc(center, side, h_start, sweep):
        n = max(2, int(np.ceil(radius * sweep / 0.6)))
        for phi in np.linspace(0.0, sweep, n + 1)[1:]:
            h = h_start + side * phi
            pts.append(center - radius * side * _left_normal(h))

    _arc(c0, s0, h0, sw0)
    run = float(np.linalg.norm(b - a))
    if run > 1e-6:
        n = max(1, int(np.ceil(run)))
        for t in np.linspace(0.0, 1.0, n + 1)[1:]:
            pts.append(a + t * (b - a))
    _arc(c1, s1, th, sw1)
    pts.append(np.asarray(p1, dtype=float))
    return np.array(pts), float(max(sw0, sw1))


def _connector(p1, d1, lane: Lane) -> tuple[np.ndarray, float]:
    """Drivable waypoints joining a lane end to the next lane.

    The join point is advanced along the target lane until the connector
    needs no arc beyond ~200 degrees, which keeps sharp merges (the 135
    degree diagonal-road turns) from doubling back on themselves.
    Returns (waypoints, join arc length along the target lane).
    """
    p1 = np.asarray(p1, dtype=float)
    h0 = float(np.arctan2(d1[1], d1[0]))
    h1 = lane.heading
    s_max = max(lane.length - 5.0, 0.0)
    for s_join in np.arange(0.0, min(20.0, s_max) + 1e-9, 2.0):
        q = lane.p0 + lane.direction * s_join
        res = _dubins_csc(p1, h0, q, h1, TURN_RADIUS)
        if res is not None and res[1] <= 3.5:
            return res[0], float(s_join)
    res = _dubins_csc(p1, h0, lane.p0, h1, TURN_RADIUS)
    if res is None:  # pragma: no cover - poses at identical positions
        return np.vstack([p1, lane.p0]), 0.0
    return res[0], 0.0


# -- agents and world -------------------------------------------------------


@dataclass
class AgentState:
    agent_id: int
    kind: str  # "car" | "pedestrian"
    x: float
    y: float
    heading: float
    speed: float
    route: Route | None = None
    route_s: float = 0.0
    # Pedestrian crossing state.
    ped_path: tuple[np.ndarray, np.ndarray] | None = None
    ped_target: int = 1
    ped_dwell: tuple[float, float] = (5.0, 5.0)
    ped_wait: float = 0.0

    @property
    def pose(self) -> Pose2D:
        return Pose2D(self.x, self.y, self.heading)

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


def pure_pursuit_steer(agent: AgentState, lookahead: float = LOOKAHEAD) -> float:
    target, _ = agent.route.point_at(agent.route_s + lookahead)
    dx = target[0] - agent.x
    dy = target[1] - agent.y
    c, s = np.cos(agent.heading), np.sin(agent.heading)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    dist_sq = lx * lx + ly * ly
    if dist_sq < 1e-12:
        return 0.0
    steer = float(np.arctan2(2.0 * WHEELBASE * ly, dist_sq))
    return float(np.clip(steer, -MAX_STEER, MAX_STEER))


def _relative(agent: AgentState, other_xy) -> tuple[float, float]:
    dx = other_xy[0] - agent.x
    dy = other_xy[1] - agent.y
    c, s = np.cos(agent.heading), np.sin(agent.heading)
    return c * dx + s * dy, -s * dx + c * dy


def leading_vehicle(agent: AgentState, cars: list[AgentState]):
    """Nearest car ahead in the agent's corridor: (gap, relative speed)."""
    best = None
    for other in cars:
        if other.agent_id == agent.agent_id:
            continue
        # Oncoming traffic is handled by lane geometry and junction
        # exclusion, not by the follow gap.
        if np.cos(other.heading - agent.heading) <= 0.0:
            continue
        lx, ly = _relative(agent, (other.x, other.y))
        if 0.0 < lx <= 25.0 and abs(ly) <= 2.2:
            if best is None or lx < best[0]:
                rel_v = other.speed * np.cos(other.heading - agent.heading) - agent.speed
                best = (lx, float(rel_v))
    return best


def crossing_ped_distance(agent: AgentState, peds: list[AgentState]) -> float | None:
    best = None
    for ped in peds:
        # A pedestrian standing at its kerb is yielding (it will not step
        # off while a car is near) and does not gate traffic.
        if ped.ped_path is not None:
            kerb = ped.ped_path[1 - ped.ped_target]
            if ped.speed == 0.0 and float(np.linalg.norm(kerb - ped.xy)) < 1e-6:
                continue
        lx, ly = _relative(agent, (ped.x, ped.y))
        c, s = np.cos(agent.heading), np.sin(agent.heading)
        lvy = ped.speed * (-s * np.cos(ped.heading) + c * np.sin(ped.heading))
        approaching = ly * lvy < -1e-9  # walking toward the car's centerline
        band = 6.0 if approaching else 3.0
        if 0.0 < lx <= 16.0 and abs(ly) <= band:
            if best is None or lx < best:
                best = lx
        elif -3.0 < lx <= 0.0 and abs(ly) <= band and approaching:
            # Alongside and still closing: hold the stop until it has passed.
            best = 0.0
    return best


class World:
    """Road network plus agents, lights and a clock, stepped at 0.1 s."""

    def __init__(self, network: RoadNetwork, agents, light_groups, seed: int):
        self.network = network
        self.agents: list[AgentState] = agents
        self.light_groups = light_groups
        self._groups_by_node: dict[tuple[int, int], LightGroup] = {
            (g.node_id, g.axis): g for g in light_groups
        }
        self.clock = 0.0
        self.seed = seed
        self.rng = np.random.default_rng((seed, 0xE0))

    @property
    def cars(self) -> list[AgentState]:
        return [a for a in self.agents if a.kind == "car"]

    @property
    def pedestrians(self) -> list[AgentState]:
        return [a for a in self.agents if a.kind == "pedestrian"]

    def light_green(self, node_id: int, axis: int, clock: float | None = None) -> bool:
        group = self._groups_by_node.get((node_id, axis))
        if group is None:
            return True
        return group.is_green(self.clock if clock is None else clock)

    def light_time_to_red(self, node_id: int, axis: int) -> float:
        group = self._groups_by_node.get((node_id, axis))
        if group is None:
            return np.inf
        return group.time_to_red(self.clock)

    def snapshot(self) -> np.ndarray:
        return np.array([[a.x, a.y, a.heading, a.speed] for a in self.agents])

    # -- stepping ----------------------------------------------------------

    def commands(self, ego_command=None) -> np.ndarray:
        cmds = np.zeros((len(self.agents), 2))
        for i, agent in enumerate(self.agents):
            if agent.kind != "car":
                continue
            if i == 0 and ego_command is not None:
                cmds[i] = ego_command
            else:
                cmds[i] = autopilot_command(agent, self)
        return cmds

    def step(self, dt: float = TICK, ego_command=None, cmds: np.ndarray | None = None):
        if cmds is None:
            cmds = self.commands(ego_command)
        states = self.snapshot()
        is_car = np.array([1 if a.kind == "car" else 0 for a in self.agents], dtype=np.uint8)
        kernels.integrate_cars(states, cmds, is_car, dt, WHEELBASE, SPEED_LIMIT)
        for i, agent in enumerate(self.agents):
            if agent.kind == "car":
                agent.x, agent.y = float(states[i, 0]), float(states[i, 1])
                agent.heading, agent.speed = float(states[i, 2]), float(states[i, 3])
                if agent.route is not None and agent.route.points.shape[0] >= 2:
                    agent.route_s = agent.route.project(agent.xy, agent.route_s)
                    self._maybe_extend_route(agent)
            else:
                self._step_pedestrian(agent, dt)
        self.clock += dt
        return cmds

    def _maybe_extend_route(self, agent: AgentState) -> None:
        route = agent.route
        while route.length - agent.route_s < 60.0:
            succ = [
                (lid, turn)
                for lid, turn in self.network.successors(route.lane_ids[-1])
                if self.network.nodes[self.network.lanes[lid].to_node].kind == "junction"
            ]
            if not succ:
                break
            pick = succ[int(self.rng.integers(len(succ)))]
            route.extend(pick[0])

    def _step_pedestrian(self, ped: AgentState, dt: float) -> None:
        if ped.ped_path is None:
            ped.speed = 0.0
            return
        if ped.ped_wait > 0.0:
            ped.ped_wait = max(0.0, ped.ped_wait - dt)
            ped.speed = 0.0
            return
        target = ped.ped_path[ped.ped_target]
        delta = target - ped.xy
        dist = float(np.linalg.norm(delta))
        step = PED_SPEED * dt
        # Look both ways: a crossing leg only starts once every car is clear
        # of the kerb; once committed, the cars' pedestrian gates take over.
        origin = ped.ped_path[1 - ped.ped_target]
        at_kerb = float(np.linalg.norm(origin - ped.xy)) < 1e-6
        if at_kerb and any(
            np.linalg.norm(car.xy - ped.xy) < PED_CROSSING_CLEARANCE
            for car in self.cars
        ):
            ped.speed = 0.0
            return
        if dist <= step:
            ped.x, ped.y = float(target[0]), float(target[1])
            ped.ped_wait = ped.ped_dwell[ped.ped_target]
            ped.ped_target = 1 - ped.ped_target
            ped.speed = 0.0
        else:
            u = delta / dist
            ped.x += float(u[0]) * step
            ped.y += float(u[1]) * step
            ped.heading = float(np.arctan2(u[1], u[0]))
            ped.speed = PED_SPEED


def autopilot_command(agent: AgentState, world: World) -> tuple[float, float]:
    """Expert policy: pure pursuit plus rule-based speed control.

    Stops before red (or about-to-switch) lights, keeps an 8 m gap to the
    leader, yields to crossing pedestrians and enforces one-car-at-a-time
    junction cores (priority to the lowest waiting agent id).
    """
    route = agent.route
    if route is None or route.points.shape[0] < 2:
        return (0.0, 0.0)
    if route.length - agent.route_s < 1.0:
        # Route exhausted: brake to a stop.
        return (0.0, float(np.clip(-2.5 * agent.speed, ACCEL_MIN, 0.0)))

    steer = pure_pursuit_steer(agent)
    stop_distances: list[float] = []

    ev = route.next_event(agent.route_s)
    if ev is not None:
        d = ev.s_stop - agent.route_s
        if -0.3 <= d <= 50.0:
            must_stop = False
            if ev.lit and d > 0.3:
                if not world.light_green(ev.node_id, ev.axis):
                    must_stop = True
                else:
                    eta = d / max(agent.speed, 1.0)
                    if world.light_time_to_red(ev.node_id, ev.axis) < eta + 0.8:
                        must_stop = True
            if not must_stop and 0.3 < d <= 15.0:
                if not _may_enter_junction(agent, world, ev, d):
                    must_stop = True
            if must_stop:
                stop_distances.append(d - STOP_MARGIN)

    lead = leading_vehicle(agent, world.cars)
    if lead is not None:
        stop_distances.append(lead[0] - FOLLOW_GAP)

    ped_d = crossing_ped_distance(agent, world.pedestrians)
    if ped_d is not None:
        stop_distances.append(ped_d - PED_GAP)

    v_target = TARGET_SPEED
    if ev is not None and ev.s_stop - 2.0 <= agent.route_s <= ev.s_exit:
        v_target = JUNCTION_SPEED
    for d in stop_distances:
        v_target = min(v_target, float(np.sqrt(2.0 * BRAKE_COMFORT * max(d, 0.0))))
    accel = float(np.clip(2.5 * (v_target - agent.speed), ACCEL_MIN, ACCEL_MAX))
    return (steer, accel)


def _may_enter_junction(agent: AgentState, world: World, ev: RouteEvent, d: float) -> bool:
    node_pos = world.network.nodes[ev.node_id].pos
    for other in world.cars:
        if other.agent_id == agent.agent_id:
            continue
        if float(np.linalg.norm(other.xy - node_pos)) < CORE_OCCUPIED_RADIUS:
            return False
    for other in world.cars:
        if other.agent_id == agent.agent_id or other.route is None:
            continue
        oev = other.route.next_event(other.route_s)
        if oev is None or oev.node_id != ev.node_id:
            continue
        od = oev.s_stop - other.route_s
        if not -0.3 <= od <= 12.0:
            continue
        # A red-held car does not block the junction.
        if oev.lit and not world.light_green(oev.node_id, oev.axis):
            continue
        # Strict priority by (distance to stop line, id): closer cars go
        # first, ids only order near-simultaneous arrivals.  This is a total
        # order, so exactly one contender proceeds and queues cannot
        # deadlock on a lower-id follower.
        if od < d - 0.5 or (abs(od - d) <= 0.5 and other.agent_id < agent.agent_id):
            return False
    return True


# -- spawning ---------------------------------------------------------------


def _internal_lanes(network: RoadNetwork) -> list[int]:
    out = []
    for l in network.lanes:
        if (
            network.nodes[l.from_node].kind == "junction"
            and network.nodes[l.to_node].kind == "junction"
        ):
            out.append(l.lane_id)
    return out


def _random_route(network: RoadNetwork, rng: np.random.Generator, start_lane: int) -> Route:
    lane_ids = [start_lane]
    for _ in range(12):
        succ = [
            (lid, turn)
            for lid, turn in network.successors(lane_ids[-1])
            if network.nodes[network.lanes[lid].to_node].kind == "junction"
        ]
        if not succ:
            break
        lane_ids.append(succ[int(rng.integers(len(succ)))][0])
    return Route(network, lane_ids)


def spawn_scenario(
    network: RoadNetwork, n_cars: int, n_pedestrians: int, seed: int
) -> World:
    """Place agents without overlap and assign seeded random routes."""
    if n_cars < 1:
        raise SpawnError("at least the ego car is required")
    rng = np.random.default_rng((seed, 0x5C))
    light_groups = make_light_groups(network, rng)
    lanes = _internal_lanes(network)
    agents: list[AgentState] = []
    placed: list[np.ndarray] = []
    for car_idx in range(n_cars):
        for attempt in range(400):
            lid = lanes[int(rng.integers(len(lanes)))]
            lane = network.lanes[lid]
            s = float(rng.uniform(4.0, lane.length - 4.0))
            pos = lane.p0 + lane.direction * s
            if all(np.linalg.norm(pos - p) >= 10.0 for p in placed):
                break
        else:
            raise SpawnError(f"could not place car {car_idx}: map capacity exceeded")
        placed.append(pos)
        route = _random_route(network, rng, lid)
        agent = AgentState(
            agent_id=car_idx,
            kind="car",
            x=float(pos[0]),
            y=float(pos[1]),
            heading=lane.heading,
            speed=0.0,
            route=route,
        )
        agent.route_s = route.project(pos, s)
        agents.append(agent)
    for ped_idx in range(n_pedestrians):
        cw = network.crosswalks[int(rng.integers(len(network.crosswalks)))]
        start = int(rng.integers(2))
        path = (cw.p0.copy(), cw.p1.copy())
        pos = path[start]
        agents.append(
            AgentState(
                agent_id=n_cars + ped_idx,
                kind="pedestrian",
                x=float(pos[0]),
                y=float(pos[1]),
                heading=0.0,
                speed=0.0,
                ped_path=path,
                ped_target=1 - start,
                ped_dwell=(float(rng.uniform(4.0, 10.0)), float(rng.uniform(4.0, 10.0))),
                ped_wait=float(rng.uniform(0.0, 5.0)),
            )
        )
    return World(network, agents, light_groups, seed)


# -- episode logs -----------------------------------------------------------


class EpisodeLog:
    """Immutable per-tick record of one simulated episode (0.1 s ticks)."""

    def __init__(self, meta: dict, kinds, agent_ids, groups, clock, states, cmds, lights):
        self.meta = meta
        self.kinds = list(kinds)
        self.agent_ids = list(agent_ids)
        self.groups = groups  # list of (node_id, axis, green, red, offset)
        self.clock = np.asarray(clock, dtype=np.float64)
        self.states = np.asarray(states, dtype=np.float64)  # (n, A, 4)
        self.cmds = np.asarray(cmds, dtype=np.float64)  # (n, A, 2)
        self.lights = np.asarray(lights, dtype=np.uint8)  # (n, G) 1 = green
        self.group_index = {(g[0], g[1]): k for k, g in enumerate(self.groups)}

    def __len__(self) -> int:
        return self.clock.size

    @property
    def n_agents(self) -> int:
        return len(self.kinds)

    def car_indices(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == "car"]

    def ped_indices(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == "pedestrian"]

    def light_green_at(self, tick: int, node_id: int, axis: int) -> bool:
        k = self.group_index.get((node_id, axis))
        if k is None:
            return True
        return bool(self.lights[tick, k])

    # -- serialization (JSON Lines) -----------------------------------------

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            header = {
                "format_version": LOG_FORMAT_VERSION,
                **self.meta,
                "kinds": self.kinds,
                "agent_ids": self.agent_ids,
                "groups": [list(g) for g in self.groups],
            }
            f.write(json.dumps(header) + "\n")
            for i in range(len(self)):
                rec = {
                    "t": self.clock[i],
                    "s": self.states[i].tolist(),
                    "c": self.cmds[i].tolist(),
                    "l": self.lights[i].tolist(),
                }
                f.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "EpisodeLog":
        with open(path) as f:
            lines = f.read().splitlines()
        if not lines:
            raise DataFormatError(f"{path}: empty episode log")
        header = json.loads(lines[0])
        if header.get("format_version") != LOG_FORMAT_VERSION:
            raise DataFormatError(f"{path}: unsupported format_version")
        clock, states, cmds, lights = [], [], [], []
        for lineno, line in enumerate(lines[1:], start=2):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}: corrupt record at line {lineno}") from e
            clock.append(rec["t"])
            states.append(rec["s"])
            cmds.append(rec["c"])
            lights.append(rec["l"])
        meta = {
            k: v
            for k, v in header.items()
            if k not in ("format_version", "kinds", "agent_ids", "groups")
        }
        return cls(
            meta,
            header["kinds"],
            header["agent_ids"],
            [tuple(g) for g in header["groups"]],
            clock,
            states,
            cmds,
            lights,
        )


def record_episode(
    network: RoadNetwork,
    seed: int,
    duration: float,
    n_cars: int | None = None,
    n_pedestrians: int | None = None,
) -> EpisodeLog:
    """Run all agents under the autopilot and log every tick."""
    rng = np.random.default_rng((seed, 0xEC))
    if n_cars is None:
        n_cars = int(rng.integers(5, 16))
    if n_pedestrians is None:
        n_pedestrians = int(rng.integers(2, 7))
    world = spawn_scenario(network, n_cars, n_pedestrians, seed)
    n_ticks = int(round(duration / TICK))
    clock = np.empty(n_ticks)
    states = np.empty((n_ticks, len(world.agents), 4))
    cmds = np.empty((n_ticks, len(world.agents), 2))
    lights = np.empty((n_ticks, len(world.light_groups)), dtype=np.uint8)
    for i in range(n_ticks):
        clock[i] = world.clock
        states[i] = world.snapshot()
        lights[i] = [g.is_green(world.clock) for g in world.light_groups]
        cmds[i] = world.step()
    meta = {
        "seed": seed,
        "town": network.town_id,
        "n_cars": n_cars,
        "n_pedestrians": n_pedestrians,
        "tick_s": TICK,
    }
    groups = [
        (g.node_id, g.axis, g.green, g.red, g.offset) for g in world.light_groups
    ]
    return EpisodeLog(
        meta,
        [a.kind for a in world.agents],
        [a.agent_id for a in world.agents],
        groups,
        clock,
        states,
        cmds,
        lights,
    )


def replay_episode(network: RoadNetwork, log: EpisodeLog) -> np.ndarray:
    """Re-integrate the recorded commands; returns the replayed state array."""
    states = log.states[0].copy()
    is_car = np.array([1 if k == "car" else 0 for k in log.kinds], dtype=np.uint8)
    out = np.empty_like(log.states)
    out[0] = states
    for i in range(1, len(log)):
        kernels.integrate_cars(states, log.cmds[i - 1], is_car, TICK, WHEELBASE, SPEED_LIMIT)
        # Pedestrians are replayed from the log directly (constant-velocity
        # segments; their commands are not logged).
        ped = is_car == 0
        states[ped] = log.states[i][ped]
        out[i] = states
    return out
