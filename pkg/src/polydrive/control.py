"""Trajectory-following control and closed-loop episode execution.

The predicted ego polynomial (in the current ego frame) is turned into a
steering / acceleration command by two PID loops: the lateral loop tracks
the trajectory's y-value at a 0.5 s lookahead, the speed loop tracks a
target derived from the predicted 2 s arc length (arc length / 2, capped at
the cruise limit).  A predicted stop therefore brakes the car without any
separate brake signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import (
    N_NEIGHBORS,
    NC_LOOKAHEAD_S,
    NC_TURN_DEG,
    NC_ZONE_RADIUS,
    T_STEPS,
    NavigationCommand,
    Sample,
    assemble_sample,
)
from .simworld import (
    ACCEL_MAX,
    ACCEL_MIN,
    MAX_STEER,
    TARGET_SPEED,
    TICK,
    AgentState,
    EpisodeLog,
    RoadNetwork,
    Route,
    World,
    autopilot_command,
)
from .trajectory import PolyTrajectory2D, Pose2D, sample_trajectory

LOOKAHEAD_S = 0.5
GOAL_TOLERANCE = 3.0
TIMEOUT_SPEED = 10.0 / 3.6  # reference speed (m/s) in the timeout formula
INTEGRAL_CLAMP = 10.0


@dataclass(frozen=True)
class PidChannel:
    kp: float
    ki: float
    kd: float
    integral: float = 0.0
    prev_error: float | None = None

    def update(
        self, error: float, dt: float, lo: float = -np.inf, hi: float = np.inf
    ) -> tuple[float, "PidChannel"]:
        integral = self.integral + error * dt
        integral = float(np.clip(integral, -INTEGRAL_CLAMP, INTEGRAL_CLAMP))
        deriv = 0.0 if self.prev_error is None else (error - self.prev_error) / dt
        out = self.kp * error + self.ki * integral + self.kd * deriv
        # anti-windup: while the output saturates and the error keeps pushing
        # into the limit, stop accumulating the integral
        if (out > hi and error > 0.0) or (out < lo and error < 0.0):
            integral = self.integral
        return out, replace(self, integral=integral, prev_error=error)


@dataclass(frozen=True)
class PidState:
    lateral: PidChannel = field(default_factory=lambda: PidChannel(1.2, 0.0, 0.05))
    speed: PidChannel = field(default_factory=lambda: PidChannel(1.0, 0.1, 0.0))
    dt: float = TICK


def trajectory_speed_target(poly: PolyTrajectory2D) -> float:
    """Predicted 2 s arc length / 2, capped at the cruise speed."""
    pts = sample_trajectory(poly).xy
    arc = float(np.linalg.norm(pts[0]))
    arc += float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
    return min(arc / 2.0, TARGET_SPEED)


def pid_track(
    poly: PolyTrajectory2D, state: AgentState, pid: PidState
) -> tuple[float, float, PidState]:
    """One control tick; the polynomial must be in the current ego frame."""
    lat_error = float(np.polyval(poly.cy, LOOKAHEAD_S))
    steer_raw, lateral = pid.lateral.update(lat_error, pid.dt, -MAX_STEER, MAX_STEER)
    steer = float(np.clip(steer_raw, -MAX_STEER, MAX_STEER))

    speed_error = trajectory_speed_target(poly) - state.speed
    accel_raw, speed = pid.speed.update(speed_error, pid.dt, ACCEL_MIN, ACCEL_MAX)
    accel = float(np.clip(accel_raw, ACCEL_MIN, ACCEL_MAX))
    return steer, accel, PidState(lateral=lateral, speed=speed, dt=pid.dt)


# -- live sample construction ---------------------------------------------------


def live_navigation_command(
    route: Route, s_now: float, speed: float, network: RoadNetwork
) -> NavigationCommand:
    """Route-based counterpart of the offline maneuver classifier.

    Walks the route at the current speed (floored at 0.5 m/s) over the 5 s
    lookahead; if a junction zone (15 m radius) is entered, the route-tangent
    heading change across the zone decides left / right / cross.
    """
    step = max(speed, 0.5) * TICK
    n_steps = int(round(NC_LOOKAHEAD_S / TICK))
    entry = None
    for i in range(n_steps + 1):
        s = min(s_now + i * step, route.length)
        pos, _ = route.point_at(s)
        node_id, d = network.nearest_junction(pos)
        if d < NC_ZONE_RADIUS:
            entry = (s, node_id)
            break
    if entry is None:
        return NavigationCommand.KEEP_LANE
    s_in, node_id = entry
    node_pos = network.nodes[node_id].pos
    s = s_in
    while s < route.length:
        pos, _ = route.point_at(s)
        if float(np.linalg.norm(pos - node_pos)) >= NC_ZONE_RADIUS:
            break
        s += step if step > 1e-9 else 0.5
    _, u_in = route.point_at(s_in)
    _, u_out = route.point_at(min(s, route.length))
    h_in = float(np.arctan2(u_in[1], u_in[0]))
    h_out = float(np.arctan2(u_out[1], u_out[0]))
    dh = (h_out - h_in + np.pi) % (2 * np.pi) - np.pi
    if dh > np.deg2rad(NC_TURN_DEG):
        return NavigationCommand.LEFT
    if dh < -np.deg2rad(NC_TURN_DEG):
        return NavigationCommand.RIGHT
    return NavigationCommand.CROSS


class LiveSampler:
    """Rolling 2 s history over a stepped world, mirroring offline extraction."""

    def __init__(self, world: World, ego_index: int = 0):
        self.world = world
        self.ego_index = ego_index
        self.kinds = [a.kind for a in world.agents]
        self.agent_ids = [a.agent_id for a in world.agents]
        self.car_rows = [i for i, k in enumerate(self.kinds) if k == "car"]
        self.ped_rows = [i for i, k in enumerate(self.kinds) if k == "pedestrian"]
        self.other_rows = [r for r in self.car_rows if r != ego_index]
        self.history: list[np.ndarray] = []

    def observe(self) -> None:
        """Record the current world state; call once per tick before stepping."""
        snap = self.world.snapshot()
        if not self.history:
            self.history = [snap.copy() for _ in range(T_STEPS)]
        self.history.append(snap)
        if len(self.history) > T_STEPS:
            self.history.pop(0)

    def build(self, nc: NavigationCommand | None = None) -> Sample:
        """Assemble the model inputs for the most recent observed tick."""
        past = np.stack(self.history)  # (T, A, 4)
        ego = self.world.agents[self.ego_index]
        frame_state = past[-1, self.ego_index]
        frame = Pose2D(*frame_state[:3])
        car_tracks = [
            (self.agent_ids[r], past[:, r, :2], tuple(past[-1, r]))
            for r in self.other_rows
        ]
        peds = [tuple(past[-1, r, :2]) for r in self.ped_rows]
        if nc is None:
            nc = live_navigation_command(
                ego.route, ego.route_s, float(frame_state[3]), self.world.network
            )
        sample, _ = assemble_sample(
            self.world.network,
            frame,
            float(frame_state[3]),
            past[:, self.ego_index, :2],
            car_tracks,
            peds,
            self.world.light_green,
            nc,
        )
        return sample


# -- closed-loop episodes --------------------------------------------------------


@dataclass
class DriveResult:
    reached_goal: bool
    elapsed: float
    trace: EpisodeLog
    infractions: list = field(default_factory=list)
    lights_encountered: int = 0
    lights_run: int = 0
    distance_m: float = 0.0

    def __post_init__(self):
        if self.lights_run > self.lights_encountered:
            raise ValueError("lights_run cannot exceed lights_encountered")


def route_timeout(route_length: float) -> float:
    """Three times the time needed to cover the route at 10 km/h."""
    return 3.0 * route_length / TIMEOUT_SPEED


def _model_policy(params):
    from . import model

    def policy(sample: Sample, ego: AgentState, pid: PidState):
        poly, _ = model.predict(params, sample)
        return pid_track(poly, ego, pid)

    return policy


def drive_task(
    params,
    world: World,
    route: Route,
    timeout: float | None = None,
    expert: bool = False,
    noise_sigma: tuple[float, float] = (0.0, 0.0),
    map_perturb: tuple[float, float] = (0.0, 0.0),
    noise_seed: int = 0,
) -> DriveResult:
    """Drive the ego along a route under the model (or the expert) policy.

    Failures (timeout, collisions) are recorded outcomes, never exceptions.
    Optional test-time corruption applies position noise and proximity-map
    occupancy perturbation to each live sample before the forward pass.
    """
    from . import augment

    ego = world.agents[0]
    if ego.kind != "car":
        raise ValueError("agent 0 must be the ego car")
    ego.route = route
    ego.route_s = route.project(ego.xy, 0.0)
    goal_xy = route.points[-1].copy()
    goal_s = route.length
    if timeout is None:
        timeout = route_timeout(route.length)
    n_ticks = int(np.ceil(timeout / TICK))

    sampler = LiveSampler(world)
    pid = PidState()
    policy = None if expert else _model_policy(params)

    clock, states, cmds_log, lights = [], [], [], []
    lit_events = [ev for ev in route.events if ev.lit]
    passed = [False] * len(lit_events)
    lights_encountered = 0
    lights_run = 0
    reached = False
    distance = 0.0
    tick = 0
    start_xy = ego.xy.copy()
    prev_xy = start_xy
    while tick < n_ticks:
        sampler.observe()
        clock.append(world.clock)
        states.append(world.snapshot())
        lights.append([g.is_green(world.clock) for g in world.light_groups])

        if expert:
            ego_cmd = autopilot_command(ego, world)
        else:
            sample = sampler.build()
            if noise_sigma != (0.0, 0.0):
                sample = augment.perturb_positions(
                    sample, noise_sigma[0], noise_sigma[1], (noise_seed, tick, 0x31)
                )
            if map_perturb != (0.0, 0.0):
                sample = augment.perturb_map_occupancy(
                    sample, map_perturb[0], map_perturb[1], (noise_seed, tick, 0x32)
                )
            steer, accel, pid = policy(sample, ego, pid)
            ego_cmd = (steer, accel)
        cmds = world.step(ego_command=ego_cmd)
        cmds_log.append(cmds)
        tick += 1

        xy = ego.xy
        distance += float(np.linalg.norm(xy - prev_xy))
        prev_xy = xy.copy()

        # Stop-line crossings at lit junctions along the planned route.
        s_now = route.project(xy, ego.route_s if ego.route is route else 0.0)
        for j, ev in enumerate(lit_events):
            if not passed[j] and s_now > ev.s_stop:
                passed[j] = True
                lights_encountered += 1
                if not world.light_green(ev.node_id, ev.axis):
                    lights_run += 1

        if (
            float(np.linalg.norm(xy - goal_xy)) <= GOAL_TOLERANCE
            and s_now > goal_s - 30.0
        ):
            reached = True
            break

    groups = [
        (g.node_id, g.axis, g.green, g.red, g.offset) for g in world.light_groups
    ]
    trace = EpisodeLog(
        {
            "seed": world.seed,
            "town": world.network.town_id,
            "n_cars": len(world.cars),
            "n_pedestrians": len(world.pedestrians),
            "tick_s": TICK,
            "policy": "expert" if expert else "model",
        },
        sampler.kinds,
        sampler.agent_ids,
        groups,
        np.array(clock),
        np.array(states),
        np.array(cmds_log),
        np.array(lights, dtype=np.uint8),
    )
    return DriveResult(
        reached_goal=reached,
        elapsed=tick * TICK,
        trace=trace,
        lights_encountered=lights_encountered,
        lights_run=lights_run,
        distance_m=distance,
    )
