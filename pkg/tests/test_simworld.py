import numpy as np
import pytest

from polydrive import simworld as sw
from polydrive.errors import DataFormatError, SpawnError


@pytest.fixture(scope="module")
def train_town():
    return sw.build_town("train")


@pytest.fixture(scope="module")
def test_town():
    return sw.build_town("test")


class TestNetwork:
    def test_towns_differ(self, train_town, test_town):
        a = {tuple(np.round(n.pos, 1)) for n in train_town.nodes}
        b = {tuple(np.round(n.pos, 1)) for n in test_town.nodes}
        assert a != b

    def test_lane_geometry_consistent(self, train_town):
        for lane in train_town.lanes:
            d = lane.p1 - lane.p0
            assert np.linalg.norm(d) == pytest.approx(lane.length)
            np.testing.assert_allclose(
                d / lane.length, lane.direction, atol=1e-12
            )
            assert lane.heading == pytest.approx(
                np.arctan2(lane.direction[1], lane.direction[0])
            )

    def test_successors_connect(self, train_town):
        for lid, lane in enumerate(train_town.lanes):
            for succ_id, turn in train_town.successors(lid):
                succ = train_town.lanes[succ_id]
                assert succ.from_node == lane.to_node
                assert turn in ("left", "right", "cross")

    def test_drivable_on_and_off_road(self, train_town):
        lane = train_town.lanes[0]
        mid = (lane.p0 + lane.p1) / 2.0
        assert train_town.drivable(mid)
        normal = np.array([-lane.direction[1], lane.direction[0]])
        far = mid + normal * 50.0
        assert not train_town.drivable(far)

    def test_crosswalks_clear_of_stopped_cars(self, train_town):
        # A car holds at s_stop - STOP_MARGIN; crossing paths must be beyond it.
        stop_d = sw.CORE_RADIUS + sw.STOP_MARGIN
        for cw in train_town.crosswalks:
            node = train_town.nodes[cw.node_id]
            mid = (cw.p0 + cw.p1) / 2.0
            gap = np.linalg.norm(mid - node.pos) - stop_d
            assert gap > sw.CAR_RADIUS + sw.PED_RADIUS


class TestLights:
    def test_green_windows_complementary(self, train_town):
        rng = np.random.default_rng(0)
        groups = sw.make_light_groups(train_town, rng)
        by_node = {}
        for g in groups:
            by_node.setdefault(g.node_id, []).append(g)
        assert all(len(v) == 2 for v in by_node.values())
        clocks = np.arange(0.0, 2 * sw.CYCLE_S, 0.05)
        for pair in by_node.values():
            both = [
                g0 and g1
                for g0, g1 in zip(
                    (pair[0].is_green(c) for c in clocks),
                    (pair[1].is_green(c) for c in clocks),
                )
            ]
            assert not any(both)

    def test_light_state_machine(self):
        g = sw.LightGroup(0, 0, 0, sw.GREEN_S, sw.RED_S, 0.0)
        assert g.is_green(0.0)
        assert not g.is_green(sw.GREEN_S + 0.01)
        assert g.is_green(sw.CYCLE_S + 0.01)
        assert g.time_to_red(0.0) == pytest.approx(sw.GREEN_S)
        assert g.time_to_red(sw.GREEN_S + 1.0) == 0.0

    def test_unlit_nodes_always_green(self, train_town):
        world = sw.spawn_scenario(train_town, 2, 0, 0)
        assert world.light_green(10**9, 0)


class TestRoutes:
    def _route(self, net, n=4, seed=0):
        rng = np.random.default_rng(seed)
        lanes = [lid for lid in range(len(net.lanes)) if net.lane_ends_at_junction(lid)]
        lid = lanes[0]
        ids = [lid]
        for _ in range(n - 1):
            succ = net.successors(ids[-1])
            if not succ:
                break
            ids.append(succ[int(rng.integers(len(succ)))][0])
        return sw.Route(net, ids)

    def test_cumlen_monotone(self, train_town):
        route = self._route(train_town)
        assert np.all(np.diff(route.cumlen) > 0)
        assert route.cumlen[0] == 0.0

    def test_point_at_continuity(self, train_town):
        route = self._route(train_town)
        s = np.linspace(0.0, route.length, 400)
        pts = np.array([route.point_at(v)[0] for v in s])
        step = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        assert step.max() <= (s[1] - s[0]) + 1e-6

    def test_connector_curvature_feasible(self, train_town, test_town):
        """Every junction connector must be drivable at the steering limit."""
        min_radius = sw.WHEELBASE / np.tan(sw.MAX_STEER)
        for net in (train_town, test_town):
            for la, lane_a in enumerate(net.lanes):
                if not net.lane_ends_at_junction(la):
                    continue
                for lb, _ in net.successors(la):
                    pts, _ = sw._connector(lane_a.p1, lane_a.direction, net.lanes[lb])
                    seg = np.diff(pts, axis=0)
                    lens = np.linalg.norm(seg, axis=1)
                    keep = lens > 1e-9
                    seg = seg[keep] / lens[keep][:, None]
                    lens = lens[keep]
                    ang = np.arctan2(seg[:, 1], seg[:, 0])
                    dh = np.abs((np.diff(ang) + np.pi) % (2 * np.pi) - np.pi)
                    ds = (lens[:-1] + lens[1:]) / 2.0
                    curvature = dh / ds
                    assert curvature.max() <= 1.0 / min_radius * 1.05

    def test_events_ordered_and_within_route(self, train_town):
        route = self._route(train_town, n=6, seed=3)
        stops = [ev.s_stop for ev in route.events]
        assert stops == sorted(stops)
        for ev in route.events:
            assert 0.0 < ev.s_stop < ev.s_exit <= route.length

    def test_turn_classification(self):
        assert sw._turn_of(0.0, np.pi / 2) == "left"
        assert sw._turn_of(0.0, -np.pi / 2) == "right"
        assert sw._turn_of(0.0, 0.0) == "cross"
        assert sw._turn_of(0.0, np.pi) is None  # U-turns are forbidden


class TestSpawn:
    def test_spawn_deterministic(self, train_town):
        a = sw.spawn_scenario(train_town, 6, 3, 7)
        b = sw.spawn_scenario(train_town, 6, 3, 7)
        np.testing.assert_array_equal(a.snapshot(), b.snapshot())

    def test_spawn_spacing(self, train_town):
        world = sw.spawn_scenario(train_town, 10, 0, 1)
        pos = world.snapshot()[:, :2]
        d = np.linalg.norm(pos[:, None] - pos[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        assert d.min() >= 10.0 - 1e-9

    def test_needs_ego(self, train_town):
        with pytest.raises(SpawnError):
            sw.spawn_scenario(train_town, 0, 0, 0)


@pytest.fixture(scope="module")
def episode_log(train_town):
    return sw.record_episode(train_town, seed=5, duration=30.0, n_cars=6, n_pedestrians=2)


class TestEpisodes:
    @pytest.fixture()
    def log(self, episode_log):
        return episode_log

    def test_recording_deterministic(self, train_town, log):
        again = sw.record_episode(
            train_town, seed=5, duration=30.0, n_cars=6, n_pedestrians=2
        )
        np.testing.assert_array_equal(log.states, again.states)
        np.testing.assert_array_equal(log.cmds, again.cmds)
        np.testing.assert_array_equal(log.lights, again.lights)

    def test_replay_reproduces_states(self, train_town, log):
        replayed = sw.replay_episode(train_town, log)
        np.testing.assert_allclose(replayed, log.states, atol=1e-9)

    def test_cars_respect_world_speed_cap(self, log):
        cars = log.car_indices()
        assert log.states[:, cars, 3].max() <= sw.SPEED_LIMIT + 1e-9

    def test_jsonl_round_trip(self, log, tmp_path):
        p = tmp_path / "ep.jsonl"
        log.write_jsonl(p)
        back = sw.EpisodeLog.read_jsonl(p)
        np.testing.assert_array_equal(back.states, log.states)
        np.testing.assert_array_equal(back.lights, log.lights)
        assert back.kinds == log.kinds
        assert back.groups == log.groups

    def test_jsonl_rejects_corruption(self, log, tmp_path):
        p = tmp_path / "ep.jsonl"
        log.write_jsonl(p)
        lines = p.read_text().splitlines()
        lines[3] = "{not json"
        p.write_text("\n".join(lines))
        with pytest.raises(DataFormatError):
            sw.EpisodeLog.read_jsonl(p)

    def test_no_collisions_under_autopilot(self, train_town, log):
        cars = log.car_indices()
        pos = log.states[:, cars, :2]
        for i in range(len(cars)):
            for j in range(i + 1, len(cars)):
                gaps = np.linalg.norm(pos[:, i] - pos[:, j], axis=1)
                assert gaps.min() >= 2 * sw.CAR_RADIUS


class TestJunctionPriority:
    def test_priority_is_total_order(self, train_town):
        """Among contenders at one junction, exactly one may proceed."""
        world = sw.spawn_scenario(train_town, 1, 0, 0)
        net = train_town
        node = net.nodes[net.junction_ids[0]]
        approaches = [
            lid
            for lid, lane in enumerate(net.lanes)
            if lane.to_node == node.node_id
        ]
        cars = []
        for idx, lid in enumerate(approaches[:3]):
            lane = net.lanes[lid]
            route = sw.Route(net, [lid, net.successors(lid)[0][0]])
            s = lane.length - 9.0 - 0.2 * idx
            pos = lane.p0 + lane.direction * s
            car = sw.AgentState(
                idx, "car", float(pos[0]), float(pos[1]), lane.heading, 0.0,
                route=route,
            )
            car.route_s = route.project(pos, s)
            cars.append(car)
        world.agents = cars
        allowed = []
        for car in cars:
            ev = car.route.next_event(car.route_s)
            d = ev.s_stop - car.route_s
            allowed.append(sw._may_enter_junction(car, world, ev, d))
        assert sum(allowed) == 1
