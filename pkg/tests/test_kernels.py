"""Backend parity: the jitted kernels and the pure-Python fallbacks must
compute identical results (same operations, same order)."""

import numpy as np
import pytest

from polydrive import accel, kernels


def fallback(fn):
    return getattr(fn, "py_func", fn)


needs_jit = pytest.mark.skipif(
    accel.BACKEND != "numba", reason="numba backend inactive"
)


@needs_jit
def test_bin_proximity_parity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n_agents, n_ticks, window = 6, 20, 3
        rel = rng.normal(0.0, 12.0, (n_agents, n_ticks, 2))
        dists = np.linalg.norm(rel[:, -1, :], axis=1)
        a_cells = np.zeros((13, 3, n_ticks, 2 * window))
        a_labels = np.full((13, 3, n_ticks), -1, dtype=np.int64)
        b_cells = a_cells.copy()
        b_labels = a_labels.copy()
        kernels.bin_proximity(rel, dists, window, a_cells, a_labels)
        fallback(kernels.bin_proximity)(rel, dists, window, b_cells, b_labels)
        np.testing.assert_array_equal(a_cells, b_cells)
        np.testing.assert_array_equal(a_labels, b_labels)


@needs_jit
def test_polyline_parity():
    rng = np.random.default_rng(0)
    pts = np.cumsum(rng.uniform(0.3, 2.0, (200, 2)), axis=0)
    cumlen = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))]
    )
    for s in (0.0, 10.0, 55.5, cumlen[-1], cumlen[-1] + 5.0):
        assert kernels.polyline_point(pts, cumlen, s) == fallback(
            kernels.polyline_point
        )(pts, cumlen, s)
        q = np.asarray(kernels.polyline_point(pts, cumlen, s)[:2]) + [0.4, -0.7]
        assert kernels.polyline_project(
            pts, cumlen, s, q[0], q[1], 8.0, 20.0
        ) == fallback(kernels.polyline_project)(pts, cumlen, s, q[0], q[1], 8.0, 20.0)


@needs_jit
def test_integrate_cars_parity():
    rng = np.random.default_rng(1)
    states = rng.normal(0.0, 5.0, (10, 4))
    states[:, 3] = np.abs(states[:, 3])
    cmds = rng.normal(0.0, 0.4, (10, 2))
    is_car = rng.random(10) > 0.3
    a = states.copy()
    b = states.copy()
    kernels.integrate_cars(a, cmds, is_car, 0.1, 2.5, 8.33)
    fallback(kernels.integrate_cars)(b, cmds, is_car, 0.1, 2.5, 8.33)
    np.testing.assert_array_equal(a, b)


@needs_jit
def test_segment_features_parity():
    rng = np.random.default_rng(2)
    a_pts = rng.normal(0.0, 50.0, (30, 2))
    b_pts = a_pts + rng.normal(0.0, 30.0, (30, 2))
    out_a = [np.empty(30) for _ in range(3)]
    out_b = [np.empty(30) for _ in range(3)]
    kernels.segment_features(3.0, -7.0, a_pts, b_pts, *out_a)
    fallback(kernels.segment_features)(3.0, -7.0, a_pts, b_pts, *out_b)
    for x, y in zip(out_a, out_b):
        np.testing.assert_array_equal(x, y)


def test_integrate_cars_speed_clamped():
    states = np.array([[0.0, 0.0, 0.0, 8.0], [0.0, 0.0, 0.0, 0.2]])
    cmds = np.array([[0.0, 2.0], [0.0, -4.0]])
    kernels.integrate_cars(states, cmds, np.array([True, True]), 0.1, 2.5, 8.33)
    assert 0.0 <= states[0, 3] <= 8.33
    assert states[1, 3] == 0.0  # braking never reverses


def test_polyline_point_clamps_to_ends():
    pts = np.array([[0.0, 0.0], [10.0, 0.0]])
    cumlen = np.array([0.0, 10.0])
    x, y, ux, uy = kernels.polyline_point(pts, cumlen, -5.0)
    assert (x, y) == (0.0, 0.0)
    x, y, ux, uy = kernels.polyline_point(pts, cumlen, 25.0)
    assert (x, y) == (10.0, 0.0)
    assert (ux, uy) == (1.0, 0.0)


def test_polyline_project_monotone_window():
    pts = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]])
    cumlen = np.array([0.0, 10.0, 20.0])
    s, d = kernels.polyline_project(pts, cumlen, 0.0, 5.0, 1.0, 8.0, 20.0)
    assert s == pytest.approx(5.0)
    assert d == pytest.approx(1.0)
    # the search window is local: segments entirely before s_prev - back are
    # never considered, so the match sticks to the later leg
    s2, _ = kernels.polyline_project(pts, cumlen, 25.0, 5.0, 1.0, 8.0, 20.0)
    assert s2 >= 10.0
