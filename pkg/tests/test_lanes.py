"""Lane geometry: projection against brute force, sampling, goal filtering."""

import numpy as np
import pytest

from drivestack import lanes
from drivestack.lanes import Lane, LaneGraph


def random_lane(rng, n_points=None):
    n = n_points or rng.integers(2, 12)
    start = rng.uniform(-30, 30, size=2)
    heading = rng.uniform(-np.pi, np.pi)
    pts = [start]
    for _ in range(n - 1):
        heading += rng.uniform(-0.3, 0.3)
        step = rng.uniform(2.0, 8.0)
        pts.append(pts[-1] + step * np.array([np.cos(heading), np.sin(heading)]))
    return Lane(lane_id=f"lane-{rng.integers(1 << 30)}", points=np.array(pts))


def brute_force_project(lane, point):
    # Densely sample every segment and return the closest sampled point.
    best = (np.inf, None)
    for i in range(len(lane.points) - 1):
        a, b = lane.points[i], lane.points[i + 1]
        for t in np.linspace(0.0, 1.0, 2001):
            p = a + t * (b - a)
            d = np.linalg.norm(point - p)
            if d < best[0]:
                best = (d, p)
    return best


def test_projection_distance_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(30):
        lane = random_lane(rng)
        point = rng.uniform(-40, 40, size=2)
        proj = lanes.project(lane, point)
        ref_dist, ref_point = brute_force_project(lane, point)
        assert abs(abs(proj.offset) - ref_dist) < 1e-3
        assert np.linalg.norm(proj.closest - ref_point) < 2e-2
        # closest point reconstructed from arclength parametrization
        on_lane, _ = lanes.point_at(lane, proj.arclength)
        assert np.linalg.norm(on_lane - proj.closest) < 1e-9


def test_offset_sign_is_positive_left():
    # Straight lane along +x: points above have positive offset.
    lane = Lane(lane_id="x", points=np.array([[0.0, 0.0], [10.0, 0.0]]))
    above = lanes.project(lane, np.array([5.0, 2.0]))
    below = lanes.project(lane, np.array([5.0, -2.0]))
    assert above.offset == pytest.approx(2.0)
    assert below.offset == pytest.approx(-2.0)
    assert above.lane_heading == pytest.approx(0.0)
    assert np.allclose(above.tangent, [1.0, 0.0])


def test_offset_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    h = 1e-6
    checked = 0
    for _ in range(50):
        lane = random_lane(rng)
        point = rng.uniform(-40, 40, size=2)
        proj = lanes.project(lane, point)
        if abs(proj.offset) < 1e-3:
            continue  # sign flip kink at the centerline
        fd = np.zeros(2)
        for j in range(2):
            bump = np.zeros(2)
            bump[j] = h
            fp = lanes.project(lane, point + bump).offset
            fm = lanes.project(lane, point - bump).offset
            fd[j] = (fp - fm) / (2 * h)
        assert np.max(np.abs(fd - proj.offset_grad)) < 1e-5
        checked += 1
    assert checked > 30


def test_point_at_with_lateral_offset_is_consistent_with_projection():
    # On a straight lane the round trip is exact. On curved lanes the shift is
    # perpendicular to the blended heading, not the matched segment, so near
    # corners the projected offset drifts by O(offset * heading change).
    rng = np.random.default_rng(2)
    straight = Lane(lane_id="s", points=np.array([[0.0, -3.0], [40.0, -3.0]]))
    for _ in range(20):
        s = rng.uniform(0.0, straight.length)
        off = rng.uniform(-2.5, 2.5)
        p, _ = lanes.point_at(straight, s, lateral_offset=off)
        proj = lanes.project(straight, p)
        assert proj.offset == pytest.approx(off, abs=1e-12)
    for _ in range(30):
        lane = random_lane(rng)
        s = rng.uniform(0.05, 0.95) * lane.length
        off = rng.uniform(-2.5, 2.5)
        p, _ = lanes.point_at(lane, s, lateral_offset=off)
        proj = lanes.project(lane, p)
        assert proj.offset == pytest.approx(off, abs=0.3)


def test_heading_at_interpolates_and_clamps():
    lane = Lane(lane_id="bend", points=np.array(
        [[0.0, 0.0], [10.0, 0.0], [10.0 + 10 / np.sqrt(2), 10 / np.sqrt(2)]]))
    assert lanes.heading_at(lane, -5.0) == pytest.approx(0.0)
    assert lanes.heading_at(lane, 0.0) == pytest.approx(0.0)
    end = lanes.heading_at(lane, lane.length + 5.0)
    assert end == pytest.approx(np.pi / 4)
    mid = lanes.heading_at(lane, 5.0)
    assert 0.0 <= mid <= np.pi / 4


def test_candidate_lanes_respects_distance_and_heading_gates():
    near = Lane(lane_id="near", points=np.array([[-20.0, 0.0], [20.0, 0.0]]))
    far = Lane(lane_id="far", points=np.array([[-20.0, 30.0], [20.0, 30.0]]))
    wrong_way = Lane(lane_id="rev", points=np.array([[20.0, 1.0], [-20.0, 1.0]]))
    graph = LaneGraph(lanes=[near, far, wrong_way])
    goal = np.array([0.0, 1.0, 0.0, 5.0])
    picked = [lane.lane_id for lane in lanes.candidate_lanes(graph, goal)]
    assert "near" in picked
    assert "far" not in picked      # 29 m away > MAX_GOAL_DISTANCE
    assert "rev" not in picked      # opposite heading


def test_lane_validation_rejects_bad_polylines():
    with pytest.raises(ValueError):
        Lane(lane_id="a", points=np.array([[0.0, 0.0]]))
    with pytest.raises(ValueError):
        Lane(lane_id="b", points=np.array([[0.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        LaneGraph(lanes=[
            Lane(lane_id="dup", points=np.array([[0.0, 0.0], [1.0, 0.0]])),
            Lane(lane_id="dup", points=np.array([[0.0, 1.0], [1.0, 1.0]])),
        ])


def test_project_batch_agrees_with_scalar_project():
    rng = np.random.default_rng(3)
    lane = random_lane(rng, n_points=8)
    points = rng.uniform(-40, 40, size=(25, 2))
    batch = lanes.project_batch(lane, points)
    for i, point in enumerate(points):
        one = lanes.project(lane, point)
        assert batch.offset[i] == one.offset
        assert batch.arclength[i] == one.arclength
        assert batch.lane_heading[i] == one.lane_heading
        assert np.array_equal(batch.offset_grad[i], one.offset_grad)
