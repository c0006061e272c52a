"""Polyline lane centerlines with projection, sampling and goal-based filtering.

Lanes are directed polylines. Headings are stored per point (each interior
point takes the direction of its outgoing segment) and interpolated linearly
in arclength, so straight lanes have exactly constant heading while gently
curved lanes get a continuous heading profile. Lateral offsets are signed,
positive to the left of the direction of travel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import HEADING, wrap_angle

# A lane is a candidate for a goal if it passes within this distance of the
# goal position and its heading at the projection differs by less than 90 deg.
MAX_GOAL_DISTANCE = 4.5
MAX_GOAL_HEADING_DIFF = np.pi / 2.0


@dataclass
class Lane:
    """Directed polyline centerline; treated as immutable after construction."""

    lane_id: str
    points: np.ndarray  # (N, 2), N >= 2, strictly advancing arclength

    headings: np.ndarray = field(init=False, repr=False)
    arclengths: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"lane {self.lane_id}: points must be (N, 2)")
        if self.points.shape[0] < 2:
            raise ValueError(f"lane {self.lane_id}: need at least 2 points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"lane {self.lane_id}: non-finite points")
        segments = np.diff(self.points, axis=0)
        lengths = np.linalg.norm(segments, axis=1)
        if np.any(lengths <= 0.0):
            raise ValueError(f"lane {self.lane_id}: arclength must strictly increase")
        segment_headings = np.arctan2(segments[:, 1], segments[:, 0])
        self.headings = np.concatenate([segment_headings, segment_headings[-1:]])
        self.arclengths = np.concatenate([[0.0], np.cumsum(lengths)])

    @property
    def length(self) -> float:
        return float(self.arclengths[-1])


@dataclass
class LaneGraph:
    lanes: list

    def __post_init__(self):
        ids = [lane.lane_id for lane in self.lanes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate lane ids: {ids}")

    def get(self, lane_id: str) -> Lane:
        for lane in self.lanes:
            if lane.lane_id == lane_id:
                return lane
        raise KeyError(lane_id)


@dataclass
class ProjectionBatch:
    """Vectorized projection results for M query points.

    ``offset_grad`` is the exact gradient of the signed lateral offset with
    respect to the query point (the signed unit vector from the closest point
    to the query, or the left normal when the query sits on the centerline).
    ``heading_slope`` is d(lane_heading)/d(arclength) on the matched segment,
    needed for exact position-gradients of heading-based costs.
    """

    closest: np.ndarray       # (M, 2)
    offset: np.ndarray        # (M,) signed, positive left
    offset_grad: np.ndarray   # (M, 2)
    lane_heading: np.ndarray  # (M,)
    heading_slope: np.ndarray  # (M,)
    tangent: np.ndarray       # (M, 2) unit geometric segment direction
    arclength: np.ndarray     # (M,)


@dataclass
class LaneProjection:
    closest: np.ndarray
    offset: float
    offset_grad: np.ndarray
    lane_heading: float
    heading_slope: float
    tangent: np.ndarray
    arclength: float


def project_batch(lane: Lane, points) -> ProjectionBatch:
    """Project M points onto the nearest segment of the lane (ties: lowest index)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"points must be (M, 2), got {points.shape}")
    p0 = lane.points[:-1]                      # (S, 2)
    seg = np.diff(lane.points, axis=0)         # (S, 2)
    seg_len2 = np.einsum("sd,sd->s", seg, seg)
    rel = points[:, None, :] - p0[None, :, :]  # (M, S, 2)
    frac = np.einsum("msd,sd->ms", rel, seg) / seg_len2
    frac = np.clip(frac, 0.0, 1.0)
    closest_all = p0[None, :, :] + frac[:, :, None] * seg[None, :, :]
    dist2 = np.einsum("msd,msd->ms", points[:, None, :] - closest_all,
                      points[:, None, :] - closest_all)
    idx = np.argmin(dist2, axis=1)             # (M,)
    m = np.arange(points.shape[0])
    t = frac[m, idx]
    closest = closest_all[m, idx]
    seg_len = np.sqrt(seg_len2[idx])
    tangent = seg[idx] / seg_len[:, None]
    arclength = lane.arclengths[idx] + t * seg_len

    delta = points - closest
    dist = np.sqrt(np.maximum(dist2[m, idx], 0.0))
    cross = tangent[:, 0] * delta[:, 1] - tangent[:, 1] * delta[:, 0]
    sign = np.where(cross >= 0.0, 1.0, -1.0)
    offset = sign * dist

    # d(offset)/d(point): unit vector from closest point to query, signed. On
    # the centerline this degenerates to the segment's left normal.
    left_normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    safe = dist > 1e-12
    offset_grad = np.where(
        safe[:, None], sign[:, None] * delta / np.where(safe, dist, 1.0)[:, None],
        left_normal,
    )

    head0 = lane.headings[idx]
    dhead = wrap_angle(lane.headings[idx + 1] - head0)
    lane_heading = wrap_angle(head0 + t * dhead)
    heading_slope = dhead / seg_len
    return ProjectionBatch(
        closest=closest, offset=offset, offset_grad=offset_grad,
        lane_heading=np.asarray(lane_heading), heading_slope=heading_slope,
        tangent=tangent, arclength=arclength,
    )


def project(lane: Lane, point) -> LaneProjection:
    batch = project_batch(lane, np.asarray(point, dtype=float)[None, :])
    return LaneProjection(
        closest=batch.closest[0],
        offset=float(batch.offset[0]),
        offset_grad=batch.offset_grad[0],
        lane_heading=float(batch.lane_heading[0]),
        heading_slope=float(batch.heading_slope[0]),
        tangent=batch.tangent[0],
        arclength=float(batch.arclength[0]),
    )


def point_at(lane: Lane, arclength: float, lateral_offset: float = 0.0):
    """Lane pose at an arclength (clamped to [0, length]) with a lateral shift.

    Returns (position (2,), heading); the shift is perpendicular to the
    interpolated lane heading, positive to the left.
    """
    s = float(np.clip(arclength, 0.0, lane.length))
    idx = int(np.searchsorted(lane.arclengths, s, side="right") - 1)
    idx = min(max(idx, 0), lane.points.shape[0] - 2)
    seg_len = lane.arclengths[idx + 1] - lane.arclengths[idx]
    t = (s - lane.arclengths[idx]) / seg_len
    base = lane.points[idx] + t * (lane.points[idx + 1] - lane.points[idx])
    heading = wrap_angle(
        lane.headings[idx] + t * wrap_angle(lane.headings[idx + 1] - lane.headings[idx])
    )
    normal = np.array([-np.sin(heading), np.cos(heading)])
    return base + lateral_offset * normal, heading


def heading_at(lane: Lane, arclength: float) -> float:
    _, heading = point_at(lane, arclength)
    return heading


def candidate_lanes(graph: LaneGraph, goal_state) -> list:
    """Lanes passing near the goal with compatible direction, in graph order."""
    goal_state = np.asarray(goal_state, dtype=float)
    selected = []
    for lane in graph.lanes:
        proj = project(lane, goal_state[:2])
        if abs(proj.offset) > MAX_GOAL_DISTANCE:
            continue
        if abs(wrap_angle(proj.lane_heading - goal_state[HEADING])) >= MAX_GOAL_HEADING_DIFF:
            continue
        selected.append(lane)
    return selected
