"""Sampling-based lane planner with a differentiable candidate distribution.

Candidate trajectories are enumerated per goal-compatible lane over a fixed
grid of terminal accelerations and lateral offsets, connected by a cubic
Hermite spline from the current state to the terminal pose, and converted to
control sequences by inverse dynamics. Candidates violating control limits
are dropped. Selection is the plain argmin over costs; for training the argmin
is relaxed to a softmax distribution p = softmax(-beta * costs) and the
planning loss is the cross-entropy against a target candidate. Gradients flow
through the candidate costs only, never through candidate generation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import cost as cost_mod
from . import dynamics
from .dynamics import ControlLimits, Trajectory, wrap_angle
from .lanes import Lane, LaneGraph, candidate_lanes, point_at, project

DEFAULT_ACCEL_SET = (-3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)
DEFAULT_LATERAL_OFFSETS = (-0.5, 0.0, 0.5)


@dataclass(frozen=True)
class PlannerConfig:
    accel_set: tuple = DEFAULT_ACCEL_SET
    lateral_offsets: tuple = DEFAULT_LATERAL_OFFSETS
    beta: float = 1.0
    horizon: float = 3.0
    dt: float = 0.5

    @property
    def steps(self) -> int:
        steps = round(self.horizon / self.dt)
        assert abs(steps * self.dt - self.horizon) < 1e-9
        return steps


@dataclass
class Candidate:
    trajectory: Trajectory
    lane: Lane
    accel: float
    lateral_offset: float


@dataclass
class CandidateSet:
    candidates: list
    costs: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    selected: Optional[int] = None
    beta: Optional[float] = None

    def __len__(self) -> int:
        return len(self.candidates)


def fit_spline(start_state, terminal_position, terminal_heading: float,
               terminal_speed: float, steps: int, dt: float,
               limits: ControlLimits) -> Optional[Trajectory]:
    """Cubic Hermite connection, sampled and converted to a dynamics rollout.

    The spline interpolates position and the velocity vector at both ends.
    Controls are recovered by inverse dynamics from the position samples:
    under forward Euler the step-t speed and heading are fixed by the secant
    q_{t+1} - q_t, so the initial state uses the first secant rather than the
    exact current heading/speed, and the rollout then reproduces the sampled
    positions to machine precision. Returns None when the recovered controls
    violate the limits (infeasible candidate).
    """
    start_state = np.asarray(start_state, dtype=float)
    p0 = start_state[:2]
    v0 = start_state[3]
    duration = steps * dt
    m0 = v0 * np.array([np.cos(start_state[2]), np.sin(start_state[2])])
    p1 = np.asarray(terminal_position, dtype=float)
    m1 = terminal_speed * np.array([np.cos(terminal_heading), np.sin(terminal_heading)])

    # x(t) = p0 + m0 t + c2 t^2 + c3 t^3 with x(D) = p1, x'(D) = m1.
    c2 = (3.0 * (p1 - p0) - duration * (2.0 * m0 + m1)) / duration ** 2
    c3 = (-2.0 * (p1 - p0) + duration * (m0 + m1)) / duration ** 3
    times = np.arange(steps + 1) * dt
    samples = (p0[None, :] + times[:, None] * m0[None, :]
               + (times ** 2)[:, None] * c2[None, :]
               + (times ** 3)[:, None] * c3[None, :])

    disp = np.diff(samples, axis=0)                 # (steps, 2)
    speeds = np.linalg.norm(disp, axis=1) / dt      # (steps,) >= 0
    headings = np.empty(steps + 1)
    prev = start_state[2]
    for t in range(steps):
        if speeds[t] * dt > 1e-9:
            prev = float(np.arctan2(disp[t, 1], disp[t, 0]))
        headings[t] = prev
    headings[steps] = terminal_heading if speeds[-1] * dt > 1e-9 or terminal_speed > 0 \
        else prev
    all_speeds = np.concatenate([speeds, [terminal_speed]])

    heading_rates = wrap_angle(np.diff(headings)) / dt
    accels = np.diff(all_speeds) / dt
    controls = np.stack([heading_rates, accels], axis=1)
    if not limits.contains(controls):
        return None
    initial = np.array([p0[0], p0[1], headings[0], all_speeds[0]])
    return dynamics.rollout(initial, controls, dt)


def generate_candidates(ego_state, goal, graph: LaneGraph, cfg: PlannerConfig,
                        limits: ControlLimits) -> CandidateSet:
    """Enumerate feasible candidates over lanes x accelerations x offsets.

    Terminal arclength follows constant acceleration from the ego's projection
    (displacement clamped to be non-negative, terminal speed clamped at zero);
    fewer than two feasible candidates means the scenario is unusable for
    planning and callers must reject it.
    """
    ego_state = np.asarray(ego_state, dtype=float)
    goal = np.asarray(goal, dtype=float)
    duration = cfg.horizon
    v0 = ego_state[3]
    candidates = []
    for lane in candidate_lanes(graph, goal):
        s0 = project(lane, ego_state[:2]).arclength
        for accel in cfg.accel_set:
            displacement = max(v0 * duration + 0.5 * accel * duration ** 2, 0.0)
            terminal_speed = max(v0 + accel * duration, 0.0)
            for offset in cfg.lateral_offsets:
                position, heading = point_at(lane, s0 + displacement, offset)
                traj = fit_spline(ego_state, position, heading, terminal_speed,
                                  cfg.steps, cfg.dt, limits)
                if traj is not None:
                    candidates.append(Candidate(trajectory=traj, lane=lane,
                                                accel=accel, lateral_offset=offset))
    return CandidateSet(candidates=candidates)


def softmax_probs(costs: np.ndarray, beta: float) -> np.ndarray:
    logits = -beta * (costs - np.min(costs))
    expd = np.exp(logits)
    return expd / np.sum(expd)


def cost_and_select(cands: CandidateSet, ctx: cost_mod.CostContext,
                    weights: cost_mod.CostWeights, beta: float) -> CandidateSet:
    """Score every candidate against its own source lane, pick the argmin.

    Ties resolve to the lowest index. The softmax distribution over candidates
    is the differentiable relaxation used by the planning loss.
    """
    if len(cands) == 0:
        raise ValueError("cannot select from an empty candidate set")
    costs = np.array([
        cost_mod.evaluate(c.trajectory, replace(ctx, lane=c.lane), weights)
        for c in cands.candidates
    ])
    probs = softmax_probs(costs, beta)
    return CandidateSet(candidates=cands.candidates, costs=costs, probs=probs,
                        selected=int(np.argmin(costs)), beta=beta)


def planning_loss(cands: CandidateSet, target_index: int):
    """Cross-entropy -log p[target] and its gradient w.r.t. candidate costs.

    d(CE)/d(cost_n) = beta * (1{n == target} - p_n): raising the target's cost
    raises the loss, raising a competitor's cost lowers it.
    """
    assert cands.probs is not None, "call cost_and_select first"
    n = len(cands)
    if not 0 <= target_index < n:
        raise ValueError(f"target index {target_index} out of range for {n} candidates")
    logits = -cands.beta * (cands.costs - np.min(cands.costs))
    # The argmin logit is exactly 0, so the normalizer is 1 + (rest). Summing
    # it as log1p keeps the CE relatively exact when the softmax saturates;
    # log(1 + tiny) computed directly rounds the tail away.
    m = int(np.argmin(cands.costs))
    rest = np.delete(np.exp(logits), m)
    ce = float(np.log1p(np.sum(rest)) - logits[target_index])
    indicator = np.zeros(n)
    indicator[target_index] = 1.0
    d_costs = cands.beta * (indicator - cands.probs)
    return ce, d_costs


def hindsight_target(cands: CandidateSet, gt_ctx: cost_mod.CostContext,
                     weights: cost_mod.CostWeights) -> int:
    """Index of the candidate that is cheapest under ground-truth futures."""
    costs = [
        cost_mod.evaluate(c.trajectory, replace(gt_ctx, lane=c.lane), weights)
        for c in cands.candidates
    ]
    return int(np.argmin(costs))


def imitation_target(cands: CandidateSet, gt_ego_positions) -> int:
    """Index of the candidate closest to the logged ego future (RMS position)."""
    gt = np.asarray(gt_ego_positions, dtype=float)
    errors = []
    for c in cands.candidates:
        diff = c.trajectory.positions[1:] - gt
        errors.append(float(np.sqrt(np.mean(np.sum(diff ** 2, axis=1)))))
    return int(np.argmin(errors))
