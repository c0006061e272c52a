"""Synthetic driving scenarios: generation, serialization, splitting.

A scenario is a short multi-agent log on a small lane graph: every agent has a
complete state trajectory at a fixed time step, the first part of which is
history for the predictor. Planning happens at the step right after the
history; the rest of the log is ground truth (3 s for open-loop training,
longer for closed-loop replay). The goal handed to the planner is the logged
ego state one planning horizon ahead.

All motion comes from rolling scripted lane-tracking controllers through the
dynamics module, so stored trajectories satisfy the dynamics-consistency
invariant bit-exactly. Five families cover nominal driving (lane_follow,
lane_change) and interactions where the closest agent materially changes the
optimal ego plan (crossing, lead_brake, cut_in). Interactive instances are
certified by construction: planning with the agent's true future must yield a
strictly lower hindsight cost than ignoring the agent, else the instance is
regenerated with a fresh substream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import cost as cost_mod
from . import dynamics
from . import planner as planner_mod
from .dynamics import DEFAULT_LIMITS, STATE_DIM, wrap_angle
from .lanes import Lane, LaneGraph, point_at, project

SCHEMA_VERSION = 1
PAST_SECONDS = 4.0
PLAN_SECONDS = 3.0

NOMINAL_FAMILIES = ("lane_follow", "lane_change")
INTERACTIVE_FAMILIES = ("crossing", "lead_brake", "cut_in")
FAMILIES = NOMINAL_FAMILIES + INTERACTIVE_FAMILIES
# Convenience family groups accepted by the generator.
FAMILY_GROUPS = {"mixed": FAMILIES, "interactive": INTERACTIVE_FAMILIES}

# Scripted lane-tracker gains. At dt=0.5 the closed loop for (offset, heading
# error) has spectral radius ~0.88, a gently damped wobble rather than either
# dead-straight or divergent motion.
K_OFFSET = 0.15
K_HEADING = 0.9
K_SPEED = 0.8


@dataclass(frozen=True)
class ScenarioConfig:
    family: str = "mixed"
    count: int = 100
    seed: int = 0
    dt: float = 0.5
    future_seconds: float = PLAN_SECONDS
    noise: float = 1.0
    max_attempts: int = 12

    def __post_init__(self):
        if self.family not in FAMILIES and self.family not in FAMILY_GROUPS:
            raise ValueError(f"unknown family {self.family!r}")
        if self.count <= 0:
            raise ValueError("count must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        plan = PLAN_SECONDS / self.dt
        if abs(plan - round(plan)) > 1e-9:
            raise ValueError(f"dt {self.dt} does not divide the planning horizon")
        if self.future_seconds < PLAN_SECONDS:
            raise ValueError("future must cover at least one planning horizon")

    @property
    def past_steps(self) -> int:
        return int(round(PAST_SECONDS / self.dt))

    @property
    def plan_steps(self) -> int:
        return int(round(PLAN_SECONDS / self.dt))

    @property
    def future_steps(self) -> int:
        return int(round(self.future_seconds / self.dt))


@dataclass
class Scenario:
    scenario_id: str
    family: str
    dt: float
    past_steps: int
    ego_id: str
    predicted_agent_id: str
    graph: LaneGraph
    tracks: dict    # agent_id -> (past_steps + 1 + future_steps, 4)
    controls: dict  # agent_id -> (past_steps + future_steps, 2) applied controls
    goal: np.ndarray

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float)
        if self.ego_id not in self.tracks:
            raise ValueError(f"ego {self.ego_id!r} missing from tracks")
        if self.predicted_agent_id not in self.tracks:
            raise ValueError(
                f"predicted agent {self.predicted_agent_id!r} missing from tracks")
        length = None
        for agent_id, track in self.tracks.items():
            track = np.asarray(track, dtype=float)
            self.tracks[agent_id] = track
            if track.ndim != 2 or track.shape[1] != STATE_DIM:
                raise ValueError(f"track of {agent_id!r} must be (N, 4)")
            if not np.all(np.isfinite(track)):
                raise ValueError(f"non-finite states in track of {agent_id!r}")
            if length is None:
                length = track.shape[0]
            elif track.shape[0] != length:
                raise ValueError(
                    f"track of {agent_id!r} has {track.shape[0]} states, "
                    f"expected {length}")
        for agent_id in self.tracks:
            if agent_id not in self.controls:
                raise ValueError(f"control log of {agent_id!r} missing")
            us = np.asarray(self.controls[agent_id], dtype=float)
            self.controls[agent_id] = us
            if us.shape != (length - 1, 2):
                raise ValueError(
                    f"control log of {agent_id!r} has shape {us.shape}, "
                    f"expected ({length - 1}, 2)")
            if not np.all(np.isfinite(us)):
                raise ValueError(f"non-finite controls for {agent_id!r}")
        if length < self.past_steps + 1 + self.plan_steps:
            raise ValueError(
                f"log too short: {length} states cannot cover history plus one "
                f"planning horizon")
        expected_goal = self.tracks[self.ego_id][self.past_steps + self.plan_steps]
        if not np.array_equal(self.goal, expected_goal):
            raise ValueError("goal does not equal the ego state one planning "
                             "horizon past the current step")

    @property
    def plan_steps(self) -> int:
        return int(round(PLAN_SECONDS / self.dt))

    @property
    def future_steps(self) -> int:
        return self.tracks[self.ego_id].shape[0] - self.past_steps - 1

    def history(self, agent_id: str) -> np.ndarray:
        return self.tracks[agent_id][: self.past_steps + 1]

    def histories(self) -> dict:
        return {agent_id: self.history(agent_id) for agent_id in self.tracks}

    def current_state(self, agent_id: str) -> np.ndarray:
        return self.tracks[agent_id][self.past_steps]

    def future_states(self, agent_id: str, steps: int = None) -> np.ndarray:
        steps = self.plan_steps if steps is None else steps
        start = self.past_steps + 1
        return self.tracks[agent_id][start: start + steps]

    def future_positions(self, agent_id: str, steps: int = None) -> np.ndarray:
        return self.future_states(agent_id, steps)[:, :2]


# ---------------------------------------------------------------------------
# Scripted motion


def _arc_points(start, heading, length, curvature, spacing=5.0):
    n = max(int(np.ceil(length / spacing)) + 1, 2)
    s = np.linspace(0.0, length, n)
    start = np.asarray(start, dtype=float)
    if abs(curvature) < 1e-9:
        direction = np.array([np.cos(heading), np.sin(heading)])
        return start[None, :] + s[:, None] * direction[None, :]
    # circular arc with heading(s) = heading + curvature * s
    x = start[0] + (np.sin(heading + curvature * s) - np.sin(heading)) / curvature
    y = start[1] - (np.cos(heading + curvature * s) - np.cos(heading)) / curvature
    return np.column_stack([x, y])


def _parallel_lane(lane: Lane, lane_id: str, offset: float) -> Lane:
    points = np.array([
        point_at(lane, s, offset)[0] for s in lane.arclengths
    ])
    return Lane(lane_id=lane_id, points=points)


def _spawn_state(lane: Lane, arclength: float, offset: float, speed: float,
                 rng: np.random.Generator, noise: float) -> np.ndarray:
    position, heading = point_at(lane, arclength, offset)
    heading = wrap_angle(heading + 0.03 * noise * rng.normal())
    return np.array([position[0], position[1], heading, speed])


def _roll(initial: dict, behaviors: dict, steps: int, dt: float):
    """Advance every agent jointly so behaviors can react to current states.

    A behavior maps (step, states_now) to (reference lane, target offset,
    target speed); the shared tracker turns that into clipped unicycle
    controls. Joint stepping keeps gap-keeping rules causal. Returns both the
    state logs and the control logs; keeping the controls makes log replay
    reproduce the states bit for bit.
    """
    tracks = {agent_id: [np.asarray(s, dtype=float)] for agent_id, s in initial.items()}
    controls = {agent_id: [] for agent_id in initial}
    for t in range(steps):
        now = {agent_id: tracks[agent_id][-1] for agent_id in tracks}
        for agent_id, behavior in behaviors.items():
            lane, target_offset, target_speed = behavior(t, now)
            state = now[agent_id]
            proj = project(lane, state[:2])
            e_off = proj.offset - target_offset
            e_head = wrap_angle(state[2] - proj.lane_heading)
            control = np.array([
                np.clip(-K_OFFSET * e_off - K_HEADING * e_head,
                        DEFAULT_LIMITS.lower[0], DEFAULT_LIMITS.upper[0]),
                np.clip(K_SPEED * (target_speed - state[3]),
                        DEFAULT_LIMITS.lower[1], DEFAULT_LIMITS.upper[1]),
            ])
            controls[agent_id].append(control)
            tracks[agent_id].append(dynamics.step(state, control, dt))
    return ({agent_id: np.array(states) for agent_id, states in tracks.items()},
            {agent_id: np.array(us) for agent_id, us in controls.items()})


def _follow_speed(lane: Lane, state, lead_state, cruise: float,
                  gap_safe: float = 10.0) -> float:
    """Speed target for trailing a lead vehicle along the same lane."""
    gap = project(lane, lead_state[:2]).arclength - project(lane, state[:2]).arclength
    if gap <= 0.0 or gap > 40.0:
        return cruise
    return float(np.clip(lead_state[3] + 0.4 * (gap - gap_safe), 0.0, cruise))


# ---------------------------------------------------------------------------
# Families


def _total_steps(cfg: ScenarioConfig) -> int:
    return cfg.past_steps + cfg.future_steps


def _base_lane(rng, cfg, allow_curvature=True):
    total_seconds = _total_steps(cfg) * cfg.dt
    cruise = rng.uniform(5.0, 8.0)
    length = 60.0 + cruise * total_seconds + 60.0
    curvature = rng.uniform(-0.008, 0.008) * cfg.noise if allow_curvature else 0.0
    heading = rng.uniform(-np.pi, np.pi)
    start = rng.uniform(-20.0, 20.0, size=2)
    lane = Lane(lane_id="lane0", points=_arc_points(start, heading, length, curvature))
    return lane, cruise


def _build_lane_follow(rng, cfg):
    lane0, cruise = _base_lane(rng, cfg)
    lanes = [lane0]
    if rng.random() < 0.5:
        lanes.append(_parallel_lane(lane0, "lane1", 3.5))
    graph = LaneGraph(lanes=lanes)

    s_ego = rng.uniform(40.0, 55.0)
    ego0 = _spawn_state(lane0, s_ego, 0.3 * cfg.noise * rng.normal(), cruise, rng,
                        cfg.noise)
    lead0 = _spawn_state(lane0, s_ego + rng.uniform(25.0, 40.0), 0.0,
                         cruise + rng.uniform(-0.5, 0.5), rng, cfg.noise)
    v_lead = lead0[3]
    initial = {"ego": ego0, "a0": lead0}
    behaviors = {
        "ego": lambda t, now: (lane0, 0.0, cruise),
        "a0": lambda t, now: (lane0, 0.0, v_lead),
    }
    if len(lanes) > 1 and rng.random() < 0.7:
        side0 = _spawn_state(lanes[1], s_ego + rng.uniform(-15.0, 15.0), 0.0,
                             cruise + rng.uniform(-1.0, 1.0), rng, cfg.noise)
        v_side = side0[3]
        initial["a1"] = side0
        behaviors["a1"] = lambda t, now: (lanes[1], 0.0, v_side)
    return graph, initial, behaviors


def _build_lane_change(rng, cfg):
    lane0, cruise = _base_lane(rng, cfg)
    side = 3.5 if rng.random() < 0.5 else -3.5
    lane1 = _parallel_lane(lane0, "lane1", side)
    graph = LaneGraph(lanes=[lane0, lane1])

    s_ego = rng.uniform(40.0, 55.0)
    switch = cfg.past_steps + rng.integers(-2, 3)
    ego0 = _spawn_state(lane0, s_ego, 0.0, cruise, rng, cfg.noise)
    ahead0 = _spawn_state(lane1, s_ego + rng.uniform(15.0, 25.0), 0.0,
                          cruise + rng.uniform(-1.0, 0.5), rng, cfg.noise)
    v_ahead = ahead0[3]

    def ego_behavior(t, now):
        lane = lane1 if t >= switch else lane0
        speed = _follow_speed(lane1, now["ego"], now["a0"], cruise) \
            if t >= switch else cruise
        return lane, 0.0, speed

    behaviors = {
        "ego": ego_behavior,
        "a0": lambda t, now: (lane1, 0.0, v_ahead),
    }
    return graph, {"ego": ego0, "a0": ahead0}, behaviors


def _build_crossing(rng, cfg):
    total_seconds = _total_steps(cfg) * cfg.dt
    cruise = rng.uniform(5.0, 7.0)
    heading = rng.uniform(-np.pi, np.pi)
    ahead = 60.0 + cruise * total_seconds
    ego_lane = Lane(lane_id="lane0", points=_arc_points(
        np.array([-np.cos(heading), -np.sin(heading)]) * 80.0, heading,
        80.0 + ahead, 0.0))
    cross_angle = wrap_angle(heading + rng.choice([1.0, -1.0])
                             * rng.uniform(np.radians(70.0), np.radians(110.0)))
    v_agent = rng.uniform(4.0, 6.5)
    agent_run = 40.0 + v_agent * total_seconds
    cross_lane = Lane(lane_id="cross0", points=_arc_points(
        -40.0 * np.array([np.cos(cross_angle), np.sin(cross_angle)]),
        cross_angle, 40.0 + agent_run, 0.0))
    graph = LaneGraph(lanes=[ego_lane, cross_lane])

    # Both lanes pass through the origin; time the agent to reach it shortly
    # after the ego's planning step so yielding happens inside the horizon.
    t_conflict = (cfg.past_steps * cfg.dt) + rng.uniform(1.0, 2.2)
    ego0 = _spawn_state(ego_lane, 80.0 - cruise * t_conflict
                        - rng.uniform(0.0, 3.0), 0.0, cruise, rng, cfg.noise)
    agent0 = _spawn_state(cross_lane, 40.0 - v_agent * t_conflict, 0.0, v_agent,
                          rng, cfg.noise)
    brake_v = rng.uniform(0.2, 1.2)

    def ego_behavior(t, now):
        agent_to_go = 40.0 - project(cross_lane, now["a0"][:2]).arclength
        ego_to_go = 80.0 - project(ego_lane, now["ego"][:2]).arclength
        if ego_to_go > -2.0 and -3.0 < agent_to_go < 8.0:
            return ego_lane, 0.0, brake_v
        return ego_lane, 0.0, cruise

    behaviors = {
        "ego": ego_behavior,
        "a0": lambda t, now: (cross_lane, 0.0, v_agent),
    }
    return graph, {"ego": ego0, "a0": agent0}, behaviors


def _build_lead_brake(rng, cfg):
    lane0, cruise = _base_lane(rng, cfg)
    cruise = rng.uniform(6.0, 8.0)
    lanes = [lane0]
    if rng.random() < 0.4:
        lanes.append(_parallel_lane(lane0, "lane1", rng.choice([3.5, -3.5])))
    graph = LaneGraph(lanes=lanes)

    s_ego = rng.uniform(40.0, 55.0)
    gap0 = rng.uniform(7.0, 11.0)
    ego0 = _spawn_state(lane0, s_ego, 0.0, cruise, rng, cfg.noise)
    lead0 = _spawn_state(lane0, s_ego + gap0, 0.0, cruise, rng, cfg.noise)
    # Brake onset straddles the planning step so the history carries a
    # deceleration cue while most of the stop still lies inside the horizon.
    t_brake = cfg.past_steps + rng.integers(-2, 1)
    brake_steps = int(round(rng.uniform(4.0, 6.0) / cfg.dt))
    brake_v = rng.uniform(0.0, 0.8)

    def lead_behavior(t, now):
        if t_brake <= t < t_brake + brake_steps:
            return lane0, 0.0, brake_v
        return lane0, 0.0, cruise

    behaviors = {
        "ego": lambda t, now: (lane0, 0.0,
                               _follow_speed(lane0, now["ego"], now["a0"], cruise,
                                             gap_safe=5.0)),
        "a0": lead_behavior,
    }
    return graph, {"ego": ego0, "a0": lead0}, behaviors


def _build_cut_in(rng, cfg):
    lane0, cruise = _base_lane(rng, cfg)
    side = 3.5 if rng.random() < 0.5 else -3.5
    lane1 = _parallel_lane(lane0, "lane1", side)
    graph = LaneGraph(lanes=[lane0, lane1])

    s_ego = rng.uniform(40.0, 55.0)
    ego0 = _spawn_state(lane0, s_ego, 0.0, cruise, rng, cfg.noise)
    agent0 = _spawn_state(lane1, s_ego + rng.uniform(5.0, 12.0), 0.0,
                          cruise - rng.uniform(0.5, 2.0), rng, cfg.noise)
    v_agent = agent0[3]
    t_cut = cfg.past_steps + rng.integers(0, 3)

    def ego_behavior(t, now):
        agent = now["a0"]
        if abs(project(lane0, agent[:2]).offset) < 2.0:
            return lane0, 0.0, _follow_speed(lane0, now["ego"], agent, cruise)
        return lane0, 0.0, cruise

    def agent_behavior(t, now):
        lane = lane0 if t >= t_cut else lane1
        return lane, 0.0, v_agent

    behaviors = {"ego": ego_behavior, "a0": agent_behavior}
    return graph, {"ego": ego0, "a0": agent0}, behaviors


_BUILDERS = {
    "lane_follow": _build_lane_follow,
    "lane_change": _build_lane_change,
    "crossing": _build_crossing,
    "lead_brake": _build_lead_brake,
    "cut_in": _build_cut_in,
}


# ---------------------------------------------------------------------------
# Assembly, certification, generation


def _closest_agent(tracks: dict, ego_id: str, at_step: int) -> str:
    ego_pos = tracks[ego_id][at_step, :2]
    best, best_dist = None, np.inf
    for agent_id in sorted(tracks):
        if agent_id == ego_id:
            continue
        dist = float(np.linalg.norm(tracks[agent_id][at_step, :2] - ego_pos))
        if dist < best_dist:
            best, best_dist = agent_id, dist
    return best


def _assemble(scenario_id, family, cfg, graph, initial, behaviors) -> Scenario:
    tracks, controls = _roll(initial, behaviors, _total_steps(cfg), cfg.dt)
    goal = tracks["ego"][cfg.past_steps + cfg.plan_steps]
    return Scenario(
        scenario_id=scenario_id, family=family, dt=cfg.dt,
        past_steps=cfg.past_steps, ego_id="ego",
        predicted_agent_id=_closest_agent(tracks, "ego", cfg.past_steps),
        graph=graph, tracks=tracks, controls=controls, goal=goal,
    )


def planner_config_for(scn: Scenario) -> planner_mod.PlannerConfig:
    return planner_mod.PlannerConfig(horizon=PLAN_SECONDS, dt=scn.dt)


def hindsight_pair(scn: Scenario, weights: cost_mod.CostWeights = None,
                   limits=DEFAULT_LIMITS):
    """Hindsight costs of the plans chosen with and without the agent's future.

    Returns (hc_informed, hc_blind) where both plans are scored against the
    predicted agent's ground-truth future, or None when the scenario yields
    fewer than two candidates. The informed plan is selected with that future
    visible, the blind one while ignoring the agent entirely; a scenario is
    certified interactive when informed < blind.
    """
    weights = cost_mod.hand_tuned_weights() if weights is None else weights
    cands = planner_mod.generate_candidates(
        scn.current_state(scn.ego_id), scn.goal, scn.graph,
        planner_config_for(scn), limits)
    if len(cands) < 2:
        return None
    gt = cost_mod.gt_future(scn.future_positions(scn.predicted_agent_id))
    ctx_gt = cost_mod.CostContext(
        agent_futures={scn.predicted_agent_id: gt}, goal=scn.goal,
        lane=scn.graph.lanes[0])
    ctx_blind = replace(ctx_gt, agent_futures={})
    informed = planner_mod.cost_and_select(cands, ctx_gt, weights, beta=1.0)
    blind = planner_mod.cost_and_select(cands, ctx_blind, weights, beta=1.0)
    hc_informed = informed.costs[informed.selected]
    chosen_blind = cands.candidates[blind.selected]
    hc_blind = cost_mod.evaluate(
        chosen_blind.trajectory, replace(ctx_gt, lane=chosen_blind.lane), weights)
    return float(hc_informed), float(hc_blind)


def is_interactive(scn: Scenario) -> bool:
    pair = hindsight_pair(scn)
    if pair is None:
        return False
    return pair[0] < pair[1]


def _family_cycle(cfg: ScenarioConfig):
    families = FAMILY_GROUPS.get(cfg.family, (cfg.family,))
    return [families[i % len(families)] for i in range(cfg.count)]


def generate(cfg: ScenarioConfig) -> list:
    """Deterministic batch of scenarios; interactive families are certified.

    Each scenario draws from its own substream of the master seed, and failed
    certification retries move to fresh substreams, so the output is
    reproducible and independent of generation order.
    """
    families = _family_cycle(cfg)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.count)
    scenarios = []
    for index, (family, child) in enumerate(zip(families, children)):
        fallback = None
        chosen = None
        for attempt_seed in child.spawn(cfg.max_attempts):
            rng = np.random.default_rng(attempt_seed)
            scenario_id = f"{family}-{cfg.seed:04d}-{index:05d}"
            graph, initial, behaviors = _BUILDERS[family](rng, cfg)
            scn = _assemble(scenario_id, family, cfg, graph, initial, behaviors)
            pair = hindsight_pair(scn)
            if pair is None:
                continue
            fallback = scn
            if family in INTERACTIVE_FAMILIES and not pair[0] < pair[1]:
                continue
            chosen = scn
            break
        if chosen is None:
            chosen = fallback
        if chosen is None:
            raise RuntimeError(
                f"could not build a usable {family} scenario at index {index} "
                f"after {cfg.max_attempts} attempts")
        scenarios.append(chosen)
    return scenarios


# ---------------------------------------------------------------------------
# Serialization


def _scenario_to_dict(scn: Scenario) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "id": scn.scenario_id,
        "family": scn.family,
        "dt": scn.dt,
        "past_steps": scn.past_steps,
        "ego_id": scn.ego_id,
        "predicted_agent_id": scn.predicted_agent_id,
        "goal": scn.goal.tolist(),
        "lanes": [
            {"id": lane.lane_id, "points": lane.points.tolist()}
            for lane in scn.graph.lanes
        ],
        "tracks": {agent_id: track.tolist()
                   for agent_id, track in scn.tracks.items()},
        "controls": {agent_id: us.tolist()
                     for agent_id, us in scn.controls.items()},
    }


def _require(record: dict, key: str, line: int):
    if key not in record:
        raise ValueError(f"scenario on line {line}: missing field {key!r}")
    return record[key]


def _scenario_from_dict(record: dict, line: int) -> Scenario:
    version = _require(record, "schema_version", line)
    if version != SCHEMA_VERSION:
        raise ValueError(
            f"scenario on line {line}: schema_version {version} unsupported "
            f"(expected {SCHEMA_VERSION})")
    for key in ("id", "family", "dt", "past_steps", "ego_id",
                "predicted_agent_id", "goal", "lanes", "tracks", "controls"):
        _require(record, key, line)
    lanes = []
    for lane_rec in record["lanes"]:
        if "id" not in lane_rec or "points" not in lane_rec:
            raise ValueError(f"scenario on line {line}: lane missing id/points")
        lanes.append(Lane(lane_id=lane_rec["id"],
                          points=np.asarray(lane_rec["points"], dtype=float)))
    tracks = {}
    for agent_id, states in record["tracks"].items():
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[1] != STATE_DIM:
            raise ValueError(
                f"scenario on line {line}: track of agent {agent_id!r} is not "
                f"a list of 4-dim states")
        tracks[agent_id] = states
    controls = {agent_id: np.asarray(us, dtype=float)
                for agent_id, us in record["controls"].items()}
    try:
        return Scenario(
            scenario_id=record["id"], family=record["family"],
            dt=float(record["dt"]), past_steps=int(record["past_steps"]),
            ego_id=record["ego_id"],
            predicted_agent_id=record["predicted_agent_id"],
            graph=LaneGraph(lanes=lanes), tracks=tracks, controls=controls,
            goal=np.asarray(record["goal"], dtype=float),
        )
    except ValueError as err:
        raise ValueError(f"scenario on line {line}: {err}") from err


def save(path, scenarios) -> None:
    """Write scenarios as JSON Lines; doubles round-trip exactly via repr."""
    with open(path, "w") as fh:
        for scn in scenarios:
            fh.write(json.dumps(_scenario_to_dict(scn)))
            fh.write("\n")


def load(path) -> list:
    scenarios = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"scenario on line {line_no}: malformed JSON "
                                 f"({err})") from err
            scenarios.append(_scenario_from_dict(record, line_no))
    return scenarios


# ---------------------------------------------------------------------------
# Splits and suitability


def split(scenarios, train_fraction: float = 0.75, seed: int = 0):
    """Deterministic disjoint train/val split, independent of input order."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    ordered = sorted(scenarios, key=lambda s: s.scenario_id)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    cut = int(round(train_fraction * len(ordered)))
    train = [ordered[i] for i in perm[:cut]]
    val = [ordered[i] for i in perm[cut:]]
    return train, val


def reject_unsuitable(scenarios, limits=DEFAULT_LIMITS):
    """Filter scenarios the planner cannot use; returns (kept, counts)."""
    kept = []
    counts = {"kept": 0, "too_few_candidates": 0, "short_log": 0}
    for scn in scenarios:
        if scn.future_steps < scn.plan_steps:
            counts["short_log"] += 1
            continue
        cands = planner_mod.generate_candidates(
            scn.current_state(scn.ego_id), scn.goal, scn.graph,
            planner_config_for(scn), limits)
        if len(cands) < 2:
            counts["too_few_candidates"] += 1
            continue
        kept.append(scn)
        counts["kept"] += 1
    return kept, counts
