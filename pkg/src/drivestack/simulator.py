"""Closed-loop log replay: the ego is unrolled under the stack's controls
while every other agent replays its logged trajectory.

At each replanning step the ego's history window mixes simulated states with
the log's pre-start past, the goal is the logged ego pose one planning
horizon ahead of the current simulation time, and the closest logged agent
is re-selected for prediction. Metrics count all agents, use the fixed
hand-tuned weights regardless of what a checkpoint learned, and exclude the
goal term from the trajectory cost so runs with different goals stay
comparable. The trajectory cost is defined as the sum of its collision,
lane, and effort components, which makes the decomposition identity exact.

A ReplayStack feeds the logged ego controls back through the dynamics, so
its rollout reproduces the log bit for bit and its deviation is exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import controller
from . import cost as cost_mod
from . import dynamics as dyn_mod
from . import planner as planner_mod
from . import predictor as predictor_mod
from .dynamics import Trajectory
from .lanes import Lane, LaneGraph, project
from .scenario import Scenario, planner_config_for


@dataclass(frozen=True)
class SimConfig:
    t_sim: float = 10.0
    replan_interval: float = 0.5
    beta: float = 1.0
    ilqr: controller.ILQRConfig = field(default_factory=controller.ILQRConfig)

    def __post_init__(self):
        if self.t_sim <= 0 or self.replan_interval <= 0:
            raise ValueError("t_sim and replan_interval must be positive")
        ratio = self.t_sim / self.replan_interval
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("t_sim must be a multiple of replan_interval")

    def steps(self, dt: float):
        """(sim_steps, replan_steps); both intervals must divide evenly."""
        rs = self.replan_interval / dt
        if abs(rs - round(rs)) > 1e-9:
            raise ValueError("replan_interval must be a multiple of dt")
        return int(round(self.t_sim / dt)), int(round(rs))


@dataclass
class ReplanView:
    """Everything a policy may look at when replanning at one sim step."""
    step: int
    ego_id: str
    ego_state: np.ndarray
    histories: dict
    goal: np.ndarray
    graph: LaneGraph
    predicted_agent_id: str
    gt_futures: dict         # agent_id -> (plan_steps, 2) logged positions
    logged_controls: np.ndarray
    plan_steps: int
    replan_steps: int
    dt: float


@dataclass
class PlanOutput:
    controls: np.ndarray
    trajectory: Trajectory = None
    lane: Lane = None
    converged: bool = True


class ReplayStack:
    """Feeds the logged ego controls back; the baseline that cannot deviate."""

    def plan(self, view: ReplanView) -> PlanOutput:
        return PlanOutput(controls=view.logged_controls.copy())


class StackPolicy:
    """predict -> plan -> control with the same components as open loop.

    ``use`` selects the planner's view of the predicted agent: "model" runs
    the checkpoint's predictor, "gt" substitutes the logged future (oracle),
    "none" ignores the agent. With no feasible candidate the policy coasts
    (zero controls) until the next replan.
    """

    def __init__(self, checkpoint=None, use: str = None, beta: float = 1.0,
                 ilqr: controller.ILQRConfig = None):
        if use is None:
            use = "model" if checkpoint is not None else "none"
        if use == "model" and checkpoint is None:
            raise ValueError("model policy requires a checkpoint")
        self.use = use
        self.params = checkpoint.params if checkpoint is not None else None
        self.weights = checkpoint.weights if checkpoint is not None \
            else cost_mod.hand_tuned_weights()
        self.beta = beta
        self.ilqr = controller.ILQRConfig() if ilqr is None else ilqr

    def plan(self, view: ReplanView) -> PlanOutput:
        cfg = planner_mod.PlannerConfig(horizon=view.plan_steps * view.dt,
                                        dt=view.dt)
        cands = planner_mod.generate_candidates(
            view.ego_state, view.goal, view.graph, cfg, self.ilqr.limits)
        if len(cands) == 0:
            return PlanOutput(controls=np.zeros((view.replan_steps, 2)),
                              converged=False)
        futures = {}
        if view.predicted_agent_id is not None:
            if self.use == "gt":
                futures = {view.predicted_agent_id: cost_mod.gt_future(
                    view.gt_futures[view.predicted_agent_id])}
            elif self.use == "model":
                pred = predictor_mod.predict(
                    view.histories, view.predicted_agent_id, view.ego_id,
                    self.params)
                futures = {view.predicted_agent_id: cost_mod.AgentFuture(
                    positions=pred.positions, mode_probs=pred.mode_probs,
                    differentiable=False)}
        ctx = cost_mod.CostContext(agent_futures=futures, goal=view.goal,
                                   lane=view.graph.lanes[0])
        sel = planner_mod.cost_and_select(cands, ctx, self.weights, self.beta)
        chosen = sel.candidates[sel.selected]
        sol = controller.solve(
            chosen.trajectory,
            cost_mod.DrivingCost(replace(ctx, lane=chosen.lane), self.weights),
            self.ilqr)
        return PlanOutput(controls=sol.trajectory.controls[:view.replan_steps],
                          trajectory=sol.trajectory, lane=chosen.lane,
                          converged=bool(sol.converged))


@dataclass
class SimResult:
    scenario_id: str
    dt: float
    replan_steps: int
    states: np.ndarray        # (sim_steps + 1, 4) simulated ego
    controls: np.ndarray      # (sim_steps, 2) executed controls
    goals: np.ndarray         # (num_replans, 4)
    lanes: list               # per replan: Lane or None
    planned: list             # per replan: Trajectory or None
    predicted_ids: list
    open_loop_costs: np.ndarray  # per replan, NaN when no plan exists
    converged: np.ndarray        # per replan

    @property
    def sim_steps(self) -> int:
        return self.controls.shape[0]

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "dt": self.dt,
            "replan_steps": self.replan_steps,
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "goals": self.goals.tolist(),
            "lane_ids": [lane.lane_id if lane is not None else None
                         for lane in self.lanes],
            "planned": [
                None if traj is None else
                {"states": traj.states.tolist(), "controls": traj.controls.tolist()}
                for traj in self.planned
            ],
            "predicted_ids": list(self.predicted_ids),
            "open_loop_costs": self.open_loop_costs.tolist(),
            "converged": self.converged.astype(bool).tolist(),
        }


def _closest_logged_agent(scn: Scenario, ego_pos, log_index: int):
    best, best_dist = None, np.inf
    for agent_id in sorted(scn.tracks):
        if agent_id == scn.ego_id:
            continue
        dist = float(np.linalg.norm(scn.tracks[agent_id][log_index, :2] - ego_pos))
        if dist < best_dist:
            best, best_dist = agent_id, dist
    return best


def simulate(scn: Scenario, policy, cfg: SimConfig) -> SimResult:
    """Unroll the ego under the policy while other agents replay their logs."""
    sim_steps, replan_steps = cfg.steps(scn.dt)
    plan_steps = scn.plan_steps
    if scn.future_steps < sim_steps + plan_steps:
        raise ValueError(
            f"scenario {scn.scenario_id} logs {scn.future_steps} future steps, "
            f"closed loop needs {sim_steps + plan_steps}")
    past = scn.past_steps
    ego_log = scn.tracks[scn.ego_id]
    fixed = cost_mod.hand_tuned_weights()

    # ego_full[i] is the ego state at log index i: logged before the sim
    # start, simulated after.
    ego_full = [ego_log[i] for i in range(past + 1)]
    u_sim = []
    goals, lanes, planned, predicted_ids, ol_costs, conv = [], [], [], [], [], []
    for k in range(0, sim_steps, replan_steps):
        ego_state = ego_full[past + k]
        histories = {scn.ego_id: np.array(ego_full[k: past + k + 1])}
        for agent_id in scn.tracks:
            if agent_id != scn.ego_id:
                histories[agent_id] = scn.tracks[agent_id][k: past + k + 1]
        goal = ego_log[past + k + plan_steps]
        gt_futures = {
            agent_id: scn.tracks[agent_id][past + k + 1: past + k + 1 + plan_steps, :2]
            for agent_id in scn.tracks if agent_id != scn.ego_id
        }
        view = ReplanView(
            step=k, ego_id=scn.ego_id, ego_state=ego_state,
            histories=histories, goal=goal, graph=scn.graph,
            predicted_agent_id=_closest_logged_agent(scn, ego_state[:2], past + k),
            gt_futures=gt_futures,
            logged_controls=scn.controls[scn.ego_id][past + k: past + k + replan_steps],
            plan_steps=plan_steps, replan_steps=replan_steps, dt=scn.dt)
        out = policy.plan(view)
        if out.controls.shape != (replan_steps, 2):
            raise ValueError(f"policy returned controls of shape "
                             f"{out.controls.shape}, expected ({replan_steps}, 2)")
        state = ego_state
        for u in out.controls:
            state = dyn_mod.step(state, u, scn.dt)
            ego_full.append(state)
            u_sim.append(u)
        goals.append(goal)
        lanes.append(out.lane)
        planned.append(out.trajectory)
        predicted_ids.append(view.predicted_agent_id)
        conv.append(out.converged)
        if out.trajectory is None:
            ol_costs.append(float("nan"))
        else:
            ctx = cost_mod.CostContext(
                agent_futures={aid: cost_mod.gt_future(fut)
                               for aid, fut in gt_futures.items()},
                goal=goal,
                lane=out.lane if out.lane is not None else scn.graph.lanes[0])
            ol_costs.append(cost_mod.evaluate(out.trajectory, ctx, fixed))

    return SimResult(
        scenario_id=scn.scenario_id, dt=scn.dt, replan_steps=replan_steps,
        states=np.array(ego_full[past:]), controls=np.array(u_sim),
        goals=np.array(goals), lanes=lanes, planned=planned,
        predicted_ids=predicted_ids,
        open_loop_costs=np.array(ol_costs), converged=np.array(conv))


def _metric_lane(result: SimResult, scn: Scenario, r: int) -> Lane:
    """Lane to attribute a segment to when the policy did not choose one."""
    lane = result.lanes[r]
    if lane is not None:
        return lane
    start = result.states[r * result.replan_steps]
    offsets = [abs(project(lane, start[:2]).offset) for lane in scn.graph.lanes]
    return scn.graph.lanes[int(np.argmin(offsets))]


METRIC_NAMES = ("trajectory_cost", "open_loop_cost", "collision_cost",
                "lane_cost", "control_effort", "deviation")


def closed_loop_metrics(result: SimResult, scn: Scenario,
                        weights: cost_mod.CostWeights = None) -> dict:
    """The six closed-loop metrics, normalized per simulated second.

    Cost metrics score the executed rollout against the logged futures of all
    agents under the fixed hand-tuned weights, segment by segment with the
    lane chosen at each replan. The goal term is excluded; trajectory_cost is
    the exact sum of the collision, lane, and effort components.
    """
    w = (cost_mod.hand_tuned_weights() if weights is None else weights).values
    rs = result.replan_steps
    past = scn.past_steps
    collision = lane_cost = effort = 0.0
    for r in range(len(result.goals)):
        k = r * rs
        seg = Trajectory(states=result.states[k: k + rs + 1],
                         controls=result.controls[k: k + rs], dt=result.dt)
        futures = {
            agent_id: cost_mod.gt_future(
                scn.tracks[agent_id][past + k + 1: past + k + 1 + rs, :2])
            for agent_id in scn.tracks if agent_id != scn.ego_id
        }
        ctx = cost_mod.CostContext(agent_futures=futures,
                                   goal=result.goals[r],
                                   lane=_metric_lane(result, scn, r))
        tv = cost_mod.term_values(seg, ctx)
        collision += w[cost_mod.COLLISION] * tv[cost_mod.COLLISION]
        lane_cost += (w[cost_mod.LANE_LATERAL] * tv[cost_mod.LANE_LATERAL]
                      + w[cost_mod.LANE_HEADING] * tv[cost_mod.LANE_HEADING])
        effort += w[cost_mod.CONTROL_EFFORT] * tv[cost_mod.CONTROL_EFFORT]
    t_sim = result.sim_steps * result.dt
    collision /= t_sim
    lane_cost /= t_sim
    effort /= t_sim

    logged = scn.tracks[scn.ego_id][past: past + result.sim_steps + 1, :2]
    deviation = float(np.mean(
        np.linalg.norm(result.states[1:, :2] - logged[1:], axis=1)))
    ol = result.open_loop_costs
    ol_mean = float(np.mean(ol[np.isfinite(ol)])) if np.any(np.isfinite(ol)) \
        else float("nan")
    return {
        "trajectory_cost": collision + lane_cost + effort,
        "open_loop_cost": ol_mean,
        "collision_cost": collision,
        "lane_cost": lane_cost,
        "control_effort": effort,
        "deviation": deviation,
    }
