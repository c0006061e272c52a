"""Planning/control cost: five weighted terms over a trajectory in a scene.

    c(tau) = w1*c_collision + w2*c_goal + w3*c_lane_lat + w4*c_lane_ang + w5*c_effort

Collision is a radial-basis penalty against every agent's (possibly
multimodal) predicted positions, the goal term is a terminal squared position
distance, the two lane terms penalize squared lateral offset and squared
wrapped heading error against a reference lane, and the effort term is the
squared control magnitude. All state terms run over t = 1..T (the initial
state is fixed), effort runs over all T controls.

Weights are reparameterized as

    w_i = alpha * c_norm * softmax(psi)_i

so that sum_i w_i / alpha == c_norm is invariant under any psi update; psi[0]
(collision) is conventionally held fixed during training to pin the scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import CONTROL_DIM, STATE_DIM, Trajectory, wrap_angle
from .lanes import Lane, project_batch

# Term order used everywhere.
COLLISION, GOAL, LANE_LATERAL, LANE_HEADING, CONTROL_EFFORT = range(5)
NUM_TERMS = 5
TERM_NAMES = ("collision", "goal", "lane_lateral", "lane_heading", "control_effort")

# Hand-tuned weight row the reparameterization is anchored to.
DEFAULT_WEIGHT_VALUES = np.array([5.0, 0.5, 0.3, 0.3, 1.0])
# Collision RBF length scale in meters; the penalty saturates to zero beyond
# roughly three sigma, so distant agents neither cost nor produce gradients.
RBF_SIGMA = 1.5
# Levenberg damping added to the (x, y) diagonal of the collision Hessian.
# The Gauss-Newton outer product alone is rank-1 and the dropped exact term is
# indefinite, so the damping keeps every stage Hessian safely PSD.
COLLISION_HESSIAN_DAMPING = 1e-3

EXTENDED_DIM = STATE_DIM + CONTROL_DIM  # quadratization works on [state; control]


@dataclass(frozen=True)
class CostWeights:
    """Softmax-reparameterized term weights."""

    psi: np.ndarray
    alpha: float = 1.0
    c_norm: float = float(np.sum(DEFAULT_WEIGHT_VALUES))

    def __post_init__(self):
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=float))
        assert self.psi.shape == (NUM_TERMS,)
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.c_norm > 0.0:
            raise ValueError(f"c_norm must be positive, got {self.c_norm}")

    @property
    def softmax(self) -> np.ndarray:
        shifted = np.exp(self.psi - np.max(self.psi))
        return shifted / np.sum(shifted)

    @property
    def values(self) -> np.ndarray:
        return self.alpha * self.c_norm * self.softmax

    def dw_dpsi(self) -> np.ndarray:
        """Jacobian d(values_i)/d(psi_j) = w_i * (delta_ij - softmax_j)."""
        p = self.softmax
        return self.values[:, None] * (np.eye(NUM_TERMS) - p[None, :])

    def dw_dalpha(self) -> np.ndarray:
        return self.values / self.alpha

    def with_params(self, psi=None, alpha=None) -> "CostWeights":
        return replace(
            self,
            psi=self.psi if psi is None else np.asarray(psi, dtype=float),
            alpha=self.alpha if alpha is None else float(alpha),
        )


def weights_from_params(psi, alpha: float, c_norm: float) -> CostWeights:
    return CostWeights(psi=np.asarray(psi, dtype=float), alpha=float(alpha),
                       c_norm=float(c_norm))


def hand_tuned_weights() -> CostWeights:
    """Weights whose values reproduce the hand-tuned row (5.0, 0.5, 0.3, 0.3, 1.0)."""
    return CostWeights(psi=np.log(DEFAULT_WEIGHT_VALUES), alpha=1.0,
                       c_norm=float(np.sum(DEFAULT_WEIGHT_VALUES)))


@dataclass(frozen=True)
class AgentFuture:
    """Future positions of one agent as a mixture of mode trajectories.

    ``positions`` is (K, T, 2) and ``mode_probs`` (K,) sums to one. Ground
    truth futures are a single mode with probability one. ``differentiable``
    marks the one agent whose future came out of the predictor, i.e. the only
    agent gradients should flow into.
    """

    positions: np.ndarray
    mode_probs: np.ndarray
    differentiable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float))
        object.__setattr__(self, "mode_probs", np.asarray(self.mode_probs, dtype=float))
        assert self.positions.ndim == 3 and self.positions.shape[2] == 2
        assert self.mode_probs.shape == (self.positions.shape[0],)

    @property
    def num_modes(self) -> int:
        return self.positions.shape[0]

    @property
    def horizon(self) -> int:
        return self.positions.shape[1]


def gt_future(positions, differentiable: bool = False) -> AgentFuture:
    positions = np.asarray(positions, dtype=float)
    return AgentFuture(positions=positions[None, :, :], mode_probs=np.array([1.0]),
                       differentiable=differentiable)


@dataclass(frozen=True)
class CostContext:
    """Everything the cost needs about the scene: agents, goal, reference lane."""

    agent_futures: dict
    goal: np.ndarray
    lane: Lane
    rbf_sigma: float = RBF_SIGMA

    def __post_init__(self):
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float))
        assert self.goal.shape == (STATE_DIM,)


@dataclass
class Quadratization:
    """Per-stage gradient (T+1, 6) and Hessian (T+1, 6, 6) over [state; control].

    Stage t < T covers (state_t, control_t); the terminal stage covers state_T
    with a zero control block. The gradient is exact, the Hessian is
    Gauss-Newton with damped collision curvature.
    """

    grads: np.ndarray
    hessians: np.ndarray


@dataclass
class _SceneEval:
    """One shared pass over a trajectory; every public op slices from this."""

    terms: np.ndarray            # (5,)
    term_grads: np.ndarray       # (5, T+1, 6)
    proj_offset: np.ndarray      # (T,)
    proj_offset_grad: np.ndarray  # (T, 2)
    proj_tangent: np.ndarray     # (T, 2)
    heading_err: np.ndarray      # (T,)
    heading_slope: np.ndarray    # (T,)
    collision: dict              # agent_id -> per-agent internals


@dataclass
class _AgentCollision:
    u: np.ndarray        # (K, T, 2) position minus mode mean
    sq: np.ndarray       # (K, T) squared distances
    z: np.ndarray        # (T,) probability-weighted squared distance
    rbf: np.ndarray      # (T,)
    drbf: np.ndarray     # (T,) d(rbf)/dz
    ddrbf: np.ndarray    # (T,) d2(rbf)/dz2
    q: np.ndarray        # (T, 2) d(z)/d(position)


def _validate(traj: Trajectory, ctx: CostContext):
    T = traj.horizon
    if T < 1:
        raise ValueError("trajectory must have at least one step")
    for agent_id, fut in ctx.agent_futures.items():
        if fut.horizon != T:
            raise ValueError(
                f"agent {agent_id}: future horizon {fut.horizon} != trajectory {T}"
            )


def _scene_eval(traj: Trajectory, ctx: CostContext) -> _SceneEval:
    _validate(traj, ctx)
    T = traj.horizon
    pos = traj.states[1:, :2]          # (T, 2)
    headings = traj.states[1:, 2]      # (T,)
    terms = np.zeros(NUM_TERMS)
    term_grads = np.zeros((NUM_TERMS, T + 1, EXTENDED_DIM))
    sigma2 = ctx.rbf_sigma ** 2

    collision = {}
    for agent_id, fut in ctx.agent_futures.items():
        u = pos[None, :, :] - fut.positions              # (K, T, 2)
        sq = np.einsum("ktd,ktd->kt", u, u)              # (K, T)
        z = fut.mode_probs @ sq                          # (T,)
        rbf = np.exp(-z / (2.0 * sigma2))
        drbf = -rbf / (2.0 * sigma2)
        ddrbf = rbf / (4.0 * sigma2 * sigma2)
        q = 2.0 * np.einsum("k,ktd->td", fut.mode_probs, u)
        collision[agent_id] = _AgentCollision(u=u, sq=sq, z=z, rbf=rbf,
                                              drbf=drbf, ddrbf=ddrbf, q=q)
        terms[COLLISION] += float(np.sum(rbf))
        term_grads[COLLISION, 1:, 0:2] += drbf[:, None] * q

    goal_delta = pos[-1] - ctx.goal[:2]
    terms[GOAL] = float(goal_delta @ goal_delta)
    term_grads[GOAL, T, 0:2] = 2.0 * goal_delta

    proj = project_batch(ctx.lane, pos)
    terms[LANE_LATERAL] = float(proj.offset @ proj.offset)
    term_grads[LANE_LATERAL, 1:, 0:2] = 2.0 * proj.offset[:, None] * proj.offset_grad

    heading_err = wrap_angle(headings - proj.lane_heading)
    terms[LANE_HEADING] = float(heading_err @ heading_err)
    term_grads[LANE_HEADING, 1:, 0:2] = (
        -2.0 * (heading_err * proj.heading_slope)[:, None] * proj.tangent
    )
    term_grads[LANE_HEADING, 1:, 2] = 2.0 * heading_err

    terms[CONTROL_EFFORT] = float(np.sum(traj.controls ** 2))
    term_grads[CONTROL_EFFORT, :T, 4:6] = 2.0 * traj.controls

    return _SceneEval(terms=terms, term_grads=term_grads,
                      proj_offset=proj.offset, proj_offset_grad=proj.offset_grad,
                      proj_tangent=proj.tangent, heading_err=heading_err,
                      heading_slope=proj.heading_slope, collision=collision)


def term_values(traj: Trajectory, ctx: CostContext) -> np.ndarray:
    return _scene_eval(traj, ctx).terms


def evaluate(traj: Trajectory, ctx: CostContext, weights: CostWeights) -> float:
    return float(weights.values @ _scene_eval(traj, ctx).terms)


def stage_term_gradients(traj: Trajectory, ctx: CostContext) -> np.ndarray:
    """Unweighted per-term stage gradients, shape (5, T+1, 6)."""
    return _scene_eval(traj, ctx).term_grads


def quadratize(traj: Trajectory, ctx: CostContext, weights: CostWeights) -> Quadratization:
    """Weighted stage gradients and PSD stage Hessians around a trajectory."""
    scene = _scene_eval(traj, ctx)
    T = traj.horizon
    w = weights.values
    grads = np.einsum("i,itd->td", w, scene.term_grads)
    hessians = np.zeros((T + 1, EXTENDED_DIM, EXTENDED_DIM))

    # Collision: Gauss-Newton keeps only the positive-curvature outer product
    # rbf'' * q q^T; the dropped rbf' * 2I part is negative semidefinite.
    if scene.collision:
        for agent in scene.collision.values():
            hessians[1:, 0:2, 0:2] += w[COLLISION] * np.einsum(
                "t,ti,tj->tij", agent.ddrbf, agent.q, agent.q
            )
        hessians[1:, 0, 0] += COLLISION_HESSIAN_DAMPING
        hessians[1:, 1, 1] += COLLISION_HESSIAN_DAMPING

    hessians[T, 0:2, 0:2] += 2.0 * w[GOAL] * np.eye(2)

    hessians[1:, 0:2, 0:2] += 2.0 * w[LANE_LATERAL] * np.einsum(
        "ti,tj->tij", scene.proj_offset_grad, scene.proj_offset_grad
    )

    # Heading residual gradient over (x, y, heading): [-slope * tangent, 1].
    r = np.concatenate(
        [-scene.heading_slope[:, None] * scene.proj_tangent, np.ones((T, 1))], axis=1
    )
    hessians[1:, 0:3, 0:3] += 2.0 * w[LANE_HEADING] * np.einsum("ti,tj->tij", r, r)

    hessians[:T, 4:6, 4:6] += 2.0 * w[CONTROL_EFFORT] * np.eye(2)

    return Quadratization(grads=grads, hessians=hessians)


def exact_hessians(traj: Trajectory, ctx: CostContext,
                   weights: CostWeights) -> np.ndarray:
    """Exact (possibly indefinite) stage Hessians of the weighted cost.

    Same layout as Quadratization.hessians but without damping and with the
    full collision curvature rbf'' q q^T + 2 rbf' I, which the Gauss-Newton
    sweep drops. The lane, goal and effort terms are quadratic in their
    residuals with locally constant residual Jacobians, so for them this
    coincides with the Gauss-Newton blocks. Sensitivity analysis at a solved
    trajectory needs these true second derivatives; the solver itself never
    should, since negative collision curvature can destroy descent.
    """
    scene = _scene_eval(traj, ctx)
    T = traj.horizon
    w = weights.values
    hessians = np.zeros((T + 1, EXTENDED_DIM, EXTENDED_DIM))

    for agent in scene.collision.values():
        hessians[1:, 0:2, 0:2] += w[COLLISION] * (
            np.einsum("t,ti,tj->tij", agent.ddrbf, agent.q, agent.q)
            + 2.0 * agent.drbf[:, None, None] * np.eye(2)[None, :, :]
        )

    hessians[T, 0:2, 0:2] += 2.0 * w[GOAL] * np.eye(2)

    hessians[1:, 0:2, 0:2] += 2.0 * w[LANE_LATERAL] * np.einsum(
        "ti,tj->tij", scene.proj_offset_grad, scene.proj_offset_grad
    )

    r = np.concatenate(
        [-scene.heading_slope[:, None] * scene.proj_tangent, np.ones((T, 1))], axis=1
    )
    hessians[1:, 0:3, 0:3] += 2.0 * w[LANE_HEADING] * np.einsum("ti,tj->tij", r, r)

    hessians[:T, 4:6, 4:6] += 2.0 * w[CONTROL_EFFORT] * np.eye(2)
    return hessians


@dataclass
class WeightGrads:
    d_values: np.ndarray  # (5,) gradient w.r.t. the weight values
    d_psi: np.ndarray     # (5,) chained through the softmax reparameterization
    d_alpha: float


def grad_weights(traj: Trajectory, ctx: CostContext, weights: CostWeights) -> WeightGrads:
    """Gradient of the total cost with respect to (w, psi, alpha).

    The cost is linear in the weight values, so d(cost)/dw_i is just the i-th
    unweighted term value.
    """
    terms = _scene_eval(traj, ctx).terms
    d_psi = weights.dw_dpsi().T @ terms
    d_alpha = float(terms @ weights.dw_dalpha())
    return WeightGrads(d_values=terms, d_psi=d_psi, d_alpha=d_alpha)


@dataclass
class PredictionCostGrads:
    d_positions: np.ndarray   # (K, T, 2)
    d_mode_probs: np.ndarray  # (K,)


def grad_predictions(traj: Trajectory, ctx: CostContext, weights: CostWeights) -> dict:
    """Gradient of the total cost w.r.t. each differentiable agent's prediction.

    Only the collision term touches predictions, so these are w1-weighted
    collision gradients; agents far from the trajectory sit on the RBF's
    saturated tail and get vanishing gradients.
    """
    scene = _scene_eval(traj, ctx)
    w1 = weights.values[COLLISION]
    out = {}
    for agent_id, fut in ctx.agent_futures.items():
        if not fut.differentiable:
            continue
        agent = scene.collision[agent_id]
        d_positions = -2.0 * w1 * np.einsum(
            "k,t,ktd->ktd", fut.mode_probs, agent.drbf, agent.u
        )
        d_mode_probs = w1 * agent.sq @ agent.drbf
        out[agent_id] = PredictionCostGrads(d_positions=d_positions,
                                            d_mode_probs=d_mode_probs)
    return out


@dataclass
class PredictionCrossTerms:
    """Second derivatives linking stage gradients to prediction outputs.

    ``d_pos`` is (T, K, 2, 2) with d_pos[t, k][i, j] = d(g_pos_t[i])/d(mean_{k,t}[j])
    and ``d_prob`` is (T, K, 2) with d(g_pos_t)/d(pi_k), where g_pos_t is the
    weighted cost gradient w.r.t. the trajectory position at step t.
    """

    d_pos: np.ndarray
    d_prob: np.ndarray


def prediction_cross_terms(traj: Trajectory, ctx: CostContext,
                           weights: CostWeights) -> dict:
    scene = _scene_eval(traj, ctx)
    w1 = weights.values[COLLISION]
    out = {}
    for agent_id, fut in ctx.agent_futures.items():
        if not fut.differentiable:
            continue
        agent = scene.collision[agent_id]
        K, T = fut.num_modes, fut.horizon
        pi = fut.mode_probs
        eye = np.eye(2)
        d_pos = w1 * (
            -2.0 * np.einsum("k,t,ti,ktj->tkij", pi, agent.ddrbf, agent.q, agent.u)
            - 2.0 * np.einsum("k,t,ij->tkij", pi, agent.drbf, eye)
        )
        d_prob = w1 * (
            np.einsum("t,kt,ti->tki", agent.ddrbf, agent.sq, agent.q)
            + 2.0 * np.einsum("t,kti->tki", agent.drbf, agent.u)
        )
        out[agent_id] = PredictionCrossTerms(d_pos=d_pos, d_prob=d_prob)
    return out


class DrivingCost:
    """Adapter binding a scene context and weights into the controller's
    evaluate/quadratize interface."""

    def __init__(self, ctx: CostContext, weights: CostWeights):
        self.ctx = ctx
        self.weights = weights

    def evaluate(self, traj: Trajectory) -> float:
        return evaluate(traj, self.ctx, self.weights)

    def quadratize(self, traj: Trajectory) -> Quadratization:
        return quadratize(traj, self.ctx, self.weights)
