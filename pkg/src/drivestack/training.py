"""Loss composition, training modes, the optimizer loop, open-loop evaluation.

The total loss is L = a1 L_pred + a2 L_plan + a3 L_ctr. L_pred is the
prediction NLL, L_plan the cross-entropy of the planner's softmax against a
target candidate, and L_ctr either the hindsight cost of the controlled
trajectory under ground-truth agent futures (reinforcement setting) or its
MSE against the logged ego (imitation setting). Hindsight costs always use
the fixed hand-tuned weights, so they are comparable across runs regardless
of what is being learned.

Training modes:
  standard             NLL only
  distance_weighted    NLL reweighted by inverse ego-agent future distance
  gradcost_weighted    NLL reweighted by the control-cost gradient magnitude
  diffstack            full loss; downstream gradients reach the predictor
  diffstack_no_pred    downstream losses only (a1 = 0)
  cost_tuning          control loss only; trains cost weights, not the predictor

The downstream gradients flow through the planner's softmax (cost gradients)
and the controller's implicit backward pass, then into predictor parameters
via the prediction-output adjoints.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import controller
from . import cost as cost_mod
from . import planner as planner_mod
from . import predictor as predictor_mod
from .dynamics import DEFAULT_LIMITS, Trajectory
from .scenario import Scenario, planner_config_for

TRAIN_MODES = ("standard", "distance_weighted", "gradcost_weighted",
               "diffstack", "diffstack_no_pred", "cost_tuning")
SETTINGS = ("rl", "il")
DEFAULT_ALPHAS = {"rl": (1.0, 100.0, 1000.0), "il": (1.0, 10.0, 1000.0)}
DISTANCE_EPS = 1e-3  # floor for the inverse-distance relevance weight
CHECKPOINT_FORMAT = "drivestack-checkpoint-v1"


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 1.0
    alpha2: float = 100.0
    alpha3: float = 1000.0
    setting: str = "rl"

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        alphas = (self.alpha1, self.alpha2, self.alpha3)
        if any(a < 0 for a in alphas):
            raise ValueError("loss weights must be non-negative")
        if not any(a > 0 for a in alphas):
            raise ValueError("at least one loss weight must be positive")


def loss_config_for(setting: str, alphas=None) -> LossConfig:
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}, expected one of {SETTINGS}")
    if alphas is None:
        alphas = DEFAULT_ALPHAS[setting]
    return LossConfig(alpha1=alphas[0], alpha2=alphas[1], alpha3=alphas[2],
                      setting=setting)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.003
    clip_norm: float = 10.0
    seed: int = 0
    train_mode: str = "standard"
    bias_offset: float = 0.0
    beta: float = 1.0
    ilqr: controller.ILQRConfig = field(default_factory=controller.ILQRConfig)

    def __post_init__(self):
        if self.train_mode not in TRAIN_MODES:
            raise ValueError(f"unknown train mode {self.train_mode!r}")
        for name in ("epochs", "batch_size", "learning_rate", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def effective_alphas(loss_cfg: LossConfig, train_mode: str):
    """Per-mode loss weights; reweighting baselines never see downstream losses."""
    a = (loss_cfg.alpha1, loss_cfg.alpha2, loss_cfg.alpha3)
    if train_mode in ("standard", "distance_weighted", "gradcost_weighted"):
        return (a[0], 0.0, 0.0)
    if train_mode == "diffstack_no_pred":
        return (0.0, a[1], a[2])
    if train_mode == "cost_tuning":
        return (0.0, 0.0, a[2])
    return a


# ---------------------------------------------------------------------------
# Losses


def hindsight_cost(traj: Trajectory, gt_futures: dict, goal, lane,
                   fixed_weights: cost_mod.CostWeights = None) -> float:
    """Control cost of a trajectory against actual futures, hand-tuned weights."""
    weights = cost_mod.hand_tuned_weights() if fixed_weights is None else fixed_weights
    ctx = cost_mod.CostContext(
        agent_futures={aid: cost_mod.gt_future(pos) for aid, pos in gt_futures.items()},
        goal=goal, lane=lane)
    return cost_mod.evaluate(traj, ctx, weights)


def il_loss(traj: Trajectory, gt_ego_positions) -> float:
    gt = np.asarray(gt_ego_positions, dtype=float)
    diff = traj.positions[1:] - gt
    return float(np.sum(diff ** 2))


def _ctr_loss_grads(traj: Trajectory, loss_cfg: LossConfig, gt_ctx, gt_ego,
                    fixed_weights):
    """(value, dL/dstates, dL/dcontrols) of the control loss at a trajectory."""
    T = traj.horizon
    if loss_cfg.setting == "il":
        gt = np.asarray(gt_ego, dtype=float)
        value = il_loss(traj, gt)
        dLx = np.zeros((T + 1, 4))
        dLx[1:, :2] = 2.0 * (traj.positions[1:] - gt)
        dLu = np.zeros((T, 2))
        return value, dLx, dLu
    value = cost_mod.evaluate(traj, gt_ctx, fixed_weights)
    quad = cost_mod.quadratize(traj, gt_ctx, fixed_weights)
    dLx = quad.grads[:, :4].copy()
    dLu = quad.grads[:T, 4:6].copy()
    return float(value), dLx, dLu


def relevance_weight(scn: Scenario, mode: str) -> float:
    """Planning-relevance factor for reweighted prediction training."""
    if mode == "distance_weighted":
        ego = scn.future_positions(scn.ego_id)
        agent = scn.future_positions(scn.predicted_agent_id)
        dist = float(np.mean(np.linalg.norm(ego - agent, axis=1)))
        return 1.0 / max(dist, DISTANCE_EPS)
    if mode == "gradcost_weighted":
        # Gradient of the control cost at the logged ego plan w.r.t. the
        # agent's actual future: large when the agent constrains the plan.
        ego_states = np.vstack([scn.current_state(scn.ego_id)[None, :],
                                scn.future_states(scn.ego_id)])
        traj = Trajectory(states=ego_states,
                          controls=np.zeros((scn.plan_steps, 2)), dt=scn.dt)
        ctx = cost_mod.CostContext(
            agent_futures={scn.predicted_agent_id: cost_mod.gt_future(
                scn.future_positions(scn.predicted_agent_id), differentiable=True)},
            goal=scn.goal, lane=scn.graph.lanes[0])
        grads = cost_mod.grad_predictions(traj, ctx, cost_mod.hand_tuned_weights())
        d_pos = grads[scn.predicted_agent_id].d_positions
        return float(np.linalg.norm(d_pos))
    return 1.0


# ---------------------------------------------------------------------------
# One scenario through the stack


@dataclass
class ScenarioCache:
    """Prediction-independent quantities reused across epochs."""
    candidates: planner_mod.CandidateSet
    rl_target: int
    il_target: int
    gt_ctx: cost_mod.CostContext


def build_cache(scn: Scenario, train_cfg: TrainConfig = None) -> ScenarioCache:
    limits = DEFAULT_LIMITS if train_cfg is None else train_cfg.ilqr.limits
    cands = planner_mod.generate_candidates(
        scn.current_state(scn.ego_id), scn.goal, scn.graph,
        planner_config_for(scn), limits)
    if len(cands) < 2:
        raise ValueError(f"scenario {scn.scenario_id}: fewer than 2 candidates")
    fixed = cost_mod.hand_tuned_weights()
    gt_ctx = cost_mod.CostContext(
        agent_futures={scn.predicted_agent_id: cost_mod.gt_future(
            scn.future_positions(scn.predicted_agent_id))},
        goal=scn.goal, lane=scn.graph.lanes[0])
    rl_target = planner_mod.hindsight_target(cands, gt_ctx, fixed)
    il_target = planner_mod.imitation_target(
        cands, scn.future_positions(scn.ego_id))
    return ScenarioCache(candidates=cands, rl_target=rl_target,
                         il_target=il_target, gt_ctx=gt_ctx)


@dataclass
class ScenarioResult:
    loss: float
    pred_loss: float
    plan_loss: float
    ctr_loss: float
    param_grads: dict = None
    psi_grad: np.ndarray = None
    alpha_grad: float = 0.0
    control_skipped: bool = False
    relevance: float = 1.0


def _plan_context(scn: Scenario, pred: predictor_mod.TrajectoryPrediction,
                  use: str) -> cost_mod.CostContext:
    if use == "none":
        futures = {}
    elif use == "gt":
        futures = {scn.predicted_agent_id: cost_mod.gt_future(
            scn.future_positions(scn.predicted_agent_id))}
    else:
        futures = {scn.predicted_agent_id: cost_mod.AgentFuture(
            positions=pred.positions, mode_probs=pred.mode_probs,
            differentiable=True)}
    return cost_mod.CostContext(agent_futures=futures, goal=scn.goal,
                                lane=scn.graph.lanes[0])


def total_loss_and_grads(scn: Scenario, params: predictor_mod.PredictorParams,
                         weights: cost_mod.CostWeights, loss_cfg: LossConfig,
                         train_cfg: TrainConfig,
                         cache: ScenarioCache = None) -> ScenarioResult:
    """Forward and backward of the full stack on one scenario.

    Gradients are returned, not applied: predictor parameter gradients as a
    dict matching the parameter arrays, cost-weight gradients as (psi, alpha).
    When the iLQR backward pass is skipped (no convergence or unstable active
    set) the control loss still contributes its value but no gradients.
    """
    a1, a2, a3 = effective_alphas(loss_cfg, train_cfg.train_mode)
    cache = build_cache(scn, train_cfg) if cache is None else cache
    fixed = cost_mod.hand_tuned_weights()
    mode = train_cfg.train_mode

    pred = predictor_mod.predict(scn.histories(), scn.predicted_agent_id,
                                 scn.ego_id, params)
    gt_agent = scn.future_positions(scn.predicted_agent_id)
    nll_targets = gt_agent
    if train_cfg.bias_offset != 0.0:
        nll_targets = predictor_mod.bias_targets(
            gt_agent, scn.current_state(scn.ego_id)[2], train_cfg.bias_offset)
    pred_loss, nll_dpos, nll_dprobs, nll_dvar = predictor_mod.nll_grads(
        pred, nll_targets)

    upstream_pos = np.zeros_like(pred.positions)
    upstream_probs = np.zeros_like(pred.mode_probs)
    upstream_var = np.zeros_like(pred.pos_var)
    psi_grad = np.zeros(cost_mod.NUM_TERMS)
    alpha_grad = 0.0
    if a1 > 0:
        upstream_pos += a1 * nll_dpos
        upstream_probs += a1 * nll_dprobs
        upstream_var += a1 * nll_dvar

    plan_loss = 0.0
    ctr_loss = 0.0
    control_skipped = False
    if a2 > 0 or a3 > 0 or mode == "cost_tuning":
        plan_ctx = _plan_context(scn, pred, "model")
        sel = planner_mod.cost_and_select(cache.candidates, plan_ctx, weights,
                                          train_cfg.beta)
        target = cache.rl_target if loss_cfg.setting == "rl" else cache.il_target
        plan_loss, d_costs = planner_mod.planning_loss(sel, target)

        if a2 > 0:
            for n, cand in enumerate(sel.candidates):
                if d_costs[n] == 0.0:
                    continue
                ctx_n = replace(plan_ctx, lane=cand.lane)
                wg = cost_mod.grad_weights(cand.trajectory, ctx_n, weights)
                psi_grad += a2 * d_costs[n] * wg.d_psi
                alpha_grad += a2 * d_costs[n] * wg.d_alpha
                pg = cost_mod.grad_predictions(cand.trajectory, ctx_n, weights)
                if scn.predicted_agent_id in pg:
                    grads_n = pg[scn.predicted_agent_id]
                    upstream_pos += a2 * d_costs[n] * grads_n.d_positions
                    upstream_probs += a2 * d_costs[n] * grads_n.d_mode_probs

        if a3 > 0:
            chosen = sel.candidates[sel.selected]
            ctx_sel = replace(plan_ctx, lane=chosen.lane)
            sol = controller.solve(chosen.trajectory,
                                   cost_mod.DrivingCost(ctx_sel, weights),
                                   train_cfg.ilqr)
            gt_ctx = replace(cache.gt_ctx, lane=chosen.lane)
            ctr_loss, dLx, dLu = _ctr_loss_grads(
                sol.trajectory, loss_cfg, gt_ctx,
                scn.future_positions(scn.ego_id), fixed)
            bg = controller.backward(sol, dLx, dLu, ctx_sel, weights)
            control_skipped = bg.skipped
            if not bg.skipped:
                psi_grad += a3 * bg.d_psi
                alpha_grad += a3 * bg.d_alpha
                if scn.predicted_agent_id in bg.d_predictions:
                    grads_c = bg.d_predictions[scn.predicted_agent_id]
                    upstream_pos += a3 * grads_c.d_positions
                    upstream_probs += a3 * grads_c.d_mode_probs

    param_grads = None
    if mode != "cost_tuning":
        param_grads = predictor_mod.zero_grads(params)
        upstream = predictor_mod.PredictionUpstream(
            d_positions=upstream_pos, d_mode_probs=upstream_probs,
            d_pos_var=upstream_var)
        predictor_mod.accumulate_grads(pred, upstream, params, param_grads)

    total = a1 * pred_loss + a2 * plan_loss + a3 * ctr_loss
    return ScenarioResult(
        loss=float(total), pred_loss=float(pred_loss),
        plan_loss=float(plan_loss), ctr_loss=float(ctr_loss),
        param_grads=param_grads, psi_grad=psi_grad, alpha_grad=alpha_grad,
        control_skipped=control_skipped,
        relevance=relevance_weight(scn, mode))


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Adam over a flat dict of arrays (scalars stored as 0-d arrays)."""

    def __init__(self, shapes: dict, learning_rate: float):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, values: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for key in sorted(values):
            g = grads[key]
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            mhat = self.m[key] / (1 - self.beta1 ** self.t)
            vhat = self.v[key] / (1 - self.beta2 ** self.t)
            out[key] = values[key] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    total = math.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    params: predictor_mod.PredictorParams
    weights: cost_mod.CostWeights
    train_mode: str
    setting: str
    seed: int
    config_hash: str

    def to_json(self) -> str:
        cfg = self.params.config
        doc = {
            "format": CHECKPOINT_FORMAT,
            "train_mode": self.train_mode,
            "setting": self.setting,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "psi": self.weights.psi.tolist(),
            "alpha": self.weights.alpha,
            "c_norm": self.weights.c_norm,
            "predictor_config": {
                "num_modes": cfg.num_modes, "hidden": cfg.hidden,
                "history_steps": cfg.history_steps,
                "horizon_steps": cfg.horizon_steps, "dt": cfg.dt,
            },
            "arrays": {k: v.tolist() for k, v in sorted(self.params.arrays.items())},
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a checkpoint document: format "
                             f"{doc.get('format')!r}")
        cfg = predictor_mod.PredictorConfig(**doc["predictor_config"])
        arrays = {k: np.asarray(v, dtype=float) for k, v in doc["arrays"].items()}
        params = predictor_mod.PredictorParams(config=cfg, arrays=arrays)
        weights = cost_mod.CostWeights(
            psi=np.asarray(doc["psi"], dtype=float), alpha=float(doc["alpha"]),
            c_norm=float(doc["c_norm"]))
        return cls(params=params, weights=weights,
                   train_mode=doc["train_mode"], setting=doc["setting"],
                   seed=int(doc["seed"]), config_hash=doc["config_hash"])


def config_hash(train_cfg: TrainConfig, loss_cfg: LossConfig) -> str:
    payload = repr((train_cfg.epochs, train_cfg.batch_size,
                    train_cfg.learning_rate, train_cfg.clip_norm,
                    train_cfg.seed, train_cfg.train_mode,
                    train_cfg.bias_offset, train_cfg.beta,
                    loss_cfg.alpha1, loss_cfg.alpha2, loss_cfg.alpha3,
                    loss_cfg.setting))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Training loop


def perturb_psi(weights: cost_mod.CostWeights, rng: np.random.Generator,
                scale: float = 0.5) -> cost_mod.CostWeights:
    """Multiplicative perturbation of the weight logits, first entry pinned."""
    psi = weights.psi.copy()
    psi[1:] *= 1.0 + rng.uniform(-scale, scale, size=psi.size - 1)
    return weights.with_params(psi=psi)


def predictor_config_for(scn: Scenario) -> predictor_mod.PredictorConfig:
    return predictor_mod.PredictorConfig(
        history_steps=scn.past_steps,
        horizon_steps=scn.plan_steps, dt=scn.dt)


def train(train_scenarios, val_scenarios, train_cfg: TrainConfig,
          loss_cfg: LossConfig, init_params: predictor_mod.PredictorParams = None,
          init_weights: cost_mod.CostWeights = None):
    """Run the optimizer; returns (checkpoint, per-epoch log records).

    Deterministic given (seed, configs, data). cost_tuning trains psi[1:] and
    log(alpha) with the predictor frozen; every other mode trains the
    predictor with the cost weights fixed.
    """
    if not train_scenarios:
        raise ValueError("empty training set")
    rng = np.random.default_rng(train_cfg.seed)
    if init_params is None:
        init_params = predictor_mod.PredictorParams.init(
            predictor_config_for(train_scenarios[0]), rng)
    params = init_params.copy()
    weights = cost_mod.hand_tuned_weights() if init_weights is None else init_weights
    tune_cost = train_cfg.train_mode == "cost_tuning"

    usable, caches = [], {}
    for s in train_scenarios:
        try:
            caches[s.scenario_id] = build_cache(s, train_cfg)
        except ValueError:
            continue
        usable.append(s)
    if not usable:
        raise ValueError("no scenario produced at least 2 plan candidates")
    train_scenarios = usable
    val_caches = {}
    val_usable = []
    for s in val_scenarios or []:
        try:
            val_caches[s.scenario_id] = build_cache(s, train_cfg)
        except ValueError:
            continue
        val_usable.append(s)
    if tune_cost:
        opt = Adam({"psi_tail": (cost_mod.NUM_TERMS - 1,), "log_alpha": ()},
                   train_cfg.learning_rate)
    else:
        opt = Adam({k: v.shape for k, v in params.arrays.items()},
                   train_cfg.learning_rate)

    log = []
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(train_scenarios))
        epoch_loss = 0.0
        skipped = 0
        invariant_gap = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [train_scenarios[i] for i in order[start:start + train_cfg.batch_size]]
            results = [
                total_loss_and_grads(s, params, weights, loss_cfg, train_cfg,
                                     caches[s.scenario_id])
                for s in batch
            ]
            rel = np.array([r.relevance for r in results])
            rel = rel / np.mean(rel)  # batch-mean 1, keeps the step size comparable
            epoch_loss += float(sum(r.loss for r in results))
            skipped += sum(r.control_skipped for r in results)

            if tune_cost:
                g_psi = np.mean([r.psi_grad for r in results], axis=0)
                g_alpha = float(np.mean([r.alpha_grad for r in results]))
                grads = {"psi_tail": g_psi[1:],
                         "log_alpha": np.asarray(g_alpha * weights.alpha)}
                grads = clip_global_norm(grads, train_cfg.clip_norm)
                new = opt.step(
                    {"psi_tail": weights.psi[1:],
                     "log_alpha": np.asarray(np.log(weights.alpha))}, grads)
                psi = weights.psi.copy()
                psi[1:] = new["psi_tail"]
                weights = weights.with_params(psi=psi,
                                              alpha=float(np.exp(new["log_alpha"])))
                invariant_gap = max(invariant_gap, abs(
                    float(np.sum(weights.values)) / weights.alpha - weights.c_norm))
            else:
                grads = predictor_mod.zero_grads(params)
                for w_rel, res in zip(rel, results):
                    for key, g in res.param_grads.items():
                        grads[key] += w_rel * g
                grads = {k: g / len(results) for k, g in grads.items()}
                grads = clip_global_norm(grads, train_cfg.clip_norm)
                params.arrays = opt.step(params.arrays, grads)

        record = {"epoch": epoch, "train_loss": epoch_loss / len(order),
                  "control_skipped": int(skipped)}
        if tune_cost:
            record["weight_invariant_gap"] = invariant_gap
        if val_usable:
            record.update(_validation_metrics(val_usable, params, weights,
                                              loss_cfg, train_cfg, val_caches))
        if not np.isfinite(record["train_loss"]):
            raise RuntimeError(f"training diverged at epoch {epoch}")
        log.append(record)

    ckpt = Checkpoint(params=params, weights=weights,
                      train_mode=train_cfg.train_mode, setting=loss_cfg.setting,
                      seed=train_cfg.seed,
                      config_hash=config_hash(train_cfg, loss_cfg))
    return ckpt, log


def _validation_metrics(scenarios, params, weights, loss_cfg, train_cfg, caches):
    pred_losses, plan_losses, ctr_losses = [], [], []
    eval_cfg = replace(train_cfg, bias_offset=0.0)
    for scn in scenarios:
        res = total_loss_and_grads(scn, params, weights, loss_cfg, eval_cfg,
                                   caches[scn.scenario_id])
        pred_losses.append(res.pred_loss)
        plan_losses.append(res.plan_loss)
        ctr_losses.append(res.ctr_loss)
    return {"val_pred_loss": float(np.mean(pred_losses)),
            "val_plan_loss": float(np.mean(plan_losses)),
            "val_ctr_loss": float(np.mean(ctr_losses))}


# ---------------------------------------------------------------------------
# Open-loop evaluation


@dataclass
class EvalRecord:
    scenario_id: str
    run: str
    ade: float
    nll: float
    plan_loss: float
    ctr_loss: float
    converged: bool


def evaluate_open_loop(scenarios, run_name: str, setting: str,
                       checkpoint: Checkpoint = None, use: str = None,
                       ilqr: controller.ILQRConfig = None, beta: float = 1.0):
    """Per-scenario stack metrics for one run.

    ``use`` picks the planner's view of the predicted agent: "model" (needs a
    checkpoint), "gt" (oracle), or "none" (baseline). Plan targets and
    hindsight costs always come from ground truth futures with hand-tuned
    weights, so runs are directly comparable.
    """
    if use is None:
        use = "model" if checkpoint is not None else "none"
    if use == "model" and checkpoint is None:
        raise ValueError("model run requires a checkpoint")
    ilqr = controller.ILQRConfig() if ilqr is None else ilqr
    weights = checkpoint.weights if checkpoint is not None \
        else cost_mod.hand_tuned_weights()
    fixed = cost_mod.hand_tuned_weights()
    records = []
    for scn in scenarios:
        try:
            cache = build_cache(scn)
        except ValueError:
            continue  # deterministic, so every run skips the same scenarios
        pred = None
        ade = nll = float("nan")
        if use == "model":
            pred = predictor_mod.predict(scn.histories(), scn.predicted_agent_id,
                                         scn.ego_id, checkpoint.params)
            gt_agent = scn.future_positions(scn.predicted_agent_id)
            ade = predictor_mod.ade(pred, gt_agent)
            nll = predictor_mod.nll(pred, gt_agent)
        plan_ctx = _plan_context(scn, pred, use)
        sel = planner_mod.cost_and_select(cache.candidates, plan_ctx, weights, beta)
        target = cache.rl_target if setting == "rl" else cache.il_target
        plan_loss, _ = planner_mod.planning_loss(sel, target)
        chosen = sel.candidates[sel.selected]
        ctx_sel = replace(plan_ctx, lane=chosen.lane)
        sol = controller.solve(chosen.trajectory,
                               cost_mod.DrivingCost(ctx_sel, weights), ilqr)
        if setting == "il":
            ctr = il_loss(sol.trajectory, scn.future_positions(scn.ego_id))
        else:
            ctr = hindsight_cost(
                sol.trajectory,
                {scn.predicted_agent_id: scn.future_positions(scn.predicted_agent_id)},
                scn.goal, chosen.lane, fixed)
        records.append(EvalRecord(
            scenario_id=scn.scenario_id, run=run_name, ade=float(ade),
            nll=float(nll), plan_loss=float(plan_loss), ctr_loss=float(ctr),
            converged=bool(sol.converged)))
    return records


def relative_to_baseline(records, baseline_records):
    """Per-scenario metric differences against a baseline run (matched by id)."""
    base = {r.scenario_id: r for r in baseline_records}
    rel = []
    for r in records:
        b = base[r.scenario_id]
        rel.append({
            "scenario_id": r.scenario_id, "run": r.run,
            "rel_plan_loss": r.plan_loss - b.plan_loss,
            "rel_ctr_loss": r.ctr_loss - b.ctr_loss,
        })
    return rel


def summarize(records):
    """Aggregate means (NaN-aware for prediction metrics of baseline runs)."""
    def mean(vals):
        arr = np.asarray(vals, dtype=float)
        good = arr[np.isfinite(arr)]
        return float(np.mean(good)) if good.size else float("nan")
    return {
        "ade": mean([r.ade for r in records]),
        "nll": mean([r.nll for r in records]),
        "plan_loss": mean([r.plan_loss for r in records]),
        "ctr_loss": mean([r.ctr_loss for r in records]),
        "converged_frac": mean([1.0 if r.converged else 0.0 for r in records]),
    }
