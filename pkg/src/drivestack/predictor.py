"""Multimodal trajectory predictor with dynamically consistent modes.

A small tanh MLP maps relative-history features of the target agent to K mode
logits, K control sequences and K per-step positional log-variances. Each mode
is obtained by integrating its control sequence through the shared unicycle
dynamics from the agent's current state, so every predicted mode is feasible
by construction. The training loss is the Gaussian-mixture negative
log-likelihood of the ground-truth future positions.

Gradients are propagated manually: position gradients run backward through the
dynamics rollout (adjoint chain of step Jacobians), mode-probability gradients
through the logit softmax, and everything through the MLP. No autodiff
framework is involved, which keeps the backward path explicit and cheap at
this scale.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import logsumexp

from . import dynamics
from .dynamics import STATE_DIM, wrap_angle

LOG_TWO_PI = float(np.log(2.0 * np.pi))
# Wide safety clamp on log-variances; random small weights and trained desk
# scale models stay far inside, the clamp only guards divergence.
LOG_VAR_MIN, LOG_VAR_MAX = -6.0, 4.0


@dataclass(frozen=True)
class PredictorConfig:
    num_modes: int = 4
    hidden: int = 64
    history_steps: int = 8   # past states beyond the current one
    horizon_steps: int = 6
    dt: float = 0.5

    @property
    def feature_dim(self) -> int:
        # relative history + current speed + ego indicator + relative ego pose
        return (self.history_steps + 1) * 4 + 1 + 1 + 4


def _mlp_fields(cfg: PredictorConfig):
    K, T, H, F = cfg.num_modes, cfg.horizon_steps, cfg.hidden, cfg.feature_dim
    return {
        "w1": (F, H), "b1": (H,),
        "w2": (H, H), "b2": (H,),
        "w_logits": (H, K), "b_logits": (K,),
        "w_controls": (H, K * T * 2), "b_controls": (K * T * 2,),
        "w_logvar": (H, K * T), "b_logvar": (K * T,),
    }


@dataclass
class PredictorParams:
    """All weights of the predictor as a flat dict of arrays."""

    config: PredictorConfig
    arrays: dict

    @classmethod
    def init(cls, config: PredictorConfig, rng: np.random.Generator) -> "PredictorParams":
        arrays = {}
        for name, shape in _mlp_fields(config).items():
            if name.startswith("w"):
                fan_in = shape[0]
                arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
            else:
                arrays[name] = np.zeros(shape)
        return cls(config=config, arrays=arrays)

    @classmethod
    def zeros(cls, config: PredictorConfig) -> "PredictorParams":
        arrays = {name: np.zeros(shape) for name, shape in _mlp_fields(config).items()}
        return cls(config=config, arrays=arrays)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.arrays[name].ravel() for name in sorted(self.arrays)])

    def from_vector(self, vector: np.ndarray) -> "PredictorParams":
        arrays = {}
        offset = 0
        for name in sorted(self.arrays):
            shape = self.arrays[name].shape
            size = int(np.prod(shape))
            arrays[name] = vector[offset:offset + size].reshape(shape).copy()
            offset += size
        assert offset == vector.size
        return PredictorParams(config=self.config, arrays=arrays)

    def copy(self) -> "PredictorParams":
        return PredictorParams(config=self.config,
                               arrays={k: v.copy() for k, v in self.arrays.items()})


def zero_grads(params: PredictorParams) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.arrays.items()}


def features(histories: dict, target_id: str, ego_id: str,
             config: PredictorConfig) -> np.ndarray:
    """Feature vector for one target agent.

    The target's history is expressed relative to its current pose (positions
    rotated into the current heading frame, headings and speeds differenced),
    followed by the current absolute speed, an ego indicator, and the ego's
    current pose relative to the target.
    """
    target = np.asarray(histories[target_id], dtype=float)
    expected = config.history_steps + 1
    if target.shape != (expected, STATE_DIM):
        raise ValueError(
            f"history of {target_id} must be ({expected}, {STATE_DIM}), got {target.shape}"
        )
    if not np.all(np.isfinite(target)):
        raise ValueError(f"non-finite history for {target_id}")
    current = target[-1]
    cos_h, sin_h = np.cos(current[2]), np.sin(current[2])
    rot = np.array([[cos_h, sin_h], [-sin_h, cos_h]])  # world -> target frame

    rel_pos = (target[:, :2] - current[:2]) @ rot.T
    rel_head = wrap_angle(target[:, 2] - current[2])
    rel_speed = target[:, 3] - current[3]
    own = np.concatenate(
        [rel_pos, rel_head[:, None], rel_speed[:, None]], axis=1
    ).ravel()

    ego = np.asarray(histories[ego_id], dtype=float)[-1]
    ego_rel_pos = rot @ (ego[:2] - current[:2])
    ego_rel = np.array(
        [ego_rel_pos[0], ego_rel_pos[1], wrap_angle(ego[2] - current[2]),
         ego[3] - current[3]]
    )
    return np.concatenate(
        [own, [current[3]], [1.0 if target_id == ego_id else 0.0], ego_rel]
    )


@dataclass
class TrajectoryPrediction:
    """Predictor output plus the forward cache needed for backprop."""

    mode_states: np.ndarray   # (K, T+1, 4) rollouts including the current state
    mode_probs: np.ndarray    # (K,)
    pos_var: np.ndarray       # (K, T) isotropic positional variances in m^2
    mode_controls: np.ndarray  # (K, T, 2)
    cache: dict

    @property
    def positions(self) -> np.ndarray:
        return self.mode_states[:, 1:, :2]

    @property
    def num_modes(self) -> int:
        return self.mode_states.shape[0]

    @property
    def horizon(self) -> int:
        return self.mode_states.shape[1] - 1


def predict(histories: dict, target_id: str, ego_id: str,
            params: PredictorParams) -> TrajectoryPrediction:
    cfg = params.config
    phi = features(histories, target_id, ego_id, cfg)
    a = params.arrays
    h1 = np.tanh(phi @ a["w1"] + a["b1"])
    h2 = np.tanh(h1 @ a["w2"] + a["b2"])
    logits = h2 @ a["w_logits"] + a["b_logits"]
    controls = (h2 @ a["w_controls"] + a["b_controls"]).reshape(
        cfg.num_modes, cfg.horizon_steps, 2
    )
    logvar_raw = (h2 @ a["w_logvar"] + a["b_logvar"]).reshape(
        cfg.num_modes, cfg.horizon_steps
    )
    logvar = np.clip(logvar_raw, LOG_VAR_MIN, LOG_VAR_MAX)

    shifted = np.exp(logits - np.max(logits))
    mode_probs = shifted / np.sum(shifted)

    current = np.asarray(histories[target_id], dtype=float)[-1]
    mode_states = np.empty((cfg.num_modes, cfg.horizon_steps + 1, STATE_DIM))
    for k in range(cfg.num_modes):
        mode_states[k] = dynamics.rollout(current, controls[k], cfg.dt).states

    cache = {"phi": phi, "h1": h1, "h2": h2, "logvar_raw": logvar_raw,
             "mode_probs": mode_probs}
    return TrajectoryPrediction(mode_states=mode_states, mode_probs=mode_probs,
                                pos_var=np.exp(logvar), mode_controls=controls,
                                cache=cache)


def nll(pred: TrajectoryPrediction, gt_positions) -> float:
    return _nll_impl(pred, gt_positions)[0]


def nll_grads(pred: TrajectoryPrediction, gt_positions):
    """NLL and its gradients w.r.t. (mode positions, mode probs, pos_var)."""
    return _nll_impl(pred, gt_positions, with_grads=True)


def _nll_impl(pred: TrajectoryPrediction, gt_positions, with_grads: bool = False):
    gt = np.asarray(gt_positions, dtype=float)
    K, T = pred.num_modes, pred.horizon
    if gt.shape != (T, 2):
        raise ValueError(f"gt_positions must be ({T}, 2), got {gt.shape}")
    diff = pred.positions - gt[None, :, :]          # (K, T, 2)
    sq = np.einsum("ktd,ktd->kt", diff, diff)
    var = pred.pos_var
    # 2D isotropic Gaussian: log N = -log(2 pi var) - sq / (2 var)
    log_comp = np.log(pred.mode_probs)[:, None] - LOG_TWO_PI - np.log(var) \
        - sq / (2.0 * var)
    log_mix = logsumexp(log_comp, axis=0)           # (T,)
    value = float(-np.mean(log_mix))
    if not with_grads:
        return value, None, None, None
    resp = np.exp(log_comp - log_mix[None, :])      # (K, T) responsibilities
    d_positions = resp[:, :, None] * diff / var[:, :, None] / T
    d_pos_var = resp * (1.0 / var - sq / (2.0 * var * var)) / T
    d_mode_probs = -np.sum(resp / pred.mode_probs[:, None], axis=1) / T
    return value, d_positions, d_mode_probs, d_pos_var


def ade(pred: TrajectoryPrediction, gt_positions) -> float:
    """Average displacement error of the most likely mode (ties: lowest index)."""
    gt = np.asarray(gt_positions, dtype=float)
    best = int(np.argmax(pred.mode_probs))
    return float(np.mean(np.linalg.norm(pred.positions[best] - gt, axis=1)))


def bias_targets(gt_positions, ego_heading: float, magnitude: float) -> np.ndarray:
    """Offset ground-truth targets by (magnitude, 0) meters in the ego frame.

    Used to inject a systematic integration-style error into the prediction
    training signal; evaluation always uses the unbiased targets.
    """
    gt = np.asarray(gt_positions, dtype=float)
    offset = magnitude * np.array([np.cos(ego_heading), np.sin(ego_heading)])
    return gt + offset[None, :]


@dataclass
class PredictionUpstream:
    """Upstream gradients flowing into the predictor outputs."""

    d_positions: np.ndarray = None   # (K, T, 2)
    d_mode_probs: np.ndarray = None  # (K,)
    d_pos_var: np.ndarray = None     # (K, T)


def accumulate_grads(pred: TrajectoryPrediction, upstream: PredictionUpstream,
                     params: PredictorParams, grads: dict) -> None:
    """Backpropagate upstream output gradients into parameter gradients (additive)."""
    cfg = params.config
    a = params.arrays
    K, T = cfg.num_modes, cfg.horizon_steps
    cache = pred.cache

    d_controls = np.zeros((K, T, 2))
    if upstream.d_positions is not None:
        d_positions = np.asarray(upstream.d_positions, dtype=float)
        for k in range(K):
            # Adjoint pass through the rollout: lambda_t = dL/d(state_t).
            lam = np.zeros(STATE_DIM)
            for t in range(T, 0, -1):
                lam[0:2] += d_positions[k, t - 1]
                A, B = dynamics.jacobians(pred.mode_states[k, t - 1],
                                          pred.mode_controls[k, t - 1], cfg.dt)
                d_controls[k, t - 1] = B.T @ lam
                lam = A.T @ lam

    pi = cache["mode_probs"]
    if upstream.d_mode_probs is not None:
        dpi = np.asarray(upstream.d_mode_probs, dtype=float)
        d_logits = pi * (dpi - float(dpi @ pi))
    else:
        d_logits = np.zeros(K)

    if upstream.d_pos_var is not None:
        inside = (cache["logvar_raw"] > LOG_VAR_MIN) & (cache["logvar_raw"] < LOG_VAR_MAX)
        d_logvar = np.asarray(upstream.d_pos_var, dtype=float) * pred.pos_var * inside
    else:
        d_logvar = np.zeros((K, T))

    h1, h2, phi = cache["h1"], cache["h2"], cache["phi"]
    d_h2 = (a["w_logits"] @ d_logits
            + a["w_controls"] @ d_controls.ravel()
            + a["w_logvar"] @ d_logvar.ravel())
    grads["w_logits"] += np.outer(h2, d_logits)
    grads["b_logits"] += d_logits
    grads["w_controls"] += np.outer(h2, d_controls.ravel())
    grads["b_controls"] += d_controls.ravel()
    grads["w_logvar"] += np.outer(h2, d_logvar.ravel())
    grads["b_logvar"] += d_logvar.ravel()

    d_pre2 = d_h2 * (1.0 - h2 * h2)
    grads["w2"] += np.outer(h1, d_pre2)
    grads["b2"] += d_pre2
    d_h1 = a["w2"] @ d_pre2
    d_pre1 = d_h1 * (1.0 - h1 * h1)
    grads["w1"] += np.outer(phi, d_pre1)
    grads["b1"] += d_pre1
