"""Box-constrained iterative LQR with an adjoint backward pass.

The forward solver alternates a Riccati backward sweep on the Gauss-Newton
quadratization with a line-searched forward rollout. Control limits are
handled by exact clamping: the feedforward step is clamped to the box during
the sweep (clamped dimensions get their feedback row zeroed) and the rollout
clamps again, so no iterate ever violates the limits. Only cost-decreasing
updates are accepted; convergence is declared when the stacked 2-norm of the
control change drops below the threshold, which a failed line search satisfies
with a zero change.

The backward pass implicitly differentiates the converged solution: at a
stationary point the sensitivity of the optimal trajectory to any parameter
that enters through the stage-cost gradient g is obtained by solving one more
LQR with the upstream loss gradient as its linear term (clamped control
dimensions frozen at zero), then contracting the resulting trajectory
perturbation with d(g)/d(parameter). Perturbations of the Hessian drop out
because they multiply the (zero) primal step at the solution.

The adjoint LQR must be built from the true curvature of the Lagrangian at
the solution, not the damped Gauss-Newton blocks the forward sweep descends
on: the exact cost Hessians plus the costate-weighted second derivatives of
the dynamics. Both sweeps share the same stationary point (the Riccati
feedforward vanishes exactly when the stage gradients do, whatever Hessian
approximation is used), so the solver can keep its safely positive
quadratization while the sensitivities come out consistent with finite
differences of the full solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cost as cost_mod
from . import dynamics as dyn_mod
from .dynamics import CONTROL_DIM, STATE_DIM, ControlLimits, DEFAULT_LIMITS, Trajectory

# Tiny ridge on Q_uu keeps the sweep well-posed if the effort weight is driven
# toward zero by weight learning; orders of magnitude below any real curvature.
QUU_RIDGE = 1e-9


@dataclass(frozen=True)
class ILQRConfig:
    max_iters: int = 5
    conv_threshold: float = 0.05
    line_search_max_tries: int = 5
    line_search_shrink: float = 5.0
    limits: ControlLimits = DEFAULT_LIMITS


@dataclass
class ILQRSolution:
    trajectory: Trajectory
    converged: bool
    iterations: int
    accepted_updates: int
    cost_trace: list
    grads: np.ndarray        # final quadratization, (T+1, 6)
    hessians: np.ndarray     # (T+1, 6, 6)
    A: np.ndarray            # final dynamics linearization, (T, 4, 4)
    B: np.ndarray            # (T, 4, 2)
    active_set: np.ndarray   # (T, 2) bool, controls exactly at a bound
    active_set_stable: bool  # False if the final accepted update changed it


def _active_set(controls: np.ndarray, limits: ControlLimits) -> np.ndarray:
    return (controls <= limits.lower[None, :]) | (controls >= limits.upper[None, :])


def _backward_sweep(A, B, quad: cost_mod.Quadratization, controls, limits):
    """Riccati recursion with box-clamped feedforward.

    Returns gains (k, K); clamped feedforward dimensions have their feedback
    rows zeroed so the forward pass cannot push a saturated control further
    out of the box through state feedback.
    """
    T = controls.shape[0]
    k = np.zeros((T, CONTROL_DIM))
    K = np.zeros((T, CONTROL_DIM, STATE_DIM))
    Vx = quad.grads[T, :STATE_DIM].copy()
    Vxx = quad.hessians[T, :STATE_DIM, :STATE_DIM].copy()
    for t in range(T - 1, -1, -1):
        gx = quad.grads[t, :STATE_DIM]
        gu = quad.grads[t, STATE_DIM:]
        Hxx = quad.hessians[t, :STATE_DIM, :STATE_DIM]
        Huu = quad.hessians[t, STATE_DIM:, STATE_DIM:]
        Hux = quad.hessians[t, STATE_DIM:, :STATE_DIM]
        Qx = gx + A[t].T @ Vx
        Qu = gu + B[t].T @ Vx
        Qxx = Hxx + A[t].T @ Vxx @ A[t]
        Quu = Huu + B[t].T @ Vxx @ B[t] + QUU_RIDGE * np.eye(CONTROL_DIM)
        Qux = Hux + B[t].T @ Vxx @ A[t]

        kt = -np.linalg.solve(Quu, Qu)
        Kt = -np.linalg.solve(Quu, Qux)
        target = np.clip(controls[t] + kt, limits.lower, limits.upper)
        clamped = target != controls[t] + kt
        kt = target - controls[t]
        Kt[clamped, :] = 0.0
        k[t], K[t] = kt, Kt

        Vx = Qx + Kt.T @ (Quu @ kt) + Kt.T @ Qu + Qux.T @ kt
        Vxx = Qxx + Kt.T @ Quu @ Kt + Kt.T @ Qux + Qux.T @ Kt
        Vxx = 0.5 * (Vxx + Vxx.T)
    return k, K


def _forward_pass(traj: Trajectory, k, K, scale: float, limits: ControlLimits,
                  dynamics) -> Trajectory:
    T = traj.horizon
    states = np.empty_like(traj.states)
    controls = np.empty_like(traj.controls)
    states[0] = traj.states[0]
    for t in range(T):
        du = scale * k[t] + K[t] @ (states[t] - traj.states[t])
        controls[t] = np.clip(traj.controls[t] + du, limits.lower, limits.upper)
        states[t + 1] = dynamics.step(states[t], controls[t], traj.dt)
    return Trajectory(states=states, controls=controls, dt=traj.dt)


def solve(init: Trajectory, cost, cfg: ILQRConfig, dynamics=dyn_mod) -> ILQRSolution:
    """Run iLQR from an initialization that must already satisfy the limits.

    ``cost`` is any object with evaluate(traj) and quadratize(traj); dynamics
    any module/object with step and jacobians.
    """
    if not cfg.limits.contains(init.controls):
        raise ValueError("initialization violates control limits")
    traj = init
    cost_val = cost.evaluate(traj)
    if not np.isfinite(cost_val):
        raise ValueError(f"non-finite initial cost {cost_val}")
    trace = [cost_val]
    converged = False
    iterations = 0
    accepted = 0
    active_prev = _active_set(traj.controls, cfg.limits)
    changed_last_pass = False

    for _ in range(cfg.max_iters):
        iterations += 1
        A, B = dyn_mod.linearize(traj, dynamics)
        quad = cost.quadratize(traj)
        k, K = _backward_sweep(A, B, quad, traj.controls, cfg.limits)

        new_traj = None
        new_cost = None
        scale = 1.0
        for _try in range(cfg.line_search_max_tries):
            candidate = _forward_pass(traj, k, K, scale, cfg.limits, dynamics)
            candidate_cost = cost.evaluate(candidate)
            if np.isfinite(candidate_cost) and candidate_cost < cost_val:
                new_traj, new_cost = candidate, candidate_cost
                break
            scale /= cfg.line_search_shrink

        changed_last_pass = False
        if new_traj is None:
            # Line search exhausted. The clamped feedforward is the update the
            # sweep wanted at full scale; only a negligible one means we are at
            # a stationary point rather than stalled on curvature the shrink
            # schedule cannot handle. Reporting a stall as converged would let
            # the backward pass differentiate a non-stationary point.
            if float(np.linalg.norm(k)) <= cfg.conv_threshold:
                converged = True
            break
        delta = float(np.linalg.norm(new_traj.controls - traj.controls))
        active_new = _active_set(new_traj.controls, cfg.limits)
        changed_last_pass = bool(np.any(active_new != active_prev))
        active_prev = active_new
        traj, cost_val = new_traj, new_cost
        trace.append(cost_val)
        accepted += 1
        if delta <= cfg.conv_threshold:
            converged = True
            break

    A, B = dyn_mod.linearize(traj, dynamics)
    quad = cost.quadratize(traj)
    return ILQRSolution(
        trajectory=traj, converged=converged, iterations=iterations,
        accepted_updates=accepted, cost_trace=trace,
        grads=quad.grads, hessians=quad.hessians, A=A, B=B,
        active_set=_active_set(traj.controls, cfg.limits),
        active_set_stable=not changed_last_pass,
    )


def adjoint_solve(sol: ILQRSolution, d_loss_d_states, d_loss_d_controls=None,
                  hessians=None):
    """Solve the adjoint LQR around the converged trajectory.

    Finds the stationary point of sum_t 0.5 dz_t' H_t dz_t + (dL/dz_t)' dz_t
    subject to the final dynamics linearization with dx_0 = 0 and clamped
    control dimensions frozen at zero. The result equals -M dL/dz where M is
    the reduced KKT inverse, so contracting it with d(stage gradient)/
    d(parameter) yields dL/d(parameter). ``hessians`` defaults to the solver's
    final quadratization; pass the exact Lagrangian curvature for sensitivities
    that match finite differences (the sweep solves rather than minimizes, so
    indefinite blocks are fine as long as the Q_uu pivots stay invertible).
    """
    T = sol.trajectory.horizon
    dLx = np.asarray(d_loss_d_states, dtype=float)
    assert dLx.shape == (T + 1, STATE_DIM)
    if d_loss_d_controls is None:
        dLu = np.zeros((T, CONTROL_DIM))
    else:
        dLu = np.asarray(d_loss_d_controls, dtype=float)
        assert dLu.shape == (T, CONTROL_DIM)
    if hessians is None:
        hessians = sol.hessians

    A, B = sol.A, sol.B
    frozen = sol.active_set
    k = np.zeros((T, CONTROL_DIM))
    K = np.zeros((T, CONTROL_DIM, STATE_DIM))
    Vx = dLx[T].copy()
    Vxx = hessians[T, :STATE_DIM, :STATE_DIM].copy()
    for t in range(T - 1, -1, -1):
        Hxx = hessians[t, :STATE_DIM, :STATE_DIM]
        Huu = hessians[t, STATE_DIM:, STATE_DIM:]
        Hux = hessians[t, STATE_DIM:, :STATE_DIM]
        Qx = dLx[t] + A[t].T @ Vx
        Qu = dLu[t] + B[t].T @ Vx
        Qxx = Hxx + A[t].T @ Vxx @ A[t]
        Quu = Huu + B[t].T @ Vxx @ B[t] + QUU_RIDGE * np.eye(CONTROL_DIM)
        Qux = Hux + B[t].T @ Vxx @ A[t]

        free = ~frozen[t]
        kt = np.zeros(CONTROL_DIM)
        Kt = np.zeros((CONTROL_DIM, STATE_DIM))
        if np.any(free):
            Quu_ff = Quu[np.ix_(free, free)]
            kt[free] = -np.linalg.solve(Quu_ff, Qu[free])
            Kt[free, :] = -np.linalg.solve(Quu_ff, Qux[free, :])
        k[t], K[t] = kt, Kt

        Vx = Qx + Kt.T @ (Quu @ kt) + Kt.T @ Qu + Qux.T @ kt
        Vxx = Qxx + Kt.T @ Quu @ Kt + Kt.T @ Qux + Qux.T @ Kt
        Vxx = 0.5 * (Vxx + Vxx.T)

    dx = np.zeros((T + 1, STATE_DIM))
    du = np.zeros((T, CONTROL_DIM))
    for t in range(T):
        du[t] = k[t] + K[t] @ dx[t]
        dx[t + 1] = A[t] @ dx[t] + B[t] @ du[t]
    return dx, du


def lagrangian_hessians(sol: ILQRSolution, ctx: cost_mod.CostContext,
                        weights: cost_mod.CostWeights) -> np.ndarray:
    """Exact curvature of the Lagrangian at the converged trajectory.

    Exact cost Hessians plus the dynamics curvature weighted by the costates
    p_T = g_x,T, p_t = g_x,t + A_t' p_{t+1}; the multiplier of the stage-t
    rollout constraint is -p_{t+1}, so each stage block gains
    sum_i p_{t+1}[i] * d2(step_i)/dz_t2.
    """
    traj = sol.trajectory
    T = traj.horizon
    hess = cost_mod.exact_hessians(traj, ctx, weights)
    p = np.zeros((T + 1, STATE_DIM))
    p[T] = sol.grads[T, :STATE_DIM]
    for t in range(T - 1, 0, -1):
        p[t] = sol.grads[t, :STATE_DIM] + sol.A[t].T @ p[t + 1]
    for t in range(T):
        F = dyn_mod.step_hessians(traj.states[t], traj.controls[t], traj.dt)
        hess[t] += np.einsum("i,ijk->jk", p[t + 1], F)
    return hess


@dataclass
class BackwardGrads:
    d_psi: np.ndarray = field(default_factory=lambda: np.zeros(cost_mod.NUM_TERMS))
    d_alpha: float = 0.0
    d_predictions: dict = field(default_factory=dict)
    skipped: bool = False


def backward(sol: ILQRSolution, d_loss_d_states, d_loss_d_controls,
             ctx: cost_mod.CostContext, weights: cost_mod.CostWeights) -> BackwardGrads:
    """Gradients of a trajectory loss w.r.t. cost parameters and predictions.

    Skips (returns zeros with the flag set) when the solve did not converge or
    its active set changed in the final iteration; in both cases the implicit
    differentiation assumptions do not hold. The adjoint runs on the exact
    Lagrangian curvature; if that system is singular it falls back to the
    damped Gauss-Newton blocks, trading a little bias for a usable direction.
    """
    if not sol.converged or not sol.active_set_stable:
        empty = {
            agent_id: cost_mod.PredictionCostGrads(
                d_positions=np.zeros_like(fut.positions),
                d_mode_probs=np.zeros_like(fut.mode_probs))
            for agent_id, fut in ctx.agent_futures.items() if fut.differentiable
        }
        return BackwardGrads(d_predictions=empty, skipped=True)

    hess = lagrangian_hessians(sol, ctx, weights)
    try:
        dx, du = adjoint_solve(sol, d_loss_d_states, d_loss_d_controls,
                               hessians=hess)
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(du))):
            raise np.linalg.LinAlgError("non-finite adjoint solution")
    except np.linalg.LinAlgError:
        dx, du = adjoint_solve(sol, d_loss_d_states, d_loss_d_controls)
    T = sol.trajectory.horizon
    dz = np.concatenate([dx, np.vstack([du, np.zeros((1, CONTROL_DIM))])], axis=1)

    term_grads = cost_mod.stage_term_gradients(sol.trajectory, ctx)  # (5, T+1, 6)
    d_values = np.einsum("itd,td->i", term_grads, dz)
    d_psi = weights.dw_dpsi().T @ d_values
    d_alpha = float(d_values @ weights.dw_dalpha())

    d_predictions = {}
    cross = cost_mod.prediction_cross_terms(sol.trajectory, ctx, weights)
    for agent_id, terms in cross.items():
        dp = dx[1:, 0:2]  # stage positions aligned with prediction steps
        d_positions = np.einsum("tkij,ti->tkj", terms.d_pos, dp).transpose(1, 0, 2)
        d_mode_probs = np.einsum("tki,ti->k", terms.d_prob, dp)
        d_predictions[agent_id] = cost_mod.PredictionCostGrads(
            d_positions=d_positions, d_mode_probs=d_mode_probs)
    return BackwardGrads(d_psi=d_psi, d_alpha=d_alpha,
                         d_predictions=d_predictions, skipped=False)
