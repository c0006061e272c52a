"""Driving cost: hand-computed terms, FD-checked gradients and Hessians."""

import numpy as np
import pytest

from drivestack import cost as cost_mod
from drivestack.cost import (
    COLLISION, CONTROL_EFFORT, GOAL, LANE_HEADING, LANE_LATERAL, NUM_TERMS,
    AgentFuture, CostContext, CostWeights, gt_future, weights_from_params,
)
from drivestack.dynamics import Trajectory, wrap_angle
from drivestack.lanes import Lane, project


def straight_lane():
    return Lane(lane_id="ref", points=np.array([[-50.0, 0.0], [80.0, 0.0]]))


def random_context(rng, T, n_agents=2, num_modes=3):
    futures = {}
    for i in range(n_agents):
        positions = rng.uniform(-5, 15, size=(num_modes, T, 2))
        probs = rng.uniform(0.1, 1.0, size=num_modes)
        probs = probs / probs.sum()
        futures[f"agent-{i}"] = AgentFuture(positions=positions, mode_probs=probs,
                                            differentiable=True)
    goal = np.array([rng.uniform(5, 15), rng.uniform(-2, 2),
                     rng.uniform(-0.3, 0.3), rng.uniform(0, 8)])
    return CostContext(agent_futures=futures, goal=goal, lane=straight_lane())


def random_trajectory(rng, T):
    # Deliberately dynamics-inconsistent: quadratization treats every stage's
    # [state; control] as free coordinates, so FD must too.
    states = np.column_stack([
        np.linspace(0, 5 * T * 0.5, T + 1) + rng.normal(0, 0.5, T + 1),
        rng.normal(0, 1.0, T + 1),
        rng.normal(0, 0.3, T + 1),
        rng.uniform(0, 10, T + 1),
    ])
    controls = np.column_stack([rng.uniform(-1, 1, T), rng.uniform(-4, 3, T)])
    return Trajectory(states=states, controls=controls, dt=0.5)


def random_weights(rng):
    return weights_from_params(rng.normal(0, 1, NUM_TERMS),
                               alpha=float(rng.uniform(0.5, 2.0)), c_norm=7.1)


def test_weights_are_scaled_softmax():
    rng = np.random.default_rng(0)
    for _ in range(20):
        psi = rng.normal(0, 2, NUM_TERMS)
        alpha = float(rng.uniform(0.1, 5.0))
        w = weights_from_params(psi, alpha=alpha, c_norm=7.1)
        e = np.exp(psi - psi.max())
        expected = alpha * 7.1 * e / e.sum()
        assert np.allclose(w.values, expected, rtol=1e-12)
        assert w.values.sum() == pytest.approx(alpha * 7.1)
        assert np.all(w.values > 0)
        # softmax shift invariance
        w2 = weights_from_params(psi + 3.7, alpha=alpha, c_norm=7.1)
        assert np.allclose(w.values, w2.values, rtol=1e-12, atol=1e-12)


def test_term_values_match_direct_loops():
    rng = np.random.default_rng(1)
    T = 6
    traj = random_trajectory(rng, T)
    ctx = random_context(rng, T)
    sigma2 = ctx.rbf_sigma ** 2
    terms = cost_mod.term_values(traj, ctx)

    collision = 0.0
    for fut in ctx.agent_futures.values():
        for t in range(T):
            z = 0.0
            for k in range(fut.num_modes):
                d = traj.states[t + 1, :2] - fut.positions[k, t]
                z += fut.mode_probs[k] * (d @ d)
            collision += np.exp(-z / (2 * sigma2))
    assert terms[COLLISION] == pytest.approx(collision, rel=1e-12)

    gd = traj.states[-1, :2] - ctx.goal[:2]
    assert terms[GOAL] == pytest.approx(gd @ gd, rel=1e-12)

    lat = 0.0
    head = 0.0
    for t in range(T):
        proj = project(ctx.lane, traj.states[t + 1, :2])
        lat += proj.offset ** 2
        head += wrap_angle(traj.states[t + 1, 2] - proj.lane_heading) ** 2
    assert terms[LANE_LATERAL] == pytest.approx(lat, rel=1e-12)
    assert terms[LANE_HEADING] == pytest.approx(head, rel=1e-12)

    assert terms[CONTROL_EFFORT] == pytest.approx(np.sum(traj.controls ** 2),
                                                  rel=1e-12)


def test_evaluate_is_weighted_term_sum():
    rng = np.random.default_rng(2)
    T = 5
    traj = random_trajectory(rng, T)
    ctx = random_context(rng, T)
    weights = random_weights(rng)
    total = cost_mod.evaluate(traj, ctx, weights)
    assert total == pytest.approx(
        float(weights.values @ cost_mod.term_values(traj, ctx)), rel=1e-14)


def _fd_stage_grad(traj, ctx, weights, t, j, h=1e-6):
    """Central difference in coordinate j of stage t's [state; control]."""
    def bumped(sign):
        states = traj.states.copy()
        controls = traj.controls.copy()
        if j < 4:
            states[t, j] += sign * h
        elif t < traj.horizon:
            controls[t, j - 4] += sign * h
        return cost_mod.evaluate(
            Trajectory(states=states, controls=controls, dt=traj.dt), ctx, weights)
    return (bumped(+1) - bumped(-1)) / (2 * h)


def test_quadratize_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(5):
        T = int(rng.integers(3, 7))
        traj = random_trajectory(rng, T)
        ctx = random_context(rng, T)
        weights = random_weights(rng)
        quad = cost_mod.quadratize(traj, ctx, weights)
        assert quad.grads.shape == (T + 1, 6)
        assert quad.hessians.shape == (T + 1, 6, 6)
        for t in range(T + 1):
            for j in range(6):
                if t == T and j >= 4:
                    assert quad.grads[t, j] == 0.0
                    continue
                fd = _fd_stage_grad(traj, ctx, weights, t, j)
                assert quad.grads[t, j] == pytest.approx(fd, abs=5e-5)
        # stage 0 state is never penalized
        assert np.allclose(quad.grads[0, :4], 0.0)


def test_exact_hessians_match_finite_differences():
    # The cost is stage-separable, so the exact Hessian is block diagonal and
    # each block can be checked by differencing the exact gradient.
    rng = np.random.default_rng(4)
    h = 1e-5
    for _ in range(3):
        T = int(rng.integers(3, 6))
        traj = random_trajectory(rng, T)
        ctx = random_context(rng, T)
        weights = random_weights(rng)
        H = cost_mod.exact_hessians(traj, ctx, weights)
        assert H.shape == (T + 1, 6, 6)
        for t in range(T + 1):
            assert np.allclose(H[t], H[t].T, atol=1e-10)
            for j in range(6):
                if t == T and j >= 4:
                    continue

                def grad_at(sign):
                    states = traj.states.copy()
                    controls = traj.controls.copy()
                    if j < 4:
                        states[t, j] += sign * h
                    else:
                        controls[t, j - 4] += sign * h
                    b = Trajectory(states=states, controls=controls, dt=traj.dt)
                    return cost_mod.quadratize(b, ctx, weights).grads[t]

                fd = (grad_at(+1) - grad_at(-1)) / (2 * h)
                assert np.max(np.abs(fd - H[t, :, j])) < 5e-4


def test_gauss_newton_hessian_is_positive_semidefinite():
    rng = np.random.default_rng(5)
    for _ in range(10):
        T = int(rng.integers(3, 7))
        traj = random_trajectory(rng, T)
        ctx = random_context(rng, T)
        weights = random_weights(rng)
        quad = cost_mod.quadratize(traj, ctx, weights)
        for t in range(T + 1):
            eigs = np.linalg.eigvalsh(quad.hessians[t])
            assert eigs.min() > -1e-10


def test_grad_predictions_matches_finite_differences():
    # Modes are sampled within a few meters of the trajectory; on the RBF's
    # saturated tail the analytic gradient is a true but sub-roundoff value
    # that central differences of the total cost cannot resolve.
    rng = np.random.default_rng(6)
    h = 1e-6
    T = 5
    traj = random_trajectory(rng, T)
    futures = {}
    for i in range(2):
        positions = traj.states[1:, :2][None, :, :] + rng.uniform(
            -3, 3, size=(2, T, 2))
        probs = rng.uniform(0.1, 1.0, size=2)
        futures[f"agent-{i}"] = AgentFuture(
            positions=positions, mode_probs=probs / probs.sum(),
            differentiable=True)
    ctx = CostContext(agent_futures=futures,
                      goal=np.array([10.0, 0.0, 0.0, 5.0]), lane=straight_lane())
    weights = random_weights(rng)
    grads = cost_mod.grad_predictions(traj, ctx, weights)
    for agent_id, g in grads.items():
        fut = ctx.agent_futures[agent_id]
        for k in range(fut.num_modes):
            for t in range(T):
                for d in range(2):
                    pos_up = fut.positions.copy()
                    pos_up[k, t, d] += h
                    pos_dn = fut.positions.copy()
                    pos_dn[k, t, d] -= h
                    up = replace_future(ctx, agent_id, pos_up, fut.mode_probs)
                    dn = replace_future(ctx, agent_id, pos_dn, fut.mode_probs)
                    fd = (cost_mod.evaluate(traj, up, weights)
                          - cost_mod.evaluate(traj, dn, weights)) / (2 * h)
                    assert g.d_positions[k, t, d] == pytest.approx(fd, abs=1e-5)
            probs_up = fut.mode_probs.copy()
            probs_up[k] += h
            probs_dn = fut.mode_probs.copy()
            probs_dn[k] -= h
            up = replace_future(ctx, agent_id, fut.positions, probs_up)
            dn = replace_future(ctx, agent_id, fut.positions, probs_dn)
            fd = (cost_mod.evaluate(traj, up, weights)
                  - cost_mod.evaluate(traj, dn, weights)) / (2 * h)
            assert g.d_mode_probs[k] == pytest.approx(fd, abs=1e-5)


def replace_future(ctx, agent_id, positions, mode_probs):
    futures = dict(ctx.agent_futures)
    futures[agent_id] = AgentFuture(positions=positions, mode_probs=mode_probs,
                                    differentiable=True)
    return CostContext(agent_futures=futures, goal=ctx.goal, lane=ctx.lane,
                       rbf_sigma=ctx.rbf_sigma)


def test_grad_predictions_skips_non_differentiable_agents():
    rng = np.random.default_rng(7)
    T = 4
    traj = random_trajectory(rng, T)
    futures = {
        "frozen": gt_future(rng.uniform(0, 5, size=(T, 2))),
        "live": AgentFuture(positions=rng.uniform(0, 5, size=(2, T, 2)),
                            mode_probs=np.array([0.4, 0.6]), differentiable=True),
    }
    ctx = CostContext(agent_futures=futures, goal=np.array([5.0, 0, 0, 5]),
                      lane=straight_lane())
    grads = cost_mod.grad_predictions(traj, ctx, random_weights(rng))
    assert set(grads) == {"live"}


def test_grad_weights_matches_finite_differences():
    rng = np.random.default_rng(8)
    h = 1e-6
    T = 5
    traj = random_trajectory(rng, T)
    ctx = random_context(rng, T)
    psi = rng.normal(0, 1, NUM_TERMS)
    alpha = 1.3
    weights = weights_from_params(psi, alpha=alpha, c_norm=7.1)
    wg = cost_mod.grad_weights(traj, ctx, weights)

    assert np.allclose(wg.d_values, cost_mod.term_values(traj, ctx), rtol=1e-12)
    for i in range(NUM_TERMS):
        bump = np.zeros(NUM_TERMS)
        bump[i] = h
        up = cost_mod.evaluate(traj, ctx, weights_from_params(psi + bump, alpha, 7.1))
        dn = cost_mod.evaluate(traj, ctx, weights_from_params(psi - bump, alpha, 7.1))
        assert wg.d_psi[i] == pytest.approx((up - dn) / (2 * h), abs=1e-4)
    up = cost_mod.evaluate(traj, ctx, weights_from_params(psi, alpha + h, 7.1))
    dn = cost_mod.evaluate(traj, ctx, weights_from_params(psi, alpha - h, 7.1))
    assert wg.d_alpha == pytest.approx((up - dn) / (2 * h), abs=1e-4)


def test_gt_future_is_single_certain_mode():
    positions = np.arange(12, dtype=float).reshape(6, 2)
    fut = gt_future(positions)
    assert fut.num_modes == 1
    assert fut.mode_probs[0] == 1.0
    assert not fut.differentiable
    assert np.array_equal(fut.positions[0], positions)


def test_collision_term_peaks_on_contact_and_decays():
    # A single timestep exactly on the predicted mean contributes 1.0; far
    # away the RBF vanishes.
    lane = straight_lane()
    states = np.array([[0.0, 0.0, 0.0, 5.0], [2.5, 0.0, 0.0, 5.0]])
    controls = np.zeros((1, 2))
    traj = Trajectory(states=states, controls=controls, dt=0.5)
    on = CostContext(agent_futures={"a": gt_future(np.array([[2.5, 0.0]]))},
                     goal=np.array([2.5, 0, 0, 5]), lane=lane)
    off = CostContext(agent_futures={"a": gt_future(np.array([[2.5, 40.0]]))},
                      goal=np.array([2.5, 0, 0, 5]), lane=lane)
    assert cost_mod.term_values(traj, on)[COLLISION] == pytest.approx(1.0)
    assert cost_mod.term_values(traj, off)[COLLISION] < 1e-12

    mid = CostContext(agent_futures={"a": gt_future(np.array([[2.5, 1.5]]))},
                      goal=np.array([2.5, 0, 0, 5]), lane=lane)
    assert cost_mod.term_values(traj, mid)[COLLISION] == pytest.approx(
        np.exp(-0.5), rel=1e-12)


if __name__ == "__main__":
    import sys
    import pytest as _pytest
    sys.exit(_pytest.main([__file__, "-v"]))
