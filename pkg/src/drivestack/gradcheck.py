"""Central-difference gradient verification for every differentiable path.

``check`` compares an analytic gradient of a scalar function against central
finite differences coordinate by coordinate. The aggregate relative error is
||g_analytic - g_fd|| / max(||g_fd||, 1e-8) over the checked coordinates, so a
single bad coordinate cannot hide inside many good ones, and near-zero
gradients do not blow the ratio up. Expensive functions can subsample
coordinates.

The module also provides linear-dynamics / quadratic-cost test doubles used to
exercise the controller on problems with a known closed-form optimum, and
seeded scenario-level check builders behind the ``grad-check`` CLI target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import CONTROL_DIM, STATE_DIM, Trajectory

DEFAULT_STEP = 1e-5
NORM_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    rel_error: float
    max_coord_error: float
    per_coord_error: dict
    num_checked: int
    tolerance: float
    passed: bool
    non_finite: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rel_error": self.rel_error,
            "max_coord_error": self.max_coord_error,
            "num_checked": self.num_checked,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "non_finite": list(self.non_finite),
            "per_coord_error": {str(k): v for k, v in sorted(self.per_coord_error.items())},
        }


def check(fn, grad, x0, step: float = DEFAULT_STEP, tolerance: float = 1e-5,
          max_coords: int = None, rng: np.random.Generator = None,
          coords=None) -> GradCheckReport:
    """Compare an analytic gradient against central differences of ``fn``.

    ``grad`` is either the gradient vector at x0 or a callable returning it.
    When ``max_coords`` is set, a random subset of coordinates is probed
    (seeded via ``rng``), which keeps expensive end-to-end checks tractable.
    Passing ``coords`` probes exactly those coordinate indices instead.
    """
    x0 = np.asarray(x0, dtype=float)
    analytic = np.asarray(grad(x0) if callable(grad) else grad, dtype=float).ravel()
    if analytic.shape != x0.ravel().shape:
        raise ValueError(
            f"gradient shape {analytic.shape} != parameter shape {x0.ravel().shape}"
        )
    n = x0.size
    if coords is not None:
        coords = np.asarray(coords, dtype=int)
    else:
        coords = np.arange(n)
        if max_coords is not None and max_coords < n:
            rng = np.random.default_rng(0) if rng is None else rng
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))

    flat = x0.ravel().copy()
    fd = np.empty(coords.size)
    non_finite = []
    for j, idx in enumerate(coords):
        bump = np.zeros(n)
        bump[idx] = step
        f_plus = fn((flat + bump).reshape(x0.shape))
        f_minus = fn((flat - bump).reshape(x0.shape))
        fd[j] = (f_plus - f_minus) / (2.0 * step)
        if not np.isfinite(fd[j]):
            non_finite.append(int(idx))

    picked = analytic[coords]
    diff = picked - fd
    rel_error = float(np.linalg.norm(diff) / max(np.linalg.norm(fd), NORM_FLOOR))
    per_coord = {
        int(idx): float(abs(d) / max(abs(f), NORM_FLOOR))
        for idx, d, f in zip(coords, diff, fd)
    }
    max_coord = max(per_coord.values()) if per_coord else 0.0
    passed = bool(rel_error <= tolerance and not non_finite)
    return GradCheckReport(rel_error=rel_error, max_coord_error=max_coord,
                           per_coord_error=per_coord, num_checked=int(coords.size),
                           tolerance=tolerance, passed=passed, non_finite=non_finite)


class LinearDynamics:
    """Affine test dynamics: step = A s + B u + c (constant Jacobians)."""

    def __init__(self, A, B, c=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.c = np.zeros(self.A.shape[0]) if c is None else np.asarray(c, dtype=float)

    def step(self, state, control, dt):
        return self.A @ np.asarray(state, float) + self.B @ np.asarray(control, float) \
            + self.c

    def jacobians(self, state, control, dt):
        return self.A, self.B


class QuadraticCost:
    """Exact quadratic cost: sum_t 0.5 x'Qx + q'x + 0.5 u'Ru + r'u, terminal Qf, qf."""

    def __init__(self, Q, R, q, r, Qf, qf):
        self.Q, self.R = np.asarray(Q, float), np.asarray(R, float)
        self.q, self.r = np.asarray(q, float), np.asarray(r, float)
        self.Qf, self.qf = np.asarray(Qf, float), np.asarray(qf, float)

    def evaluate(self, traj: Trajectory) -> float:
        total = 0.0
        for t in range(traj.horizon):
            x, u = traj.states[t], traj.controls[t]
            total += 0.5 * x @ self.Q @ x + self.q @ x
            total += 0.5 * u @ self.R @ u + self.r @ u
        xT = traj.states[-1]
        return float(total + 0.5 * xT @ self.Qf @ xT + self.qf @ xT)

    def quadratize(self, traj: Trajectory):
        from .cost import Quadratization
        T = traj.horizon
        grads = np.zeros((T + 1, STATE_DIM + CONTROL_DIM))
        hessians = np.zeros((T + 1, STATE_DIM + CONTROL_DIM, STATE_DIM + CONTROL_DIM))
        for t in range(T):
            grads[t, :STATE_DIM] = self.Q @ traj.states[t] + self.q
            grads[t, STATE_DIM:] = self.R @ traj.controls[t] + self.r
            hessians[t, :STATE_DIM, :STATE_DIM] = self.Q
            hessians[t, STATE_DIM:, STATE_DIM:] = self.R
        grads[T, :STATE_DIM] = self.Qf @ traj.states[-1] + self.qf
        hessians[T, :STATE_DIM, :STATE_DIM] = self.Qf
        return Quadratization(grads=grads, hessians=hessians)


def random_spd(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    m = rng.normal(size=(n, n))
    return scale * (m @ m.T / n + np.eye(n))


def random_lq_instance(rng: np.random.Generator, horizon: int = 6):
    """A random affine-dynamics, strictly convex quadratic-cost instance."""
    A = np.eye(STATE_DIM) + 0.1 * rng.normal(size=(STATE_DIM, STATE_DIM))
    B = rng.normal(size=(STATE_DIM, CONTROL_DIM))
    c = 0.1 * rng.normal(size=STATE_DIM)
    dynamics = LinearDynamics(A, B, c)
    cost = QuadraticCost(
        Q=random_spd(rng, STATE_DIM), R=random_spd(rng, CONTROL_DIM),
        q=rng.normal(size=STATE_DIM), r=rng.normal(size=CONTROL_DIM),
        Qf=random_spd(rng, STATE_DIM), qf=rng.normal(size=STATE_DIM),
    )
    x0 = rng.normal(size=STATE_DIM)
    controls = 0.1 * rng.normal(size=(horizon, CONTROL_DIM))
    states = np.empty((horizon + 1, STATE_DIM))
    states[0] = x0
    for t in range(horizon):
        states[t + 1] = dynamics.step(states[t], controls[t], 1.0)
    init = Trajectory(states=states, controls=controls, dt=1.0)
    return dynamics, cost, init


def random_lane(rng: np.random.Generator, length: float = 120.0):
    """Smooth random polyline lane: heading drifts slowly between waypoints."""
    from .lanes import Lane
    n = 14
    headings = np.cumsum(np.concatenate([[rng.uniform(-np.pi, np.pi)],
                                         rng.normal(0.0, 0.08, size=n - 2)]))
    steps = (length / (n - 1)) * np.column_stack([np.cos(headings), np.sin(headings)])
    points = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)]) \
        + rng.uniform(-15.0, 15.0, size=2)
    return Lane(lane_id="rand0", points=points)


def random_scene(rng: np.random.Generator, horizon: int = 6, num_agents: int = 2,
                 num_modes: int = 3, dt: float = 0.5):
    """Random driving scene with every cost term active.

    Returns (trajectory, context). The ego trajectory rolls clipped random
    controls from a pose near the lane; agent futures hover around the ego
    path so the collision term and its gradients are nonzero.
    """
    from . import dynamics as dyn_mod
    from .cost import AgentFuture, CostContext
    from .lanes import point_at

    lane = random_lane(rng)
    position, heading = point_at(lane, rng.uniform(10.0, 40.0),
                                 rng.uniform(-1.5, 1.5))
    state = np.array([position[0], position[1],
                      heading + rng.normal(0.0, 0.2), rng.uniform(3.0, 7.0)])
    controls = np.column_stack([rng.uniform(-0.6, 0.6, size=horizon),
                                rng.uniform(-1.5, 1.0, size=horizon)])
    states = [state]
    for u in controls:
        states.append(dyn_mod.step(states[-1], u, dt))
    traj = Trajectory(states=np.array(states), controls=controls, dt=dt)

    futures = {}
    for a in range(num_agents):
        offsets = rng.normal(0.0, 2.0, size=(num_modes, horizon, 2))
        drift = rng.normal(0.0, 1.0, size=(num_modes, 1, 2))
        probs = rng.dirichlet(np.ones(num_modes))
        futures[f"a{a}"] = AgentFuture(
            positions=traj.positions[1:][None, :, :] + offsets + drift,
            mode_probs=probs, differentiable=(a == 0))
    goal = traj.states[-1].copy()
    goal[:2] += rng.normal(0.0, 1.0, size=2)
    ctx = CostContext(agent_futures=futures, goal=goal, lane=lane)
    return traj, ctx


def random_histories(rng: np.random.Generator, history_steps: int = 8,
                     dt: float = 0.5):
    """Two smooth random tracks shaped like scenario histories."""
    from . import dynamics as dyn_mod
    out = {}
    for agent_id in ("ego", "a0"):
        state = np.array([rng.uniform(-30.0, 30.0), rng.uniform(-30.0, 30.0),
                          rng.uniform(-np.pi, np.pi), rng.uniform(2.0, 8.0)])
        states = [state]
        for _ in range(history_steps):
            u = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-1.0, 1.0)])
            states.append(dyn_mod.step(states[-1], u, dt))
        out[agent_id] = np.array(states)
    return out


def dense_lqr_solve(dynamics: LinearDynamics, cost: QuadraticCost,
                    init: Trajectory) -> Trajectory:
    """Direct LQR optimum via one dense linear solve over stacked controls.

    Builds x = Phi u + xi from the rollout maps and minimizes the quadratic
    objective exactly; independent of any Riccati recursion, so it serves as
    an oracle for the iterative solver.
    """
    T = init.horizon
    n, m = STATE_DIM, CONTROL_DIM
    A, B, c = dynamics.A, dynamics.B, dynamics.c
    # x_t = powers[t] x_0 + sum_s reach[t, s] (B u_s + c)
    powers = [np.eye(n)]
    for _ in range(T):
        powers.append(A @ powers[-1])
    Phi = np.zeros(((T + 1) * n, T * m))
    xi = np.zeros((T + 1) * n)
    xi[:n] = init.states[0]
    for t in range(1, T + 1):
        xi[t * n:(t + 1) * n] = powers[t] @ init.states[0]
        for s in range(t):
            xi[t * n:(t + 1) * n] += powers[t - 1 - s] @ c
            Phi[t * n:(t + 1) * n, s * m:(s + 1) * m] = powers[t - 1 - s] @ B
    bigQ = np.zeros(((T + 1) * n, (T + 1) * n))
    bigq = np.zeros((T + 1) * n)
    for t in range(T):
        bigQ[t * n:(t + 1) * n, t * n:(t + 1) * n] = cost.Q
        bigq[t * n:(t + 1) * n] = cost.q
    bigQ[T * n:, T * n:] = cost.Qf
    bigq[T * n:] = cost.qf
    bigR = np.kron(np.eye(T), cost.R)
    bigr = np.tile(cost.r, T)

    H = Phi.T @ bigQ @ Phi + bigR
    g = Phi.T @ (bigQ @ xi + bigq) + bigr
    u = np.linalg.solve(H, -g)
    controls = u.reshape(T, m)
    states = np.empty((T + 1, n))
    states[0] = init.states[0]
    for t in range(T):
        states[t + 1] = dynamics.step(states[t], controls[t], init.dt)
    return Trajectory(states=states, controls=controls, dt=init.dt)


# ---------------------------------------------------------------------------
# Seeded suite runners behind the grad-check CLI target


TARGETS = ("dynamics", "cost", "planner", "predictor", "controller",
           "end-to-end")
_DEFAULT_INSTANCES = 100


def _summary(target, seed, errors, tolerance, skipped=0):
    errors = np.asarray(errors, dtype=float)
    return {
        "target": target,
        "seed": seed,
        "instances": int(errors.size),
        "max_rel_error": float(np.max(errors)) if errors.size else 0.0,
        "mean_rel_error": float(np.mean(errors)) if errors.size else 0.0,
        "tolerance": tolerance,
        "skipped": int(skipped),
        "passed": bool(errors.size and np.max(errors) <= tolerance),
    }


def _check_dynamics(seed, instances):
    from . import dynamics as dyn_mod
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(instances):
        dt = float(rng.choice([0.5, 0.1]))
        z0 = np.concatenate([
            rng.uniform(-20.0, 20.0, size=2),
            [rng.uniform(-np.pi, np.pi), rng.uniform(0.0, 10.0)],
            rng.uniform(-1.0, 1.0, size=1), rng.uniform(-4.0, 3.0, size=1),
        ])
        A, B = dyn_mod.jacobians(z0[:STATE_DIM], z0[STATE_DIM:], dt)
        J = np.hstack([A, B])
        for i in range(STATE_DIM):
            rep = check(lambda z, i=i, dt=dt:
                        float(dyn_mod.step(z[:STATE_DIM], z[STATE_DIM:], dt)[i]),
                        J[i], z0)
            errors.append(rep.rel_error)
    return _summary("dynamics", seed, errors, 1e-5)


def _projection_clear(traj: Trajectory, lane, margin: float = 1e-3) -> bool:
    """True when no trajectory position projects near a lane segment joint.

    The polyline projection is only piecewise differentiable; a finite
    difference straddling a joint measures the kink rather than the gradient,
    so check scenes are resampled until every probe point is in the interior
    of its segment.
    """
    from .lanes import project_batch
    s = project_batch(lane, traj.positions[1:]).arclength
    gaps = np.abs(s[:, None] - lane.arclengths[None, :])
    return bool(np.all(np.min(gaps, axis=1) > margin)
                and np.all(s > margin) and np.all(s < lane.length - margin))


def _check_cost(seed, instances):
    from . import cost as cost_mod
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(instances):
        traj, ctx = random_scene(rng)
        while not _projection_clear(traj, ctx.lane):
            traj, ctx = random_scene(rng)
        weights = cost_mod.hand_tuned_weights().with_params(
            psi=rng.normal(0.0, 1.0, size=cost_mod.NUM_TERMS),
            alpha=rng.uniform(0.5, 2.0))
        T = traj.horizon
        ns = (T + 1) * STATE_DIM

        def traj_of(z):
            return Trajectory(states=z[:ns].reshape(T + 1, STATE_DIM),
                              controls=z[ns:].reshape(T, CONTROL_DIM),
                              dt=traj.dt)

        z0 = np.concatenate([traj.states.ravel(), traj.controls.ravel()])
        quad = cost_mod.quadratize(traj, ctx, weights)
        gz = np.concatenate([quad.grads[:, :STATE_DIM].ravel(),
                             quad.grads[:T, STATE_DIM:].ravel()])
        rep = check(lambda z: cost_mod.evaluate(traj_of(z), ctx, weights), gz, z0,
                    max_coords=24, rng=rng)
        errors.append(rep.rel_error)

        wg = cost_mod.grad_weights(traj, ctx, weights)
        rep = check(lambda p: cost_mod.evaluate(
            traj, ctx, weights.with_params(psi=p)), wg.d_psi, weights.psi)
        errors.append(rep.rel_error)
        rep = check(lambda a: cost_mod.evaluate(
            traj, ctx, weights.with_params(alpha=float(a[0]))),
            np.array([wg.d_alpha]), np.array([weights.alpha]))
        errors.append(rep.rel_error)

        pg = cost_mod.grad_predictions(traj, ctx, weights)["a0"]
        fut = ctx.agent_futures["a0"]

        def with_positions(p):
            moved = cost_mod.AgentFuture(
                positions=p.reshape(fut.positions.shape),
                mode_probs=fut.mode_probs, differentiable=True)
            futures = dict(ctx.agent_futures)
            futures["a0"] = moved
            from dataclasses import replace
            return cost_mod.evaluate(traj, replace(ctx, agent_futures=futures),
                                     weights)

        rep = check(with_positions, pg.d_positions.ravel(),
                    fut.positions.ravel(), max_coords=24, rng=rng)
        errors.append(rep.rel_error)

        # mode probabilities live on the simplex; probe along (e_k - e_j)
        if fut.num_modes >= 2:
            h = 1e-6
            k, j = 0, fut.num_modes - 1
            direction = np.zeros(fut.num_modes)
            direction[k], direction[j] = 1.0, -1.0

            def with_probs(step_size):
                moved = cost_mod.AgentFuture(
                    positions=fut.positions,
                    mode_probs=fut.mode_probs + step_size * direction,
                    differentiable=True)
                futures = dict(ctx.agent_futures)
                futures["a0"] = moved
                from dataclasses import replace
                return cost_mod.evaluate(traj, replace(ctx, agent_futures=futures),
                                         weights)

            fd = (with_probs(h) - with_probs(-h)) / (2.0 * h)
            an = float(pg.d_mode_probs[k] - pg.d_mode_probs[j])
            errors.append(abs(an - fd) / max(abs(fd), NORM_FLOOR))
    return _summary("cost", seed, errors, 1e-5)


def _check_planner(seed, instances):
    from . import planner as planner_mod
    rng = np.random.default_rng(seed)
    errors = []
    betas = (0.1, 1.0, 10.0)
    for i in range(instances):
        n = int(rng.integers(3, 20))
        costs = rng.normal(0.0, 3.0, size=n)
        beta = betas[i % len(betas)]
        target = int(rng.integers(0, n))

        def ce_of(c):
            cands = planner_mod.CandidateSet(
                candidates=[None] * n, costs=c,
                probs=planner_mod.softmax_probs(c, beta),
                selected=int(np.argmin(c)), beta=beta)
            return planner_mod.planning_loss(cands, target)[0]

        cands = planner_mod.CandidateSet(
            candidates=[None] * n, costs=costs,
            probs=planner_mod.softmax_probs(costs, beta),
            selected=int(np.argmin(costs)), beta=beta)
        _, d_costs = planner_mod.planning_loss(cands, target)
        rep = check(ce_of, d_costs, costs)
        errors.append(rep.rel_error)
    return _summary("planner", seed, errors, 1e-5)


def _check_predictor(seed, instances):
    from . import predictor as predictor_mod
    rng = np.random.default_rng(seed)
    cfg = predictor_mod.PredictorConfig()
    keys = None
    errors = []
    for _ in range(instances):
        params = predictor_mod.PredictorParams.init(cfg, rng)
        keys = sorted(params.arrays)
        histories = random_histories(rng, cfg.history_steps, cfg.dt)
        gt = histories["a0"][-1, :2] + np.cumsum(
            rng.normal(0.0, 1.0, size=(cfg.horizon_steps, 2)), axis=0)
        sizes = [params.arrays[k].size for k in keys]
        splits = np.cumsum(sizes)[:-1]

        def unflatten(z):
            out = params.copy()
            for k, chunk in zip(keys, np.split(z, splits)):
                out.arrays[k] = chunk.reshape(params.arrays[k].shape)
            return out

        def loss_of(z):
            p = unflatten(z)
            return predictor_mod.nll(
                predictor_mod.predict(histories, "a0", "ego", p), gt)

        pred = predictor_mod.predict(histories, "a0", "ego", params)
        _, d_pos, d_probs, d_var = predictor_mod.nll_grads(pred, gt)
        grads = predictor_mod.zero_grads(params)
        predictor_mod.accumulate_grads(
            pred, predictor_mod.PredictionUpstream(
                d_positions=d_pos, d_mode_probs=d_probs, d_pos_var=d_var),
            params, grads)
        flat_grad = np.concatenate([grads[k].ravel() for k in keys])
        z0 = np.concatenate([params.arrays[k].ravel() for k in keys])
        rep = check(loss_of, flat_grad, z0, max_coords=40, rng=rng)
        errors.append(rep.rel_error)
    return _summary("predictor", seed, errors, 1e-5)


def _check_controller(seed, instances):
    """Backward pass on linear-quadratic instances against FD through re-solves.

    Parameters are the stage-linear cost coefficients (q, r); for those the
    adjoint solution itself is the gradient, so this isolates the implicit
    differentiation from any cost-specific chain rule.
    """
    from . import controller
    rng = np.random.default_rng(seed)
    cfg = controller.ILQRConfig(max_iters=12, conv_threshold=1e-11,
                                limits=_wide_limits())
    errors = []
    for _ in range(instances):
        dynamics, cost, init = random_lq_instance(rng, horizon=5)
        S = random_spd(rng, STATE_DIM, 0.5)
        sol = controller.solve(init, cost, cfg, dynamics=dynamics)
        T = init.horizon
        dLx = np.einsum("ij,tj->ti", S, sol.trajectory.states)
        dLu = np.zeros((T, CONTROL_DIM))
        dx, du = controller.adjoint_solve(sol, dLx, dLu)

        def loss_of(z):
            nq = T * STATE_DIM
            c2 = QuadraticCost(cost.Q, cost.R, cost.q, cost.r, cost.Qf, cost.qf)
            dq = z[:nq].reshape(T, STATE_DIM)
            dr = z[nq:].reshape(T, CONTROL_DIM)
            sol2 = controller.solve(init, _LQShifted(c2, dq, dr), cfg,
                                    dynamics=dynamics)
            x = sol2.trajectory.states
            return 0.5 * float(np.einsum("ti,ij,tj->", x, S, x))

        z0 = np.zeros(T * (STATE_DIM + CONTROL_DIM))
        # dL/dq_t = adjoint state (stages 1..T map to q_1..q_T; q_0 moves
        # nothing because x_0 is pinned) and dL/dr_t = adjoint control.
        grad = np.concatenate([dx[1:].ravel(), du.ravel()])
        rep = check(loss_of, grad, z0, step=1e-4, max_coords=12, rng=rng)
        errors.append(rep.rel_error)
    return _summary("controller", seed, errors, 1e-4)


def _wide_limits():
    from .dynamics import ControlLimits
    return ControlLimits(lower=np.array([-1e6, -1e6]),
                         upper=np.array([1e6, 1e6]))


class _LQShifted:
    """Quadratic cost with per-stage shifts of the linear terms q_t, r_t.

    The shift indexing puts dq[t-1] on state stage t (stage 0 is pinned), and
    dr[t] on control stage t, matching the adjoint layout.
    """

    def __init__(self, cost, dq, dr):
        self.cost, self.dq, self.dr = cost, dq, dr

    def evaluate(self, traj):
        base = self.cost.evaluate(traj)
        extra = float(np.einsum("ti,ti->", self.dq, traj.states[1:]))
        extra += float(np.einsum("ti,ti->", self.dr, traj.controls))
        return base + extra

    def quadratize(self, traj):
        quad = self.cost.quadratize(traj)
        quad.grads[1:, :STATE_DIM] += self.dq
        quad.grads[:-1, STATE_DIM:] += self.dr
        return quad


# Re-solving an iLQR problem at a bumped input does not land exactly on the
# perturbed optimum: the stopping rule fires on cost improvement, which in
# double precision leaves a terminal residual of roughly sqrt(eps) in the
# iterate, and the evaluation loss inherits a jump of ~2e-8 whenever the bump
# changes the iteration at which the rule fires. A central difference at step
# h therefore carries an irreducible noise floor of about 2e-8 / (2h) ~ 1e-5
# per coordinate at h = 1e-3. End-to-end checks are only informative on
# coordinates whose true derivative clears that floor, so scenes where the
# predicted agent never enters the ego plan's collision range (gradient at the
# noise floor or below) are resampled, and the probed parameter subset is the
# largest-magnitude analytic coordinates rather than a uniform draw, which in
# a ~1e4-dimensional parameter vector would mostly land on coordinates far
# below the floor even in strongly coupled scenes. A wrong analytic gradient
# still fails: a spurious large coordinate meets a near-zero difference
# quotient, and an all-zero gradient never clears the coupling floor, leaving
# the suite short of instances.
E2E_COUPLING_FLOOR = 0.1
E2E_PARAM_COORDS = 6


def _check_end_to_end(seed, instances):
    """dL_ctr/dtheta through a converged iLQR solve on generated scenarios.

    theta covers the predictor parameters (largest analytic coordinates, see
    the noise-floor note above) and the weight logits. The candidate selected
    at the base point is held fixed while probing: the hard argmin is
    piecewise constant, so the loss is only differentiable on a fixed branch
    (the planner suite covers its softmax relaxation). The step is coarse
    (1e-3) because of the re-solve noise floor. alpha is omitted: uniformly
    rescaling the objective leaves the argmin unchanged, so its true
    through-solver gradient is identically zero and a finite difference of it
    only measures solver noise.
    """
    from dataclasses import replace
    from . import controller, cost as cost_mod, planner as planner_mod
    from . import predictor as predictor_mod, scenario as scenario_mod, training
    rng = np.random.default_rng(seed)
    scn_cfg = scenario_mod.ScenarioConfig(family="mixed", count=instances * 6,
                                          seed=seed)
    scenarios, _ = scenario_mod.reject_unsuitable(scenario_mod.generate(scn_cfg))
    # Deep shrink schedule: near-contact scenes have collision curvature far
    # above the Gauss-Newton model, and the descent step that still improves
    # can be smaller than the default 5^-4 of full scale. Stalling there would
    # leave a non-stationary point for the implicit backward pass.
    ilqr = controller.ILQRConfig(max_iters=60, conv_threshold=1e-10,
                                 line_search_max_tries=12)
    fixed = cost_mod.hand_tuned_weights()
    errors = []
    skipped = 0
    resampled = 0
    accepted = 0
    for scn in scenarios:
        if accepted >= instances:
            break
        params = predictor_mod.PredictorParams.init(
            training.predictor_config_for(scn), rng)
        weights = fixed.with_params(
            psi=fixed.psi + rng.normal(0.0, 0.2, size=cost_mod.NUM_TERMS))
        cands = planner_mod.generate_candidates(
            scn.current_state(scn.ego_id), scn.goal, scn.graph,
            scenario_mod.planner_config_for(scn), ilqr.limits)
        pid, ego = scn.predicted_agent_id, scn.ego_id
        gt_ctx = cost_mod.CostContext(
            agent_futures={pid: cost_mod.gt_future(scn.future_positions(pid))},
            goal=scn.goal, lane=scn.graph.lanes[0])

        def plan_ctx(p):
            pred = predictor_mod.predict(scn.histories(), pid, ego, p)
            return cost_mod.CostContext(
                agent_futures={pid: cost_mod.AgentFuture(
                    positions=pred.positions, mode_probs=pred.mode_probs,
                    differentiable=True)},
                goal=scn.goal, lane=scn.graph.lanes[0])

        base_ctx = plan_ctx(params)
        sel = planner_mod.cost_and_select(cands, base_ctx, weights, 1.0)
        chosen = sel.candidates[sel.selected]
        loss_ctx = replace(gt_ctx, lane=chosen.lane)

        def branch_loss(p, w):
            ctx = replace(plan_ctx(p), lane=chosen.lane)
            sol = controller.solve(chosen.trajectory,
                                   cost_mod.DrivingCost(ctx, w), ilqr)
            return cost_mod.evaluate(sol.trajectory, loss_ctx, fixed)

        ctx_sel = replace(base_ctx, lane=chosen.lane)
        sol = controller.solve(chosen.trajectory,
                               cost_mod.DrivingCost(ctx_sel, weights), ilqr)
        T = sol.trajectory.horizon
        quad = cost_mod.quadratize(sol.trajectory, loss_ctx, fixed)
        bg = controller.backward(sol, quad.grads[:, :STATE_DIM].copy(),
                                 quad.grads[:T, STATE_DIM:].copy(),
                                 ctx_sel, weights)
        if bg.skipped:
            skipped += 1
            continue

        pred0 = predictor_mod.predict(scn.histories(), pid, ego, params)
        grads = predictor_mod.zero_grads(params)
        predictor_mod.accumulate_grads(
            pred0, predictor_mod.PredictionUpstream(
                d_positions=bg.d_predictions[pid].d_positions,
                d_mode_probs=bg.d_predictions[pid].d_mode_probs),
            params, grads)
        keys = sorted(params.arrays)
        sizes = [params.arrays[k].size for k in keys]
        splits = np.cumsum(sizes)[:-1]

        def param_loss(z):
            p = params.copy()
            for k, chunk in zip(keys, np.split(z, splits)):
                p.arrays[k] = chunk.reshape(params.arrays[k].shape)
            return branch_loss(p, weights)

        flat_grad = np.concatenate([grads[k].ravel() for k in keys])
        if np.max(np.abs(flat_grad)) < E2E_COUPLING_FLOOR:
            resampled += 1
            continue
        accepted += 1
        z0 = np.concatenate([params.arrays[k].ravel() for k in keys])
        top = np.argsort(-np.abs(flat_grad))[:E2E_PARAM_COORDS]
        rep = check(param_loss, flat_grad, z0, step=1e-3, tolerance=1e-3,
                    coords=np.sort(top))
        errors.append(rep.rel_error)

        rep = check(lambda p: branch_loss(params, weights.with_params(psi=p)),
                    bg.d_psi, weights.psi, step=1e-3, tolerance=1e-3)
        errors.append(rep.rel_error)
    summary = dict(_summary("end-to-end", seed, errors, 1e-3),
                   skipped=skipped, resampled=resampled)
    summary["instances"] = accepted
    if accepted < instances:
        summary["passed"] = False
    return summary


def run_target(target: str, seed: int = 0, instances: int = None) -> dict:
    if target not in TARGETS:
        raise ValueError(f"unknown grad-check target {target!r}; "
                         f"choose from {TARGETS}")
    instances = _DEFAULT_INSTANCES if instances is None else instances
    runner = {
        "dynamics": _check_dynamics,
        "cost": _check_cost,
        "planner": _check_planner,
        "predictor": _check_predictor,
        "controller": _check_controller,
        "end-to-end": _check_end_to_end,
    }[target]
    return runner(seed, instances)
