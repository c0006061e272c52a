"""Discrete-time dynamically-extended unicycle shared by every stage of the stack.

State layout is ``[x, y, heading, v]`` and control layout is
``[heading_rate, accel]``. The model is integrated with forward Euler where the
position update uses the pre-update heading and speed, which keeps the step
Jacobians closed-form:

    x'       = x + v * cos(heading) * dt
    y'       = y + v * sin(heading) * dt
    heading' = wrap(heading + heading_rate * dt)
    v'       = v + accel * dt

The same ``step`` is used by the scenario generator, the predictor's mode
rollouts, the planner's candidate construction and the controller, so
trajectories produced anywhere in the stack agree bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STATE_DIM = 4
CONTROL_DIM = 2

# State vector indices.
X, Y, HEADING, V = 0, 1, 2, 3
# Control vector indices.
HEADING_RATE, ACCEL = 0, 1


def wrap_angle(angle):
    """Canonicalize angles to (-pi, pi].

    Uses the atan2 identity, which is branch-free; the single boundary value
    -pi that atan2 can produce is folded onto +pi.
    """
    wrapped = np.arctan2(np.sin(angle), np.cos(angle))
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.ndim(angle) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class ControlLimits:
    """Box constraints on controls, enforced by exact clamping (never penalties)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        assert self.lower.shape == (CONTROL_DIM,)
        assert self.upper.shape == (CONTROL_DIM,)
        assert np.all(self.lower < self.upper)

    def clip(self, control):
        return np.clip(control, self.lower, self.upper)

    def contains(self, controls, tol: float = 0.0) -> bool:
        controls = np.asarray(controls, dtype=float)
        return bool(
            np.all(controls >= self.lower - tol) and np.all(controls <= self.upper + tol)
        )


# heading_rate in [-1, 1] rad/s, accel in [-4, 3] m/s^2.
DEFAULT_LIMITS = ControlLimits(np.array([-1.0, -4.0]), np.array([1.0, 3.0]))


@dataclass(frozen=True)
class Trajectory:
    """A discrete state/control trajectory.

    ``states`` has shape (T+1, 4) and ``controls`` shape (T, 2); state t+1 is
    reached from state t under control t. Consistency with ``step`` is
    guaranteed when built via ``rollout`` and is not re-validated here, because
    cost quadratization and finite-difference checks need to evaluate
    deliberately inconsistent perturbations.
    """

    states: np.ndarray
    controls: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=float))
        object.__setattr__(self, "controls", np.asarray(self.controls, dtype=float))
        assert self.states.ndim == 2 and self.states.shape[1] == STATE_DIM
        assert self.controls.ndim == 2 and self.controls.shape[1] == CONTROL_DIM
        assert self.states.shape[0] == self.controls.shape[0] + 1
        assert self.dt > 0.0

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]


def _require_finite(array, name: str):
    if not np.all(np.isfinite(array)):
        raise ValueError(f"non-finite {name}: {array!r}")


def step(state, control, dt: float):
    """Advance one state by one control over dt seconds.

    Parameters
    ----------
    state : array (4,) -- [x, y, heading, v]
    control : array (2,) -- [heading_rate, accel]
    dt : positive step length in seconds

    Returns
    -------
    array (4,) with heading wrapped to (-pi, pi].
    """
    state = np.asarray(state, dtype=float)
    control = np.asarray(control, dtype=float)
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    _require_finite(state, "state")
    _require_finite(control, "control")
    x, y, heading, v = state
    heading_rate, accel = control
    return np.array(
        [
            x + v * np.cos(heading) * dt,
            y + v * np.sin(heading) * dt,
            wrap_angle(heading + heading_rate * dt),
            v + accel * dt,
        ]
    )


def jacobians(state, control, dt: float):
    """Exact Jacobians (A, B) of ``step`` at (state, control).

    A = d(step)/d(state) is (4, 4), B = d(step)/d(control) is (4, 2). The
    heading wrap is a shift by a multiple of 2*pi and does not affect either.
    """
    state = np.asarray(state, dtype=float)
    heading, v = state[HEADING], state[V]
    cos_h, sin_h = np.cos(heading), np.sin(heading)
    A = np.eye(STATE_DIM)
    A[X, HEADING] = -v * sin_h * dt
    A[X, V] = cos_h * dt
    A[Y, HEADING] = v * cos_h * dt
    A[Y, V] = sin_h * dt
    B = np.zeros((STATE_DIM, CONTROL_DIM))
    B[HEADING, HEADING_RATE] = dt
    B[V, ACCEL] = dt
    return A, B


def step_hessians(state, control, dt: float) -> np.ndarray:
    """Second derivatives of ``step``, shape (4, 6, 6) over [state; control].

    Only the position components are curved, through the v*cos/sin(heading)
    coupling; heading and speed update linearly. Needed by sensitivity
    analysis, where the Lagrangian curvature includes costate-weighted
    dynamics curvature.
    """
    state = np.asarray(state, dtype=float)
    heading, v = state[HEADING], state[V]
    cos_h, sin_h = np.cos(heading), np.sin(heading)
    H = np.zeros((STATE_DIM, STATE_DIM + CONTROL_DIM, STATE_DIM + CONTROL_DIM))
    H[X, HEADING, HEADING] = -v * cos_h * dt
    H[X, HEADING, V] = H[X, V, HEADING] = -sin_h * dt
    H[Y, HEADING, HEADING] = -v * sin_h * dt
    H[Y, HEADING, V] = H[Y, V, HEADING] = cos_h * dt
    return H


def rollout(initial_state, controls, dt: float) -> Trajectory:
    """Integrate a control sequence from an initial state.

    The returned trajectory satisfies states[t+1] == step(states[t],
    controls[t], dt) bit-exactly by construction.
    """
    initial_state = np.asarray(initial_state, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or controls.shape[1] != CONTROL_DIM:
        raise ValueError(f"controls must be (T, 2), got shape {controls.shape}")
    states = np.empty((controls.shape[0] + 1, STATE_DIM))
    states[0] = initial_state
    for t in range(controls.shape[0]):
        states[t + 1] = step(states[t], controls[t], dt)
    return Trajectory(states=states, controls=controls.copy(), dt=dt)


def linearize(trajectory: Trajectory, dynamics=None):
    """Stacked Jacobians along a trajectory: A (T, 4, 4) and B (T, 4, 2)."""
    jac = jacobians if dynamics is None else dynamics.jacobians
    T = trajectory.horizon
    A = np.empty((T, STATE_DIM, STATE_DIM))
    B = np.empty((T, STATE_DIM, CONTROL_DIM))
    for t in range(T):
        A[t], B[t] = jac(trajectory.states[t], trajectory.controls[t], trajectory.dt)
    return A, B


def consistency_error(trajectory: Trajectory) -> float:
    """Max state mismatch between stored states and a re-rollout of the controls."""
    err = 0.0
    for t in range(trajectory.horizon):
        predicted = step(trajectory.states[t], trajectory.controls[t], trajectory.dt)
        diff = predicted - trajectory.states[t + 1]
        diff[HEADING] = wrap_angle(diff[HEADING])
        err = max(err, float(np.max(np.abs(diff))))
    return err
