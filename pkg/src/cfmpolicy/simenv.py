"""Planar two-link arm on a desk: reach and two-goal reach tasks, synthetic
point clouds, a damped-least-squares expert and an episode runner."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .numcore import Rng

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
VARIANTS = ("reach", "reach-two-goal")


@dataclass(frozen=True)
class TaskSpec:
    variant: str = "reach"
    max_steps: int = 100
    tolerance: float = 0.05
    link1: float = 0.5
    link2: float = 0.5
    dt: float = 0.05
    action_clip: float = 1.0
    r_min: float = 0.3
    r_max: float = 0.9
    # mirrored goals are kept at least this far apart
    min_goal_separation: float = 0.4
    expert_gain: float = 10.0
    damping: float = 0.1
    n_link_points: int = 48
    n_target_points: int = 32
    disc_radius: float = 0.03

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown task variant {self.variant!r}")
        if self.tolerance <= 0 or self.max_steps < 1:
            raise ValueError("tolerance must be > 0 and max_steps >= 1")
        if not 0 < self.r_min < self.r_max <= self.link1 + self.link2:
            raise ValueError("target annulus must lie inside the reachable disc")

    @property
    def n_goals(self) -> int:
        return 2 if self.variant == "reach-two-goal" else 1

    @property
    def points_per_target(self) -> int:
        # the cloud size stays fixed whatever the number of goals
        return self.n_target_points // self.n_goals

    @property
    def cloud_size(self) -> int:
        return 2 * self.n_link_points + self.n_goals * self.points_per_target

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ArmState:
    q: np.ndarray
    targets: np.ndarray  # (n_goals, 2)
    goal: int = 0  # goal the expert heads for
    step_index: int = 0


@dataclass
class Observation:
    state: np.ndarray  # robot state vector
    cloud: np.ndarray  # (N, 3)
    arm: ArmState  # privileged; only the expert reads it


@dataclass
class EpisodeRecord:
    states: np.ndarray  # (L, STATE_DIM)
    clouds: np.ndarray  # (L, N, 3)
    actions: np.ndarray  # (L, 2)
    success: bool
    steps: int
    targets: np.ndarray
    goal: int
    final_ee: np.ndarray
    error: str | None = None

    def __len__(self):
        return self.actions.shape[0]


STATE_DIM = 6


def wrap_angle(q):
    """Wrap to (-pi, pi]; angles already in range pass through untouched."""
    q = np.asarray(q, dtype=np.float64)
    r = np.mod(q + np.pi, 2 * np.pi) - np.pi
    r = np.where(r <= -np.pi, r + 2 * np.pi, r)
    return np.where((q > -np.pi) & (q <= np.pi), q, r)


def forward_kinematics(q, link1: float = 0.5, link2: float = 0.5) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    a, ab = q[..., 0], q[..., 0] + q[..., 1]
    return np.stack([link1 * np.cos(a) + link2 * np.cos(ab),
                     link1 * np.sin(a) + link2 * np.sin(ab)], axis=-1)


def jacobian(q, link1: float = 0.5, link2: float = 0.5) -> np.ndarray:
    s1, c1 = np.sin(q[0]), np.cos(q[0])
    s12, c12 = np.sin(q[0] + q[1]), np.cos(q[0] + q[1])
    return np.array([[-link1 * s1 - link2 * s12, -link2 * s12],
                     [link1 * c1 + link2 * c12, link2 * c12]])


def state_vector(task: TaskSpec, q) -> np.ndarray:
    """cos/sin of both joints followed by the end-effector position."""
    ee = forward_kinematics(q, task.link1, task.link2)
    return np.array([np.cos(q[0]), np.sin(q[0]), np.cos(q[1]), np.sin(q[1]), ee[0], ee[1]])


def _sample_target(task: TaskSpec, rng: Rng) -> np.ndarray:
    while True:
        p = rng.uniform(-task.r_max, task.r_max, 2)
        r = np.hypot(p[0], p[1])
        if not task.r_min <= r <= task.r_max:
            continue
        if task.n_goals == 2 and 2 * abs(p[1]) < task.min_goal_separation:
            continue
        return p


def env_reset(task: TaskSpec, rng: Rng) -> ArmState:
    q = wrap_angle(rng.uniform(-np.pi, np.pi, 2))
    p = _sample_target(task, rng)
    if task.n_goals == 2:
        targets = np.array([p, [p[0], -p[1]]])
        goal = int(rng.coin())
    else:
        targets = p[None, :]
        goal = 0
    return ArmState(q, targets, goal, 0)


def env_step(task: TaskSpec, state: ArmState, action) -> ArmState:
    a = np.clip(np.asarray(action, dtype=np.float64), -task.action_clip, task.action_clip)
    q = wrap_angle(state.q + a * task.dt)
    return replace(state, q=q, step_index=state.step_index + 1)


def _disc(n: int, radius: float) -> np.ndarray:
    k = np.arange(n)
    r = radius * np.sqrt((k + 0.5) / n)
    th = k * GOLDEN_ANGLE
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def render_cloud(task: TaskSpec, state: ArmState) -> np.ndarray:
    """Link points first (base to elbow, elbow to tip), then one disc per goal; z = 0."""
    q = state.q
    elbow = task.link1 * np.array([np.cos(q[0]), np.sin(q[0])])
    tip = forward_kinematics(q, task.link1, task.link2)
    s = np.linspace(0.0, 1.0, task.n_link_points)[:, None]
    parts = [s * elbow, elbow + s * (tip - elbow)]
    disc = _disc(task.points_per_target, task.disc_radius)
    parts += [tgt + disc for tgt in state.targets]
    xy = np.concatenate(parts, axis=0)
    return np.concatenate([xy, np.zeros((xy.shape[0], 1))], axis=1)


def observe(task: TaskSpec, state: ArmState) -> Observation:
    return Observation(state_vector(task, state.q), render_cloud(task, state), state)


def polar_coords(task: TaskSpec, q) -> np.ndarray:
    """End-effector radius and bearing as seen from the base."""
    ee = forward_kinematics(q, task.link1, task.link2)
    return np.array([np.hypot(ee[0], ee[1]), np.arctan2(ee[1], ee[0])])


def polar_jacobian(task: TaskSpec, q) -> np.ndarray:
    l1, l2 = task.link1, task.link2
    s, c = np.sin(q[1]), np.cos(q[1])
    r2 = l1 * l1 + l2 * l2 + 2 * l1 * l2 * c
    r = np.sqrt(r2)
    return np.array([[0.0, -l1 * l2 * s / max(r, 1e-12)],
                     [1.0, (l2 * l2 + l1 * l2 * c) / max(r2, 1e-12)]])


def expert_action(task: TaskSpec, state: ArmState) -> np.ndarray:
    """Damped-least-squares joint velocity toward the chosen goal.

    The IK runs in polar task coordinates (radius, bearing) so the arm swings
    around the base instead of folding through it. The DLS step is multiplied
    by ``expert_gain`` and then scaled down as a whole so no component exceeds
    ``action_clip``.
    """
    q = state.q
    goal = state.targets[state.goal]
    cur = polar_coords(task, q)
    err = np.array([np.hypot(goal[0], goal[1]) - cur[0],
                    wrap_angle(np.arctan2(goal[1], goal[0]) - cur[1])])
    if np.linalg.norm(forward_kinematics(q, task.link1, task.link2) - goal) == 0.0:
        return np.zeros(2)
    J = polar_jacobian(task, q)
    dq = J.T @ np.linalg.solve(J @ J.T + task.damping ** 2 * np.eye(2), err)
    a = task.expert_gain * dq
    peak = np.max(np.abs(a))
    if peak > task.action_clip:
        a = a * (task.action_clip / peak)
    return a


def expert_policy(task: TaskSpec) -> Callable:
    def policy(history: Sequence[Observation]) -> np.ndarray:
        return expert_action(task, history[-1].arm)[None, :]
    return policy


def zero_policy(history):
    return np.zeros((1, 2))


def reached(task: TaskSpec, state: ArmState) -> bool:
    ee = forward_kinematics(state.q, task.link1, task.link2)
    return bool(np.min(np.linalg.norm(state.targets - ee, axis=1)) < task.tolerance)


def midpoint_stall(rec: EpisodeRecord, radius: float = 0.15) -> bool:
    """A failed episode that ends near the midpoint of its goals, the
    signature of a policy averaging two modes."""
    if rec.success or len(rec.targets) < 2:
        return False
    return bool(np.linalg.norm(rec.final_ee - rec.targets.mean(axis=0)) <= radius)


def run_episode(policy_fn: Callable, task: TaskSpec, rng: Rng, max_steps: int | None = None,
                on_reset: Callable | None = None) -> EpisodeRecord:
    """Receding-horizon rollout.

    ``policy_fn(history)`` gets the two most recent observations (the first
    one duplicated at the start) and returns a chunk ``(k, 2)`` of actions
    that is executed in full before the policy is queried again. The episode
    ends at the first step whose end effector is within tolerance of a goal.
    """
    max_steps = task.max_steps if max_steps is None else max_steps
    state = env_reset(task, rng)
    if on_reset is not None:
        on_reset(state)
    obs = observe(task, state)
    history = [obs, obs]
    states, clouds, actions = [], [], []
    success = reached(task, state)
    error = None
    queue: list[np.ndarray] = []
    while not success and len(actions) < max_steps:
        if not queue:
            chunk = np.asarray(policy_fn(history), dtype=np.float64)
            if chunk.ndim != 2 or chunk.shape[1] != 2 or chunk.shape[0] == 0:
                raise ValueError(f"policy returned chunk of shape {chunk.shape}")
            if not np.all(np.isfinite(chunk)):
                error = "non-finite action"
                break
            queue = list(chunk)
        a = queue.pop(0)
        states.append(obs.state)
        clouds.append(obs.cloud)
        actions.append(a)
        state = env_step(task, state, a)
        obs = observe(task, state)
        history = [history[-1], obs]
        success = reached(task, state)
    n_pts = task.cloud_size
    return EpisodeRecord(
        states=np.array(states).reshape(-1, STATE_DIM),
        clouds=np.array(clouds).reshape(-1, n_pts, 3),
        actions=np.array(actions).reshape(-1, 2),
        success=bool(success) and error is None,
        steps=len(actions),
        targets=state.targets.copy(),
        goal=state.goal,
        final_ee=forward_kinematics(state.q, task.link1, task.link2),
        error=error,
    )
