"""Deterministic kinematic navigation over assembled scenes.

A differential-drive agent (disc footprint) moves through the BEV plane
of a SceneSpec. Each step integrates heading then position, and checks
collision at 10 evenly spaced substeps along the segment so fast agents
cannot tunnel through thin obstacles; the agent halts at the first
colliding substep. Collision means the agent disc intersects a
placement footprint or the disc center leaves every ground-plane
boundary polygon (scenes without planes skip the off-ground check).

Episodes terminate on collision, on reaching the goal within tolerance,
or at the step horizon. The per-step reward is arrival + collision +
two Gaussian position-shaping kernels toward the current route waypoint
+ a velocity-alignment term. Everything is pure float math: identical
inputs give bit-identical trajectories and returns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import SceneSpec
from .evaluation import NavMetrics, nav_metrics
from .geometry import OrientedBox, point_in_convex_polygon, wrap_angle

V_LIMIT = 2.0

OMEGA_LIMIT = 1.5

COLLISION_SUBSTEPS = 10


@dataclass
class AgentState:
    position: np.ndarray
    heading: float
    linear_v: float = 0.0
    angular_v: float = 0.0
    time: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(2)
        self.heading = float(self.heading)


@dataclass
class EpisodeConfig:
    dt: float = 0.2
    horizon_steps: int = 300
    goal_tol: float = 2.0
    goal_dist_range: tuple = (10.0, 30.0)
    waypoint_spacing: float = 5.0
    agent_radius: float = 0.4


@dataclass
class RewardWeights:
    arrive: float = 2000.0
    collide: float = -200.0
    pos_coarse_std: float = 5.0
    pos_coarse_weight: float = 10.0
    pos_fine_std: float = 1.0
    pos_fine_weight: float = 50.0
    velocity_weight: float = 10.0


@dataclass
class EpisodeResult:
    trajectory: np.ndarray
    metrics: NavMetrics
    rewards: list
    total_return: float
    events: list


# ---------------------------------------------------------------------------
# Collision


def disc_hits_footprint(center: np.ndarray, radius: float, box: OrientedBox) -> bool:
    """Disc vs rotated-rectangle overlap via closest-point clamp in box frame."""
    d = center - box.center[:2]
    c, s = np.cos(-box.yaw), np.sin(-box.yaw)
    local = np.array([d[0] * c - d[1] * s, d[0] * s + d[1] * c])
    half = box.dims[:2] / 2.0
    clamped = np.clip(local, -half, half)
    return float(np.sum((local - clamped) ** 2)) <= radius * radius


def in_collision(position: np.ndarray, scene: SceneSpec, radius: float) -> bool:
    """True when the agent disc hits any footprint or leaves all ground hulls."""
    for placement in scene.placements:
        if disc_hits_footprint(position, radius, placement.footprint):
            return True
    if scene.ground_planes:
        on_ground = any(
            point_in_convex_polygon(position, plane.boundary) for plane in scene.ground_planes
        )
        if not on_ground:
            return True
    return False


# ---------------------------------------------------------------------------
# Dynamics


def clamp_action(action) -> tuple[float, float]:
    v, omega = float(action[0]), float(action[1])
    return (
        float(np.clip(v, -V_LIMIT, V_LIMIT)),
        float(np.clip(omega, -OMEGA_LIMIT, OMEGA_LIMIT)),
    )


def step(
    state: AgentState,
    action,
    scene: SceneSpec,
    cfg: EpisodeConfig,
) -> tuple[AgentState, list]:
    """One kinematic step with substep collision checking.

    heading updates first, then the position advances along the new
    heading; the straight segment is sampled at dt/10 and the agent
    halts at the first colliding sample, emitting a collision event.
    """
    v, omega = clamp_action(action)
    heading = wrap_angle(state.heading + omega * cfg.dt)
    start = state.position
    end = start + v * cfg.dt * np.array([np.cos(heading), np.sin(heading)])
    events = []
    final = end
    for sub in range(1, COLLISION_SUBSTEPS + 1):
        sample = start + (sub / COLLISION_SUBSTEPS) * (end - start)
        if in_collision(sample, scene, cfg.agent_radius):
            events.append({"type": "collision"})
            final = sample
            break
    return (
        AgentState(
            position=final,
            heading=heading,
            linear_v=v,
            angular_v=omega,
            time=state.time + cfg.dt,
        ),
        events,
    )


# ---------------------------------------------------------------------------
# Reward


def reward(
    state: AgentState,
    events: list,
    route: np.ndarray,
    goal: np.ndarray,
    w: RewardWeights,
) -> float:
    """Per-step reward R_A + R_C + R_P + R_V.

    `route` holds the remaining waypoints (current target first); when
    empty the goal is the target. The velocity term is 0 at zero speed
    and the full weight when the agent sits exactly on the target while
    moving (alignment is then undefined but the pursuit is complete).
    """
    route = np.asarray(route, dtype=np.float64).reshape(-1, 2)
    goal = np.asarray(goal, dtype=np.float64).reshape(2)
    target = route[0] if len(route) else goal
    total = 0.0
    if any(e["type"] == "goal" for e in events):
        total += w.arrive
    if any(e["type"] == "collision" for e in events):
        total += w.collide
    e_vec = target - state.position
    e_sq = float(e_vec @ e_vec)
    total += w.pos_coarse_weight * np.exp(-e_sq / (2.0 * w.pos_coarse_std**2))
    total += w.pos_fine_weight * np.exp(-e_sq / (2.0 * w.pos_fine_std**2))
    speed = abs(state.linear_v)
    if speed > 0:
        if e_sq == 0.0:
            total += w.velocity_weight
        else:
            velocity = state.linear_v * np.array([np.cos(state.heading), np.sin(state.heading)])
            cos_angle = float(velocity @ e_vec) / (speed * np.sqrt(e_sq))
            total += w.velocity_weight * cos_angle
    return float(total)


# ---------------------------------------------------------------------------
# Routes and episodes


def make_route(start: np.ndarray, goal: np.ndarray, spacing: float = 5.0) -> np.ndarray:
    """Waypoints every `spacing` meters along start->goal, goal appended last."""
    start = np.asarray(start, dtype=np.float64).reshape(2)
    goal = np.asarray(goal, dtype=np.float64).reshape(2)
    total = float(np.linalg.norm(goal - start))
    points = []
    if total > 0:
        direction = (goal - start) / total
        distance = spacing
        while distance < total:
            points.append(start + distance * direction)
            distance += spacing
    points.append(goal)
    return np.array(points)


def run_episode_detailed(
    scene: SceneSpec,
    start,
    goal,
    policy,
    cfg: EpisodeConfig | None = None,
    w: RewardWeights | None = None,
) -> EpisodeResult:
    """Roll one episode; records the full trajectory, rewards, and events.

    `start` is (x, y, heading); `policy` maps AgentState to (v, omega).
    Terminates on collision (takes precedence), goal reach, or horizon.
    """
    cfg = cfg or EpisodeConfig()
    w = w or RewardWeights()
    start = np.asarray(start, dtype=np.float64).reshape(3)
    goal = np.asarray(goal, dtype=np.float64).reshape(2)
    state = AgentState(position=start[:2], heading=start[2])
    route = make_route(state.position, goal, cfg.waypoint_spacing)
    target_index = 0
    rows = [(state.time, state.position[0], state.position[1], state.heading)]
    rewards = []
    all_events = []
    for step_index in range(cfg.horizon_steps):
        action = policy(state)
        state, events = step(state, action, scene, cfg)
        collided = bool(events)
        reached_goal = (
            not collided and float(np.linalg.norm(state.position - goal)) <= cfg.goal_tol
        )
        if reached_goal:
            events = events + [{"type": "goal"}]
        step_events = [dict(e, step=step_index + 1) for e in events]
        all_events.extend(step_events)
        rewards.append(reward(state, events, route[target_index:], goal, w))
        while target_index < len(route) and (
            float(np.linalg.norm(state.position - route[target_index])) <= cfg.goal_tol
        ):
            target_index += 1
        rows.append((state.time, state.position[0], state.position[1], state.heading))
        if collided or reached_goal:
            break
    trajectory = np.array(rows)
    collisions = [e for e in all_events if e["type"] == "collision"]
    metrics = nav_metrics(trajectory, route, goal, tol=cfg.goal_tol, collisions=collisions)
    return EpisodeResult(
        trajectory=trajectory,
        metrics=metrics,
        rewards=rewards,
        total_return=float(sum(rewards)),
        events=all_events,
    )


def run_episode(scene, start, goal, policy, cfg=None, w=None):
    """Compact wrapper returning only (trajectory, NavMetrics, total_return)."""
    result = run_episode_detailed(scene, start, goal, policy, cfg, w)
    return result.trajectory, result.metrics, result.total_return


# ---------------------------------------------------------------------------
# Scripted policies


def straight_policy(goal, cfg: EpisodeConfig | None = None):
    """Turn toward the goal, drive at full speed once roughly facing it."""
    cfg = cfg or EpisodeConfig()
    goal = np.asarray(goal, dtype=np.float64).reshape(2)

    def policy(state: AgentState):
        error = goal - state.position
        desired = np.arctan2(error[1], error[0])
        dh = wrap_angle(desired - state.heading)
        omega = float(np.clip(dh / cfg.dt, -OMEGA_LIMIT, OMEGA_LIMIT))
        v = V_LIMIT if abs(dh) < np.pi / 4 else 0.0
        return (v, omega)

    return policy


class WaypointPolicy:
    """Steer at the first route waypoint not yet reached, then the next."""

    def __init__(self, route: np.ndarray, cfg: EpisodeConfig | None = None):
        self.route = np.asarray(route, dtype=np.float64).reshape(-1, 2)
        self.cfg = cfg or EpisodeConfig()
        self.index = 0

    def __call__(self, state: AgentState):
        while (
            self.index < len(self.route) - 1
            and float(np.linalg.norm(state.position - self.route[self.index]))
            <= self.cfg.goal_tol
        ):
            self.index += 1
        target = self.route[self.index]
        error = target - state.position
        desired = np.arctan2(error[1], error[0])
        dh = wrap_angle(desired - state.heading)
        omega = float(np.clip(dh / self.cfg.dt, -OMEGA_LIMIT, OMEGA_LIMIT))
        v = V_LIMIT if abs(dh) < np.pi / 4 else 0.0
        return (v, omega)
