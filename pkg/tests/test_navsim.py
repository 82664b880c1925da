from __future__ import annotations

import numpy as np
import pytest

from cousinforge.assembly import GroundPlane, Placement, SceneSpec
from cousinforge.geometry import OrientedBox
from cousinforge.navsim import (
    COLLISION_SUBSTEPS,
    OMEGA_LIMIT,
    V_LIMIT,
    AgentState,
    EpisodeConfig,
    RewardWeights,
    WaypointPolicy,
    clamp_action,
    disc_hits_footprint,
    in_collision,
    make_route,
    reward,
    run_episode,
    run_episode_detailed,
    step,
    straight_policy,
)

import _synth


def wall_scene(wall_x: float = 5.0, half: float = 60.0) -> SceneSpec:
    boundary = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    footprint = OrientedBox(np.array([wall_x, 0.0, 1.0]), np.array([1.0, 10.0, 2.0]), 0.0)
    wall = Placement(
        node_id=0,
        asset_id="wall",
        category="wall",
        score=1.0,
        position=footprint.center.copy(),
        yaw=0.0,
        physics={},
        footprint=footprint,
    )
    return SceneSpec(
        scene_id="wall",
        cousin_index=0,
        ground_planes=[GroundPlane(kind="road", z=0.0, boundary=boundary, material_id="m")],
        sky_id=None,
        placements=[wall],
    )


def bare_scene() -> SceneSpec:
    return SceneSpec(
        scene_id="bare", cousin_index=0, ground_planes=[], sky_id=None, placements=[]
    )


CFG = EpisodeConfig()
W = RewardWeights()


class TestClampAndCollision:
    def test_clamp_action(self):
        assert clamp_action((5.0, -9.0)) == (V_LIMIT, -OMEGA_LIMIT)
        assert clamp_action((-5.0, 9.0)) == (-V_LIMIT, OMEGA_LIMIT)
        assert clamp_action((1.0, 0.5)) == (1.0, 0.5)

    def test_disc_hits_footprint(self):
        box = OrientedBox(np.array([5.0, 0.0, 1.0]), np.array([1.0, 10.0, 2.0]), 0.0)
        assert disc_hits_footprint(np.array([5.0, 0.0]), 0.4, box)
        assert disc_hits_footprint(np.array([4.2, 0.0]), 0.4, box)
        assert not disc_hits_footprint(np.array([4.0, 0.0]), 0.4, box)
        assert disc_hits_footprint(np.array([4.51, 0.0]), 0.0, box)
        assert not disc_hits_footprint(np.array([4.49, 0.0]), 0.0, box)

    def test_rotated_footprint(self):
        box = OrientedBox(np.zeros(3), np.array([2.0, 0.5, 1.0]), np.pi / 2)
        # Long axis now along y: x extent is only +-0.25.
        assert not disc_hits_footprint(np.array([0.7, 0.0]), 0.4, box)
        assert disc_hits_footprint(np.array([0.0, 0.9]), 0.4, box)

    def test_off_ground_is_collision_only_with_planes(self):
        scene = _synth.empty_scene(half=5.0)
        assert not in_collision(np.array([4.0, 0.0]), scene, 0.4)
        assert in_collision(np.array([5.5, 0.0]), scene, 0.4)
        assert not in_collision(np.array([500.0, 0.0]), bare_scene(), 0.4)


class TestStep:
    def test_straight_motion_closed_form(self):
        scene = _synth.empty_scene()
        state = AgentState(position=np.zeros(2), heading=0.0)
        for k in range(5):
            state, events = step(state, (1.0, 0.0), scene, CFG)
            assert events == []
        assert abs(state.position[0] - 5 * 1.0 * CFG.dt) < 1e-12
        assert state.position[1] == 0.0
        assert state.heading == 0.0
        assert abs(state.time - 5 * CFG.dt) < 1e-12

    def test_pure_rotation_keeps_position(self):
        scene = _synth.empty_scene()
        state = AgentState(position=np.array([1.0, 2.0]), heading=0.0)
        state, events = step(state, (0.0, 1.5), scene, CFG)
        assert events == []
        assert np.array_equal(state.position, np.array([1.0, 2.0]))
        assert abs(state.heading - 1.5 * CFG.dt) < 1e-15

    def test_heading_updates_before_position(self):
        scene = _synth.empty_scene()
        state = AgentState(position=np.zeros(2), heading=0.0)
        state, _ = step(state, (2.0, 1.5), scene, CFG)
        h = 1.5 * CFG.dt
        want = 2.0 * CFG.dt * np.array([np.cos(h), np.sin(h)])
        assert np.allclose(state.position, want, atol=1e-15)
        assert abs(state.heading - h) < 1e-15

    def test_action_clamped_inside_step(self):
        scene = _synth.empty_scene()
        a = AgentState(position=np.zeros(2), heading=0.0)
        b = AgentState(position=np.zeros(2), heading=0.0)
        a, _ = step(a, (99.0, 0.0), scene, CFG)
        b, _ = step(b, (V_LIMIT, 0.0), scene, CFG)
        assert np.array_equal(a.position, b.position)
        assert a.linear_v == V_LIMIT

    def test_collision_halts_at_first_bad_substep(self):
        scene = wall_scene(wall_x=5.0)
        start_x = 3.8
        state = AgentState(position=np.array([start_x, 0.0]), heading=0.0)
        state, events = step(state, (2.0, 0.0), scene, CFG)
        assert events == [{"type": "collision"}]
        seg = 2.0 * CFG.dt
        expected = None
        for sub in range(1, COLLISION_SUBSTEPS + 1):
            x = start_x + (sub / COLLISION_SUBSTEPS) * seg
            if in_collision(np.array([x, 0.0]), scene, CFG.agent_radius):
                expected = x
                break
        assert expected is not None
        assert state.position[0] == expected
        assert 4.1 - 1e-9 <= state.position[0] <= 4.1 + 0.04 + 1e-9

    def test_walking_off_ground_halts(self):
        scene = _synth.empty_scene(half=5.0)
        state = AgentState(position=np.array([4.9, 0.0]), heading=0.0)
        state, events = step(state, (2.0, 0.0), scene, CFG)
        assert events == [{"type": "collision"}]
        assert state.position[0] > 5.0


class TestReward:
    def test_at_rest_only_shaping(self):
        state = AgentState(position=np.zeros(2), heading=0.0, linear_v=0.0)
        target = np.array([3.0, 4.0])
        got = reward(state, [], np.array([target]), np.array([9.0, 9.0]), W)
        e_sq = 25.0
        want = 10.0 * np.exp(-e_sq / 50.0) + 50.0 * np.exp(-e_sq / 2.0)
        assert abs(got - want) < 1e-12

    def test_goal_arrival_while_moving_on_target(self):
        state = AgentState(position=np.array([3.0, 4.0]), heading=0.2, linear_v=1.0)
        target = np.array([3.0, 4.0])
        got = reward(state, [{"type": "goal"}], np.array([target]), target, W)
        assert got == 2070.0

    def test_collision_penalty(self):
        state = AgentState(position=np.array([100.0, 0.0]), heading=0.0, linear_v=2.0)
        got = reward(state, [{"type": "collision"}], np.zeros((0, 2)), np.array([0.0, 0.0]), W)
        # Far from the target: shaping is ~0 and motion is directly away.
        assert abs(got - (-200.0 - 10.0)) < 1e-6

    def test_velocity_term_cosine(self):
        target = np.array([0.0, 10.0])
        route = np.array([target])
        goal = np.array([50.0, 50.0])
        shaping = 10.0 * np.exp(-100.0 / 50.0) + 50.0 * np.exp(-100.0 / 2.0)
        perp = AgentState(position=np.zeros(2), heading=0.0, linear_v=2.0)
        assert abs(reward(perp, [], route, goal, W) - shaping) < 1e-12
        toward = AgentState(position=np.zeros(2), heading=np.pi / 2, linear_v=2.0)
        assert abs(reward(toward, [], route, goal, W) - (shaping + 10.0)) < 1e-12
        away = AgentState(position=np.zeros(2), heading=-np.pi / 2, linear_v=2.0)
        assert abs(reward(away, [], route, goal, W) - (shaping - 10.0)) < 1e-12

    def test_route_head_is_target_not_goal(self):
        state = AgentState(position=np.zeros(2), heading=0.0, linear_v=0.0)
        route = np.array([[1.0, 0.0], [50.0, 0.0]])
        goal = np.array([50.0, 0.0])
        near = reward(state, [], route, goal, W)
        far = reward(state, [], np.zeros((0, 2)), goal, W)
        assert near > far

    def test_reverse_gear_counts_as_speed(self):
        target = np.array([10.0, 0.0])
        state = AgentState(position=np.zeros(2), heading=0.0, linear_v=-2.0)
        shaping = 10.0 * np.exp(-100.0 / 50.0) + 50.0 * np.exp(-100.0 / 2.0)
        got = reward(state, [], np.array([target]), target, W)
        assert abs(got - (shaping - 10.0)) < 1e-12


class TestMakeRoute:
    def test_spacing_with_remainder(self):
        route = make_route(np.zeros(2), np.array([12.0, 0.0]), spacing=5.0)
        assert np.allclose(route, [[5.0, 0.0], [10.0, 0.0], [12.0, 0.0]])

    def test_exact_multiple_has_no_duplicate_goal(self):
        route = make_route(np.zeros(2), np.array([10.0, 0.0]), spacing=5.0)
        assert np.allclose(route, [[5.0, 0.0], [10.0, 0.0]])

    def test_short_route_is_goal_only(self):
        route = make_route(np.zeros(2), np.array([3.0, 0.0]), spacing=5.0)
        assert np.allclose(route, [[3.0, 0.0]])

    def test_zero_length(self):
        route = make_route(np.array([2.0, 2.0]), np.array([2.0, 2.0]))
        assert np.allclose(route, [[2.0, 2.0]])

    def test_diagonal_spacing(self):
        goal = np.array([6.0, 8.0])
        route = make_route(np.zeros(2), goal, spacing=5.0)
        assert np.allclose(route[0], [3.0, 4.0])
        assert np.allclose(route[-1], goal)


class TestEpisodes:
    def test_unobstructed_run_succeeds(self):
        scene = _synth.empty_scene()
        goal = np.array([15.0, 0.0])
        result = run_episode_detailed(scene, (0.0, 0.0, 0.0), goal, straight_policy(goal))
        assert result.metrics.sr == 1
        assert result.metrics.ct == 0
        assert result.metrics.rc == 100.0
        goal_events = [e for e in result.events if e["type"] == "goal"]
        assert len(goal_events) == 1
        big = [r for r in result.rewards if r >= 2000.0]
        assert len(big) == 1
        assert result.total_return == sum(result.rewards)
        assert result.trajectory.shape[1] == 4
        assert result.metrics.dtg <= 2.0

    def test_forced_collision_terminates_with_penalty(self):
        scene = wall_scene(wall_x=5.0)
        goal = np.array([15.0, 0.0])
        result = run_episode_detailed(scene, (0.0, 0.0, 0.0), goal, straight_policy(goal))
        assert result.metrics.sr == 0
        assert result.metrics.ct == 1
        collisions = [e for e in result.events if e["type"] == "collision"]
        assert len(collisions) == 1
        assert not any(e["type"] == "goal" for e in result.events)
        assert result.rewards[-1] <= -130.0
        assert result.rewards[-1] >= -210.0
        # Terminated at the collision step, well before the horizon.
        assert len(result.rewards) < EpisodeConfig().horizon_steps
        assert collisions[0]["step"] == len(result.rewards)

    def test_collision_takes_precedence_over_goal(self):
        # The agent first collides at x ~= 4.12, which is already inside the
        # 2 m tolerance disc of this goal; the collision must win the step.
        scene = wall_scene(wall_x=5.0)
        goal = np.array([6.1, 0.0])
        result = run_episode_detailed(scene, (0.0, 0.0, 0.0), goal, straight_policy(goal))
        final = result.trajectory[-1, 1:3]
        assert float(np.linalg.norm(final - goal)) <= 2.0
        assert result.metrics.sr == 0
        assert result.metrics.ct == 1
        assert not any(e["type"] == "goal" for e in result.events)
        assert not any(r >= 2000.0 for r in result.rewards)

    def test_horizon_cap(self):
        scene = _synth.empty_scene()
        goal = np.array([500.0, 0.0])
        cfg = EpisodeConfig(horizon_steps=40)
        result = run_episode_detailed(scene, (0.0, 0.0, 0.0), goal, straight_policy(goal, cfg), cfg)
        assert len(result.rewards) == 40
        assert result.trajectory.shape[0] == 41
        assert result.metrics.sr == 0

    def test_waypoint_policy_follows_route(self):
        scene = _synth.empty_scene()
        goal = np.array([24.0, 0.0])
        route = make_route(np.zeros(2), goal, spacing=5.0)
        result = run_episode_detailed(scene, (0.0, 0.0, 0.0), goal, WaypointPolicy(route))
        assert result.metrics.sr == 1
        assert result.metrics.ct == 0
        assert result.metrics.rc == 100.0

    def test_determinism(self):
        spec, start, goal = _synth.slalom_scene(3)
        route = make_route(np.asarray(start[:2]), np.asarray(goal), 5.0)
        a = run_episode_detailed(spec, start, goal, WaypointPolicy(route))
        b = run_episode_detailed(spec, start, goal, WaypointPolicy(make_route(np.asarray(start[:2]), np.asarray(goal), 5.0)))
        assert a.trajectory.tobytes() == b.trajectory.tobytes()
        assert a.rewards == b.rewards
        assert a.events == b.events
        assert a.total_return == b.total_return

    def test_wrapper_shape(self):
        scene = _synth.empty_scene()
        goal = np.array([12.0, 0.0])
        trajectory, metrics, total = run_episode(scene, (0.0, 0.0, 0.0), goal, straight_policy(goal))
        assert trajectory.ndim == 2
        assert metrics.sr == 1
        assert isinstance(total, float)

    def test_start_at_goal_terminates_immediately(self):
        scene = _synth.empty_scene()
        goal = np.array([0.5, 0.0])
        result = run_episode_detailed(scene, (0.0, 0.0, 0.0), goal, straight_policy(goal))
        assert result.metrics.sr == 1
        assert len(result.rewards) == 1
        assert result.rewards[0] >= 2000.0
