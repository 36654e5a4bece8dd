import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kitchenil.kitchen2d import (GRIP_SLEW, HOME, HOME_JITTER, V_MAX, Kitchen, Layout, ObjectSpec,
                                 SimState, TaskSpec, VisualTheme, rollout_actions)
from kitchenil.numcore import ConfigError, NonFiniteError


def _far_layout(k: Kitchen) -> Layout:
    poses = np.array([[0.9 - 0.1 * i, 0.1, 0.0] for i in range(k.n_objects)], np.float32)
    return Layout(0, 0, poses)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_sampled_layouts_never_overlap(kitchen, seed):
    lay = kitchen.sample_layout(seed)
    radii = [o.footprint_radius for o in kitchen.roster]
    for i in range(kitchen.n_objects):
        x, y = lay.poses[i, :2]
        assert radii[i] <= x <= 1 - radii[i] and radii[i] <= y <= 1 - radii[i]
        for j in range(i):
            d = math.dist(lay.poses[i, :2], lay.poses[j, :2])
            assert d > radii[i] + radii[j] + kitchen.clearance - 1e-6


def test_layout_sampling_is_seeded(kitchen):
    assert kitchen.sample_layout(5) == kitchen.sample_layout(5)
    assert kitchen.sample_layout(5) != kitchen.sample_layout(6)


def test_dense_roster_fails_with_config_error():
    roster = [ObjectSpec(f"o{i}", half_extents=(0.2,)) for i in range(12)]
    with pytest.raises(ConfigError, match="rejections"):
        Kitchen(roster).sample_layout(0)


def test_hand_stepped_motion_and_gripper(kitchen):
    s = kitchen.reset(_far_layout(kitchen), None, 0)
    s.robot = np.array([0.5, 0.5], np.float32)
    s1 = kitchen.step(s, [1.0, -0.5, -1.0])
    np.testing.assert_allclose(s1.robot, [0.5 + V_MAX, 0.5 - 0.5 * V_MAX], atol=1e-7)
    np.testing.assert_allclose(s1.robot_vel, [V_MAX, -0.5 * V_MAX], atol=1e-7)
    assert s1.grip == pytest.approx(1.0 - GRIP_SLEW)
    assert s1.grip_rate == pytest.approx(-GRIP_SLEW)
    assert s1.t == 1
    # commands beyond the unit box are clamped, and so is the position
    s2 = kitchen.step(s1, [5.0, 0.0, -1.0])
    assert s2.robot[0] == pytest.approx(0.5 + 2 * V_MAX)
    s.robot = np.array([0.99, 0.5], np.float32)
    assert kitchen.step(s, [1.0, 0.0, 1.0]).robot[0] == 1.0


def test_grasp_carries_free_object(kitchen):
    mug = kitchen.index["mug"]
    lay = _far_layout(kitchen)
    poses = lay.poses.copy()
    poses[mug] = (0.52, 0.5, 0.0)
    s = kitchen.reset(Layout(0, 0, poses), None, 0)
    s.robot = np.array([0.5, 0.5], np.float32)
    for _ in range(3):  # grip 1.0 -> 0.8 -> 0.6 -> 0.4 (closed)
        s = kitchen.step(s, [0.0, 0.0, -1.0])
    assert s.held == mug
    np.testing.assert_array_equal(s.poses[mug, :2], s.robot)
    s = kitchen.step(s, [1.0, 0.0, -1.0])
    np.testing.assert_allclose(s.poses[mug, :2], [0.5 + V_MAX, 0.5], atol=1e-7)
    for _ in range(3):
        s = kitchen.step(s, [0.0, 0.0, 1.0])
    assert s.held == -1


def test_door_rotates_by_tangential_motion_over_arm(kitchen):
    cab = kitchen.index["cabinet"]
    poses = _far_layout(kitchen).poses.copy()
    poses[cab] = (0.4, 0.5, 0.0)
    s = kitchen.reset(Layout(0, 0, poses), None, 0)
    s.robot = kitchen.handle_position(s, cab).astype(np.float32)
    for _ in range(3):
        s = kitchen.step(s, [0.0, 0.0, -1.0])
    assert s.held == cab
    s = kitchen.step(s, [0.0, 1.0, -1.0])
    arm = kitchen.roster[cab].arm_length
    assert s.angles[cab] == pytest.approx(V_MAX / arm, rel=1e-5)


def test_step_rejects_bad_actions(kitchen):
    s = kitchen.reset(_far_layout(kitchen), None, 0)
    with pytest.raises(ConfigError):
        kitchen.step(s, [0.0, 0.0])
    with pytest.raises(NonFiniteError):
        kitchen.step(s, [np.nan, 0.0, 0.0])


def _sliding_oracle(errors, eps, need):
    return any(all(e < eps for e in errors[i:i + need]) for i in range(len(errors) - need + 1))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 0.1), min_size=1, max_size=20), st.integers(1, 6))
def test_success_is_a_sliding_window(kitchen, errors, need):
    task = TaskSpec(0, "reach", "robot", "absolute", (0.5, 0.5), eps=0.03, min_stable_steps=1,
                    horizon=50)
    s0 = kitchen.reset(_far_layout(kitchen), None, 0)
    states = []
    for e in errors:
        s = s0.copy()
        s.robot = np.array([0.5 + e, 0.5], np.float32)
        states.append(s)
    goal = np.array([0.5, 0.5, 0.0], np.float32)
    errs = [kitchen.pose_error(s, task, goal) for s in states]
    assert kitchen.check_success(states, task, goal, need) == _sliding_oracle(errs, 0.03, need)


def test_single_pixel_robot_render():
    k = Kitchen([ObjectSpec("o", half_extents=(0.01,))], image_size=8)
    lay = Layout(0, 0, np.array([[0.9375, 0.9375, 0.0]], np.float32))
    s = k.reset(lay, None, 0)
    s.robot = np.array([2.5 / 8, 4.5 / 8], np.float32)
    theme = VisualTheme(np.zeros((1, 3), np.int16), 0.5, ("plain",), (100, 100, 100))
    img = k.render(s, theme)
    robot = np.all(img == [20, 20, 128], axis=-1)  # (40, 40, 255) * 0.5, rounded half-even
    assert robot.sum() == 1 and robot[4, 2]
    assert np.all(img[0, 0] == 50)  # background is lit too
    assert np.all(img[7, 7] == 100)  # default object color (200, 200, 200) at half light


def test_render_is_pure(kitchen):
    s = kitchen.reset(kitchen.sample_layout(3), None, 1)
    before = s.to_vector().copy()
    th = kitchen.sample_theme(np.random.default_rng(0))
    a, b = kitchen.render(s, th), kitchen.render(s, th)
    assert np.array_equal(a, b) and a.dtype == np.uint8 and a.shape == (48, 48, 3)
    assert np.array_equal(before, s.to_vector())


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_reset_jitter_is_bounded(kitchen, seed):
    s = kitchen.reset(kitchen.sample_layout(0), None, seed)
    assert math.dist(s.robot, HOME) <= HOME_JITTER + 1e-6
    assert s.grip == 1.0 and s.held == -1 and s.t == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 20))
def test_state_vector_round_trip(kitchen, seed):
    rng = np.random.default_rng(seed)
    tr = rollout_actions(kitchen, kitchen.sample_layout(seed), TaskSpec(0, "r", "robot", "absolute",
                         (0.5, 0.5)), seed, rng.uniform(-1, 1, (10, 3)), render=False)
    for s in tr.states:
        assert SimState.from_vector(s.to_vector()) == s


def test_rollout_replay_is_deterministic(kitchen, cfg):
    task = cfg.task("drag_mug")
    lay = kitchen.sample_layout(11)
    acts = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    a = rollout_actions(kitchen, lay, task, 4, acts, render=False)
    b = rollout_actions(kitchen, lay, task, 4, acts, render=False)
    assert all(x == y for x, y in zip(a.states, b.states))
