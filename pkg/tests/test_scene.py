"""
Simulator: task sampling, instruction grammar, success rules and the expert.
"""

import numpy as np
import pytest

from core.errors import DataError, ParameterError
from sim.expert import scripted_expert
from sim.render import DEFAULT_GEOMETRY, render
from sim.scene import (
    A_MAX, CLOSE_FACTOR, GRIPPER_COLOR, PALETTE, RELATIONS, Z_GRASP, Z_HOVER, Action,
    GripperState, SceneObject, SceneState, SimEnv, check_success, parse_instruction, sample_task,
)


def two_object_state(pick_xy, target_shape='bowl', target_xy=(0.5, 0.5), held=False):
    objects = [
        SceneObject('cube', 'red', pick_xy[0], pick_xy[1], held=held),
        SceneObject(target_shape, 'blue', target_xy[0], target_xy[1]),
    ]
    return SceneState(objects, GripperState(0.2, 0.2, Z_HOVER))


def test_sample_task_is_reproducible():
    a_state, a_instr = sample_task(11)
    b_state, b_instr = sample_task(11)
    assert a_state.to_dict() == b_state.to_dict()
    assert a_instr == b_instr


def test_sample_task_layout():
    for seed in range(300):
        state, instr = sample_task(seed)
        assert 2 <= len(state.objects) <= 5
        assert len({o.color for o in state.objects}) == len(state.objects)
        assert instr.relation in RELATIONS
        assert parse_instruction(instr.text) == instr


def test_no_task_starts_solved():
    assert not [seed for seed in range(2000) if check_success(*sample_task(seed))]


@pytest.mark.slow
def test_ten_thousand_tasks_parse_and_start_unsolved():
    for seed in range(10_000):
        state, instr = sample_task(seed)
        assert parse_instruction(instr.text) == instr
        assert not check_success(state, instr)


@pytest.mark.parametrize('text, relation', [
    ('place the red cube in the blue bowl', 'in'),
    ('place the green ball left of the white bag', 'left-of'),
    ('place the yellow cube in front of the brown ball', 'front-of'),
])
def test_parse_instruction(text, relation):
    assert parse_instruction(text).relation == relation


@pytest.mark.parametrize('text', [
    'put the red cube in the blue bowl',
    'place the pink cube in the blue bowl',
    'place the red cube in the blue ball',
    'place the red spoon left of the blue bowl',
])
def test_parse_instruction_rejects(text):
    with pytest.raises(DataError):
        parse_instruction(text)


def test_success_in_container():
    state = two_object_state((0.52, 0.5))
    assert check_success(state, 'place the red cube in the blue bowl')


def test_held_object_is_never_a_success():
    state = two_object_state((0.5, 0.5), held=True)
    assert not check_success(state, 'place the red cube in the blue bowl')


def test_success_left_of_within_close_band():
    r_t, r_p = 0.1, 0.055
    near = 0.5 - (r_t + r_p + 0.5 * CLOSE_FACTOR * r_t)
    far = 0.5 - (r_t + r_p + 1.2 * CLOSE_FACTOR * r_t)
    assert check_success(two_object_state((near, 0.5)), 'place the red cube left of the blue bowl')
    assert not check_success(two_object_state((far, 0.5)), 'place the red cube left of the blue bowl')
    assert not check_success(two_object_state((0.8, 0.5)), 'place the red cube left of the blue bowl')


def test_success_front_of_needs_larger_y():
    assert check_success(two_object_state((0.5, 0.72)), 'place the red cube in front of the blue bowl')
    assert not check_success(two_object_state((0.5, 0.28)), 'place the red cube in front of the blue bowl')


def test_env_step_clips_motion():
    env = SimEnv.from_seed(3)
    x0 = env.state.gripper.x
    env.step(Action(np.array([1.0, 0.0, 0.0])))
    assert env.state.gripper.x - x0 <= A_MAX + 1e-12


def test_env_rejects_non_finite_action():
    env = SimEnv.from_seed(3)
    with pytest.raises(ParameterError):
        env.step(Action(np.array([np.nan, 0.0, 0.0])))


def test_env_reset_matches_from_seed():
    env = SimEnv.from_seed(1)
    env.step(Action(np.array([0.01, 0.0, 0.0])))
    state = env.reset(5)
    assert state.to_dict() == SimEnv.from_seed(5).state.to_dict()
    assert env.steps == 0


def test_expert_descends_when_above_pick():
    state = two_object_state((0.3, 0.3))
    state.gripper.x, state.gripper.y = 0.3, 0.3
    action = scripted_expert(state, 'place the red cube in the blue bowl')
    assert action.dpos[2] < 0
    assert abs(action.dpos[0]) < 1e-6 and abs(action.dpos[1]) < 1e-6


def test_expert_never_emits_no_motion():
    env = SimEnv.from_seed(2)
    while not env.done:
        action = scripted_expert(env.state, env.instruction)
        assert not action.is_no_motion
        env.step(action)


def expert_success_rate(seeds):
    successes = 0
    for seed in seeds:
        env = SimEnv.from_seed(seed)
        while not env.done:
            env.step(scripted_expert(env.state, env.instruction))
        successes += int(env.success)
    return successes / len(seeds)


def test_expert_closed_loop_success():
    assert expert_success_rate(range(100)) >= 0.98


@pytest.mark.slow
def test_expert_succeeds_on_five_hundred_seeds():
    assert expert_success_rate(range(500)) >= 0.98


def test_expert_grasp_happens_at_grasp_height():
    env = SimEnv.from_seed(4)
    while env.state.held_index is None and not env.done:
        env.step(scripted_expert(env.state, env.instruction))
    assert env.state.held_index is not None
    assert env.state.gripper.z <= Z_GRASP + A_MAX + 1e-9


def test_render_labels_and_keypoint():
    state, _ = sample_task(0)
    image, masks, keypoint = render(state, DEFAULT_GEOMETRY)
    assert (image.height, image.width) == (112, 112)
    assert masks.K == 64
    assert masks.n_slots == len(state.objects) + 2
    assert keypoint.u == pytest.approx(state.gripper.x * 112)
    pixels = image.to_uint8()
    assert (pixels == np.array(GRIPPER_COLOR, dtype=np.uint8)).all(axis=2).any()


def test_render_without_gripper():
    state, _ = sample_task(0)
    image, masks, keypoint = render(state, DEFAULT_GEOMETRY, draw_gripper=False)
    assert keypoint.is_sentinel
    assert not (image.to_uint8() == np.array(GRIPPER_COLOR, dtype=np.uint8)).all(axis=2).any()
    assert masks.counts[-1] == 0


def test_palette_is_distinct_from_gripper():
    assert GRIPPER_COLOR not in PALETTE.values()
