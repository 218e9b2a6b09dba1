"""
Scripted pick-and-place expert that produces the behaviour-cloning demonstrations.

Phases, derived from the state alone: approach-above -> descend ->
close+lift -> transport -> release. Every phase emits a non-zero motion so
no expert step is removed by the no-motion filter.
"""

import math
from typing import Union

import numpy as np

from sim.scene import (
    A_MAX, YAW_MAX, Z_GRASP, Z_HOVER, Action, Instruction, SceneState,
    goal_position, parse_instruction,
)


XY_EPS = 1e-6
YAW_EPS = 1e-3
Z_EPS = 1e-6


def _yaw_error(state: SceneState, pick_index: int) -> float:
    """Smallest rotation aligning the gripper with a cube (square symmetry)."""
    obj = state.objects[pick_index]
    if obj.shape != 'cube':
        return 0.0
    diff = obj.yaw - state.gripper.yaw
    quarter = math.pi / 2
    return (diff + quarter / 2) % quarter - quarter / 2


def _move(dx: float, dy: float, dz: float, dyaw: float = 0.0, grip: float = 1.0) -> Action:
    dpos = np.clip([dx, dy, dz], -A_MAX, A_MAX)
    drot = np.array([0.0, 0.0, float(np.clip(dyaw, -YAW_MAX, YAW_MAX))])
    return Action(dpos, drot, grip)


def scripted_expert(state: SceneState, instruction: Union[str, Instruction]) -> Action:
    """Next expert action for the current state (DataError on bad instructions)."""
    instr = parse_instruction(instruction) if isinstance(instruction, str) else instruction
    pick_index = state.find(*instr.pick)
    pick = state.objects[pick_index]
    g = state.gripper
    held = state.held_index

    if held is not None and held != pick_index:
        return _move(0.0, 0.0, A_MAX, grip=1.0)

    if held is None:
        dx, dy = pick.x - g.x, pick.y - g.y
        dyaw = _yaw_error(state, pick_index)
        if math.hypot(dx, dy) > XY_EPS or abs(dyaw) > YAW_EPS:
            return _move(dx, dy, Z_HOVER - g.z, dyaw, grip=1.0)
        if g.z > Z_GRASP + Z_EPS:
            return _move(0.0, 0.0, Z_GRASP - g.z, grip=1.0)
        return _move(0.0, 0.0, A_MAX, grip=0.0)

    gx, gy = goal_position(state, instr)
    dx, dy = gx - g.x, gy - g.y
    if math.hypot(dx, dy) > XY_EPS:
        return _move(dx, dy, Z_HOVER - g.z, grip=0.0)
    return _move(0.0, 0.0, -A_MAX if g.z > Z_GRASP else A_MAX, grip=1.0)
