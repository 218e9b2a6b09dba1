"""
Tabletop scene state, task sampling, success checks and the step function.

Table coordinates: x to the right, y toward the viewer (down in the image),
both in [0, 1] table lengths. "left of" means smaller x, "in front of"
means larger y. Heights z are in table lengths above the surface.
"""

import copy
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.errors import DataError, ParameterError


logger = logging.getLogger(__name__)


SHAPES = ('cube', 'ball', 'bowl', 'bag')
PICKABLE = ('cube', 'ball')
CONTAINERS = ('bowl', 'bag')
PALETTE: Dict[str, Tuple[int, int, int]] = {
    'red': (220, 40, 40),
    'green': (40, 170, 60),
    'blue': (40, 70, 220),
    'yellow': (235, 210, 40),
    'orange': (240, 140, 30),
    'purple': (120, 50, 160),
    'brown': (130, 80, 40),
    'white': (245, 245, 245),
}
TABLE_COLOR = (150, 150, 150)
GRIPPER_COLOR = (255, 0, 255)

# footprint radius (table lengths) per shape; half-side for square shapes
FOOTPRINT = {'cube': 0.055, 'ball': 0.05, 'bowl': 0.1, 'bag': 0.09}
BOWL_INNER = 0.07

TABLE_BOUNDS = (0.0, 1.0)
GRIPPER_BOUNDS = (0.08, 0.92)
Z_MAX = 0.4
Z_HOVER = 0.3
Z_GRASP = 0.04
Z_GRASP_TOL = 0.08
GRASP_RADIUS = 0.035
A_MAX = 0.05
YAW_MAX = 0.25
CLOSE_FACTOR = 1.5

RELATIONS = ('in', 'left-of', 'front-of')
RELATION_WORDS = {'in': 'in', 'left-of': 'left of', 'front-of': 'in front of'}

_INSTRUCTION_RE = re.compile(
    r'^place the (?P<pick_color>\w+) (?P<pick_shape>\w+) '
    r'(?P<relation>in front of|left of|in) '
    r'the (?P<target_color>\w+) (?P<target_shape>\w+)$'
)


@dataclass
class SceneObject:
    shape: str
    color: str
    x: float
    y: float
    yaw: float = 0.0
    held: bool = False

    @property
    def radius(self) -> float:
        return FOOTPRINT[self.shape]

    @property
    def name(self) -> str:
        return f'{self.color} {self.shape}'


@dataclass
class GripperState:
    x: float
    y: float
    z: float
    yaw: float = 0.0
    aperture: float = 1.0


@dataclass
class SceneState:
    objects: List[SceneObject]
    gripper: GripperState
    bounds: Tuple[float, float] = TABLE_BOUNDS

    def __post_init__(self):
        held = [o for o in self.objects if o.held]
        if len(held) > 1:
            raise ParameterError("At most one object can be held")

    @property
    def held_index(self) -> Optional[int]:
        for i, obj in enumerate(self.objects):
            if obj.held:
                return i
        return None

    def copy(self) -> 'SceneState':
        return copy.deepcopy(self)

    def find(self, color: str, shape: str) -> int:
        for i, obj in enumerate(self.objects):
            if obj.color == color and obj.shape == shape:
                return i
        raise DataError(f"No {color} {shape} in the scene")

    def to_dict(self) -> Dict:
        return {
            'objects': [
                {'shape': o.shape, 'color': o.color, 'x': o.x, 'y': o.y, 'yaw': o.yaw, 'held': o.held}
                for o in self.objects
            ],
            'gripper': {
                'x': self.gripper.x, 'y': self.gripper.y, 'z': self.gripper.z,
                'yaw': self.gripper.yaw, 'aperture': self.gripper.aperture,
            },
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'SceneState':
        try:
            objects = [SceneObject(**o) for o in data['objects']]
            gripper = GripperState(**data['gripper'])
        except (KeyError, TypeError) as e:
            raise DataError(f"Malformed scene state: {e}") from e
        return cls(objects, gripper)


@dataclass(frozen=True)
class Instruction:
    pick: Tuple[str, str]
    relation: str
    target: Tuple[str, str]

    @property
    def text(self) -> str:
        return (f'place the {self.pick[0]} {self.pick[1]} {RELATION_WORDS[self.relation]} '
                f'the {self.target[0]} {self.target[1]}')


def parse_instruction(text: str) -> Instruction:
    """Parse a template instruction; DataError if it does not match the grammar."""
    match = _INSTRUCTION_RE.match(text.strip())
    if not match:
        raise DataError(f"Unparseable instruction: {text!r}")
    parts = match.groupdict()
    for key in ('pick_color', 'target_color'):
        if parts[key] not in PALETTE:
            raise DataError(f"Unknown colour {parts[key]!r} in {text!r}")
    for key in ('pick_shape', 'target_shape'):
        if parts[key] not in SHAPES:
            raise DataError(f"Unknown shape {parts[key]!r} in {text!r}")
    relation = {v: k for k, v in RELATION_WORDS.items()}[parts['relation']]
    if relation == 'in' and parts['target_shape'] not in CONTAINERS:
        raise DataError(f"Relation 'in' needs a bowl or bag target: {text!r}")
    return Instruction(
        (parts['pick_color'], parts['pick_shape']),
        relation,
        (parts['target_color'], parts['target_shape']),
    )


@dataclass
class Action:
    """[dpos (3), drot (3), grip] with dpos in table lengths per step."""

    dpos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    drot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    grip: float = 1.0

    def __post_init__(self):
        self.dpos = np.asarray(self.dpos, dtype=np.float64).reshape(3)
        self.drot = np.asarray(self.drot, dtype=np.float64).reshape(3)
        self.grip = float(self.grip)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.dpos, self.drot, [self.grip]])

    @classmethod
    def from_vector(cls, vec) -> 'Action':
        vec = np.asarray(vec, dtype=np.float64).reshape(7)
        return cls(vec[:3], vec[3:6], vec[6])

    def clipped(self) -> 'Action':
        return Action(
            np.clip(self.dpos, -A_MAX, A_MAX),
            np.clip(self.drot, -YAW_MAX, YAW_MAX),
            float(np.clip(self.grip, 0.0, 1.0)),
        )

    @property
    def is_no_motion(self) -> bool:
        return not np.any(self.dpos) and not np.any(self.drot)

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))


def goal_position(state: SceneState, instr: Instruction) -> Tuple[float, float]:
    """Table position the pick object should be released at."""
    pick = state.objects[state.find(*instr.pick)]
    target = state.objects[state.find(*instr.target)]
    if instr.relation == 'in':
        return target.x, target.y
    offset = target.radius + pick.radius + 0.5 * CLOSE_FACTOR * target.radius
    if instr.relation == 'left-of':
        return target.x - offset, target.y
    return target.x, target.y + offset


def _within_gripper_bounds(x: float, y: float) -> bool:
    lo, hi = GRIPPER_BOUNDS
    return lo <= x <= hi and lo <= y <= hi


def sample_task(rng_seed: int, n_objects: Optional[Tuple[int, int]] = None) -> Tuple[SceneState, Instruction]:
    """Reproducible scene with 2-5 non-overlapping objects and a feasible instruction."""
    rng = np.random.default_rng(rng_seed)
    low, high = n_objects or (2, 5)
    for attempt in range(1000):
        count = int(rng.integers(low, high + 1))
        colors = rng.choice(list(PALETTE), size=count, replace=False)
        shapes = [str(s) for s in rng.choice(SHAPES, size=count)]
        if not any(s in PICKABLE for s in shapes):
            shapes[0] = str(rng.choice(PICKABLE))

        objects: List[SceneObject] = []
        for color, shape in zip(colors, shapes):
            r = FOOTPRINT[shape]
            for _ in range(200):
                x, y = rng.uniform(0.12 + r, 0.88 - r, size=2)
                if all(math.hypot(x - o.x, y - o.y) >= r + o.radius + 0.03 for o in objects):
                    yaw = float(rng.uniform(-math.pi / 4, math.pi / 4)) if shape == 'cube' else 0.0
                    objects.append(SceneObject(shape, str(color), float(x), float(y), yaw))
                    break
        if len(objects) < count:
            continue

        gx, gy = rng.uniform(GRIPPER_BOUNDS[0], GRIPPER_BOUNDS[1], size=2)
        gripper = GripperState(float(gx), float(gy), Z_HOVER, float(rng.uniform(-math.pi / 4, math.pi / 4)), 1.0)
        state = SceneState(objects, gripper)

        candidates = []
        for pick in objects:
            if pick.shape not in PICKABLE:
                continue
            for target in objects:
                if target is pick:
                    continue
                for relation in RELATIONS:
                    if relation == 'in' and target.shape not in CONTAINERS:
                        continue
                    instr = Instruction((pick.color, pick.shape), relation, (target.color, target.shape))
                    if check_success(state, instr):
                        continue
                    if _within_gripper_bounds(*goal_position(state, instr)):
                        candidates.append(instr)
        if not candidates:
            continue
        instr = candidates[int(rng.integers(len(candidates)))]
        if attempt:
            logger.debug("sample_task(%d) needed %d placement retries", rng_seed, attempt)
        return state, instr
    raise RuntimeError(f"Could not place a feasible scene for seed {rng_seed}")


def check_success(state: SceneState, instruction) -> bool:
    """True when the pick object rests on the table satisfying the relation."""
    instr = parse_instruction(instruction) if isinstance(instruction, str) else instruction
    pick = state.objects[state.find(*instr.pick)]
    target = state.objects[state.find(*instr.target)]
    if pick.held:
        return False
    lo, hi = state.bounds
    if not (lo <= pick.x <= hi and lo <= pick.y <= hi):
        return False

    dist = math.hypot(pick.x - target.x, pick.y - target.y)
    if instr.relation == 'in':
        return dist < target.radius
    gap = max(dist - pick.radius - target.radius, 0.0)
    r_close = CLOSE_FACTOR * target.radius
    if instr.relation == 'left-of':
        return pick.x < target.x and gap <= r_close
    return pick.y > target.y and gap <= r_close


class SimEnv:
    """Single scene instance; not thread-safe, one per rollout."""

    def __init__(self, state: SceneState, instruction: Instruction, max_steps: int = 100):
        self.state = state.copy()
        self.instruction = instruction
        self.max_steps = max_steps
        self.steps = 0

    @classmethod
    def from_seed(cls, seed: int, max_steps: int = 100) -> 'SimEnv':
        state, instr = sample_task(seed)
        return cls(state, instr, max_steps)

    def reset(self, seed: int) -> SceneState:
        """Start the task sampled from seed; max_steps is kept."""
        state, self.instruction = sample_task(seed)
        self.state = state.copy()
        self.steps = 0
        return self.state

    @property
    def done(self) -> bool:
        return self.success or self.steps >= self.max_steps

    @property
    def success(self) -> bool:
        return check_success(self.state, self.instruction)

    def step(self, action: Action) -> SceneState:
        """Apply grip first, then the clipped motion."""
        if not action.is_finite:
            raise ParameterError(f"Non-finite action: {action.to_vector()}")
        a = action.clipped()
        state = self.state
        g = state.gripper
        held = state.held_index

        if a.grip < 0.5 and held is None and g.z <= Z_GRASP_TOL:
            best, best_dist = None, GRASP_RADIUS
            for i, obj in enumerate(state.objects):
                if obj.shape not in PICKABLE:
                    continue
                d = math.hypot(obj.x - g.x, obj.y - g.y)
                if d <= best_dist:
                    best, best_dist = i, d
            if best is not None:
                state.objects[best].held = True
                held = best
        elif a.grip >= 0.5 and held is not None:
            state.objects[held].held = False
            held = None
        g.aperture = a.grip

        lo, hi = GRIPPER_BOUNDS
        g.x = float(np.clip(g.x + a.dpos[0], lo, hi))
        g.y = float(np.clip(g.y + a.dpos[1], lo, hi))
        g.z = float(np.clip(g.z + a.dpos[2], 0.0, Z_MAX))
        g.yaw = float((g.yaw + a.drot[2] + math.pi) % (2 * math.pi) - math.pi)
        if held is not None:
            obj = state.objects[held]
            obj.x, obj.y = g.x, g.y
            if obj.shape == 'cube':
                obj.yaw = float((obj.yaw + a.drot[2] + math.pi) % (2 * math.pi) - math.pi)
        self.steps += 1
        return state
