"""
Demonstration dataset: expert rollouts serialized as a directory.

Layout (see docs/dataset_format.md):
    <out>/manifest.yaml
    <out>/episode_00000.json, episode_00001.json, ...
"""

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Union

import numpy as np
import yaml

from core.errors import DataError
from core.imaging import Image, PatchGeometry, PixelPoint, decode_png, encode_png
from core.masks import MaskSet
from sim.expert import scripted_expert
from sim.render import DEFAULT_GEOMETRY, render
from sim.scene import (
    GRIPPER_COLOR, PALETTE, TABLE_COLOR, Action, SceneState, SimEnv, sample_task,
)


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.yaml'
DEFAULT_EPISODES = 320


def episode_task_seed(seed: int, index: int) -> int:
    return 1_000_000 * (seed + 1) + index


@dataclass
class EpisodeStep:
    state: SceneState
    png: bytes
    masks: MaskSet
    keypoint: PixelPoint
    action: Action

    @property
    def image(self) -> Image:
        return decode_png(self.png)


@dataclass
class Episode:
    instruction: str
    steps: List[EpisodeStep] = field(default_factory=list)
    success: bool = False
    seed: int = 0

    def to_record(self) -> Dict:
        return {
            'version': FORMAT_VERSION,
            'seed': self.seed,
            'instruction': self.instruction,
            'success': self.success,
            'steps': [
                {
                    'state': step.state.to_dict(),
                    'png': base64.b64encode(step.png).decode('ascii'),
                    'mask': step.masks.assignment.tolist(),
                    'mask_labels': step.masks.n_slots,
                    'keypoint': [step.keypoint.u, step.keypoint.v],
                    'action': step.action.to_vector().tolist(),
                }
                for step in self.steps
            ],
        }

    @classmethod
    def from_record(cls, record: Dict) -> 'Episode':
        try:
            steps = [
                EpisodeStep(
                    state=SceneState.from_dict(s['state']),
                    png=base64.b64decode(s['png']),
                    masks=MaskSet(np.asarray(s['mask'], dtype=np.int64), int(s['mask_labels'])),
                    keypoint=PixelPoint(float(s['keypoint'][0]), float(s['keypoint'][1])),
                    action=Action.from_vector(s['action']),
                )
                for s in record['steps']
            ]
            return cls(record['instruction'], steps, bool(record['success']), int(record['seed']))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed episode record: {e}") from e


def record_episode(seed: int, geom: PatchGeometry = DEFAULT_GEOMETRY, max_steps: int = 100) -> Episode:
    """Run the expert in closed loop, dropping no-motion steps."""
    state, instr = sample_task(seed)
    env = SimEnv(state, instr, max_steps)
    episode = Episode(instr.text, seed=seed)
    skipped = 0
    while not env.done:
        snapshot = env.state.copy()
        action = scripted_expert(snapshot, instr)
        if action.is_no_motion:
            skipped += 1
        else:
            image, masks, keypoint = render(snapshot, geom)
            episode.steps.append(EpisodeStep(snapshot, encode_png(image), masks, keypoint, action))
        env.step(action)
    episode.success = env.success
    if skipped:
        logger.debug("Episode seed %d: filtered %d no-motion steps", seed, skipped)
    if not episode.success:
        logger.warning("Expert failed on task seed %d (%s)", seed, instr.text)
    return episode


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding='utf-8')
    except OSError as e:
        raise DataError(f"Could not write {path}: {e}") from e


def generate_dataset(n_episodes: int = DEFAULT_EPISODES, rng_seed: int = 0,
                     out_path: Union[str, Path] = 'data/oat_sim',
                     geom: PatchGeometry = DEFAULT_GEOMETRY, max_steps: int = 100,
                     progress: Optional[Callable[[int], None]] = None) -> Path:
    """Serialize n_episodes expert demonstrations; byte-identical per seed."""
    if n_episodes < 1:
        raise DataError(f"n_episodes must be >= 1, got {n_episodes}")
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Could not create dataset directory {out}: {e}") from e

    files, step_count, successes = [], 0, 0
    for i in range(n_episodes):
        episode = record_episode(episode_task_seed(rng_seed, i), geom, max_steps)
        name = f'episode_{i:05d}.json'
        _write_text(out / name, json.dumps(episode.to_record(), sort_keys=True, separators=(',', ':')))
        files.append(name)
        step_count += len(episode.steps)
        successes += int(episode.success)
        if progress:
            progress(1)

    manifest = {
        'version': FORMAT_VERSION,
        'seed': rng_seed,
        'episode_count': n_episodes,
        'step_count': step_count,
        'expert_successes': successes,
        'max_steps': max_steps,
        'geometry': {
            'image_size': geom.height,
            'patch_size': geom.patch_size,
            'grid_h': geom.grid_h,
            'grid_w': geom.grid_w,
        },
        'palette': {name: list(rgb) for name, rgb in PALETTE.items()},
        'table_color': list(TABLE_COLOR),
        'gripper_color': list(GRIPPER_COLOR),
        'episodes': files,
    }
    _write_text(out / MANIFEST_NAME, yaml.safe_dump(manifest, sort_keys=True))
    logger.info("Wrote %d episodes (%d steps, %d expert successes) to %s",
                n_episodes, step_count, successes, out)
    return out


def read_manifest(path: Union[str, Path]) -> Dict:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"No dataset manifest at {manifest_path}")
    try:
        manifest = yaml.safe_load(manifest_path.read_text(encoding='utf-8'))
    except (OSError, yaml.YAMLError) as e:
        raise DataError(f"Could not read manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get('version') != FORMAT_VERSION:
        raise DataError(f"Unsupported dataset version in {manifest_path}")
    return manifest


def dataset_geometry(manifest: Dict) -> PatchGeometry:
    geo = manifest['geometry']
    return PatchGeometry(int(geo['patch_size']), int(geo['grid_h']), int(geo['grid_w']))


def iter_episodes(path: Union[str, Path], limit: Optional[int] = None) -> Iterator[Episode]:
    path = Path(path)
    manifest = read_manifest(path)
    for name in manifest['episodes'][:limit]:
        episode_path = path / name
        try:
            record = json.loads(episode_path.read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"Could not read episode {episode_path}: {e}") from e
        yield Episode.from_record(record)


def load_dataset(path: Union[str, Path], limit: Optional[int] = None) -> List[Episode]:
    return list(iter_episodes(path, limit))


def replay_check(path: Union[str, Path], limit: Optional[int] = None) -> List[str]:
    """Re-render stored states; return a description of every mismatching step."""
    geom = dataset_geometry(read_manifest(path))
    mismatches = []
    for e_idx, episode in enumerate(iter_episodes(path, limit)):
        for s_idx, step in enumerate(episode.steps):
            image, masks, _ = render(step.state, geom)
            if encode_png(image) != step.png:
                mismatches.append(f'episode {e_idx} step {s_idx}: image differs')
            if not np.array_equal(masks.assignment, step.masks.assignment):
                mismatches.append(f'episode {e_idx} step {s_idx}: mask differs')
    return mismatches


@dataclass
class FrameTable:
    """Flattened per-frame arrays used by the trainers."""

    images: np.ndarray        # (F, H, W, 3) uint8
    gt_masks: List[MaskSet]
    keypoints: np.ndarray     # (F, 2) pixel (u, v)
    actions: np.ndarray       # (F, 7)
    instructions: List[str]
    episode_index: np.ndarray
    states: List[SceneState]

    def __len__(self) -> int:
        return int(self.actions.shape[0])


def flatten_episodes(episodes: List[Episode]) -> FrameTable:
    if not episodes or not any(e.steps for e in episodes):
        raise DataError("Dataset contains no steps")
    images, masks, kps, actions, instrs, owners, states = [], [], [], [], [], [], []
    for e_idx, episode in enumerate(episodes):
        for step in episode.steps:
            images.append(step.image.to_uint8())
            masks.append(step.masks)
            kps.append((step.keypoint.u, step.keypoint.v))
            actions.append(step.action.to_vector())
            instrs.append(episode.instruction)
            owners.append(e_idx)
            states.append(step.state)
    return FrameTable(
        np.stack(images), masks, np.asarray(kps, dtype=np.float64),
        np.stack(actions), instrs, np.asarray(owners, dtype=np.int64), states,
    )
