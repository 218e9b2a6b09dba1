"""
Flat key-value run configuration.

Every TrainConfig field is a config key. Files are flat YAML mappings;
CLI flags are generated from the same fields so they always mirror the keys.
"""

import argparse
import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from core.errors import DataError, ParameterError


TOKENIZER_MODES = ('oat', 'full-patch', 'single-token', 'object-only')
POOL_MODES = ('average', 'attention')
ENCODER_MODES = ('linear-frozen', 'conv-trained')
MASK_SOURCES = ('oracle', 'unsupervised')
KEYPOINT_SOURCES = ('oracle', 'heuristic', 'learned')
LR_SCHEDULES = ('constant', 'cosine')


@dataclass
class TrainConfig:
    # data
    dataset_path: str = 'data/oat_sim'
    episodes: int = 320
    data_seed: int = 0
    image_size: int = 112
    patch_size: int = 14
    max_episode_steps: int = 100

    # encoder
    encoder_mode: str = 'conv-trained'
    feature_dim: int = 64

    # masks and keypoints
    mask_source: str = 'oracle'
    keypoint_source: str = 'heuristic'
    detector_path: str = ''
    detector_threshold: float = 0.5

    # tokenizer
    tokenizer_mode: str = 'oat'
    object_slots: int = 7
    agent_grid: int = 3
    pool: str = 'average'

    # policy
    policy_layers: int = 4
    policy_width: int = 128
    policy_heads: int = 4
    action_bins: int = 64
    max_language_tokens: int = 12

    # optimisation
    batch_size: int = 32
    learning_rate: float = 3e-4
    lr_schedule: str = 'cosine'
    warmup_steps: int = 200
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    steps: int = 20000
    log_every: int = 50

    # evaluation
    eval_every: int = 1000
    eval_rollouts: int = 100
    eval_seed: int = 100000
    grip_close_margin: float = 0.0
    workers: int = 1

    # reproducibility and outputs
    seed: int = 0
    deterministic: bool = True
    output_dir: str = 'runs/default'

    def validate(self) -> 'TrainConfig':
        """Raise ParameterError on the first invalid value."""
        positive = (
            'episodes', 'image_size', 'patch_size', 'max_episode_steps', 'feature_dim',
            'object_slots', 'agent_grid', 'policy_layers', 'policy_width', 'policy_heads',
            'action_bins', 'max_language_tokens', 'batch_size', 'steps', 'log_every',
            'eval_every', 'workers',
        )
        for key in positive:
            if getattr(self, key) <= 0:
                raise ParameterError(f"{key} must be positive, got {getattr(self, key)}")
        if self.eval_rollouts < 0 or self.warmup_steps < 0:
            raise ParameterError("eval_rollouts and warmup_steps must be non-negative")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.image_size % self.patch_size:
            raise ParameterError(
                f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}"
            )
        if self.agent_grid % 2 == 0:
            raise ParameterError(f"agent_grid must be odd, got {self.agent_grid}")
        if self.agent_grid > self.image_size // self.patch_size:
            raise ParameterError(f"agent_grid {self.agent_grid} exceeds the patch grid")
        if self.policy_width % self.policy_heads:
            raise ParameterError("policy_width must be divisible by policy_heads")
        if not 0.0 < self.detector_threshold < 1.0:
            raise ParameterError(f"detector_threshold must lie in (0, 1), got {self.detector_threshold}")
        if not 0.0 <= self.grip_close_margin <= 1.0:
            raise ParameterError("grip_close_margin must lie in [0, 1]")
        choices = {
            'tokenizer_mode': TOKENIZER_MODES,
            'pool': POOL_MODES,
            'encoder_mode': ENCODER_MODES,
            'mask_source': MASK_SOURCES,
            'keypoint_source': KEYPOINT_SOURCES,
            'lr_schedule': LR_SCHEDULES,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ParameterError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.keypoint_source == 'learned' and not self.detector_path:
            raise ParameterError("keypoint_source 'learned' needs detector_path")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> 'TrainConfig':
        return dataclasses.replace(self, **changes)


def _coerce(name: str, kind: type, value: Any) -> Any:
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ('1', 'true', 'yes', 'on'):
            return True
        if text in ('0', 'false', 'no', 'off'):
            return False
        raise ParameterError(f"{name} expects a boolean, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ParameterError(f"{name} expects {kind.__name__}, got {value!r}") from e


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def from_dict(values: Dict[str, Any], base: Optional[TrainConfig] = None) -> TrainConfig:
    """Apply flat key-value pairs on top of base (or defaults)."""
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ParameterError(f"Unknown config keys: {', '.join(unknown)}")
    coerced = {k: _coerce(k, _FIELD_TYPES[k], v) for k, v in values.items()}
    return dataclasses.replace(base or TrainConfig(), **coerced)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """Defaults < file < overrides, validated."""
    cfg = TrainConfig()
    if path:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
        except OSError as e:
            raise DataError(f"Could not read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ParameterError(f"Config {path} is not valid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ParameterError(f"Config {path} must be a flat mapping")
        nested = [k for k, v in raw.items() if isinstance(v, (dict, list))]
        if nested:
            raise ParameterError(f"Config {path} must be flat; nested keys: {', '.join(nested)}")
        cfg = from_dict(raw, cfg)
    if overrides:
        cfg = from_dict(overrides, cfg)
    return cfg.validate()


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def save_config(cfg: TrainConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dump_config(cfg), encoding='utf-8')
    except OSError as e:
        raise DataError(f"Could not write config to {path}: {e}") from e
    return path


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode('utf-8')).hexdigest()[:16]


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """Add one --flag per config key (underscores become dashes)."""
    group = parser.add_argument_group('Config keys (override --config)')
    for name, kind in _FIELD_TYPES.items():
        flag = '--' + name.replace('_', '-')
        metavar = 'BOOL' if kind is bool else kind.__name__.upper()
        group.add_argument(flag, dest=f'cfg_{name}', default=None, metavar=metavar,
                           help=f"{name} (default: {getattr(TrainConfig, name, None)})")


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        name: getattr(args, f'cfg_{name}')
        for name in _FIELD_TYPES
        if getattr(args, f'cfg_{name}', None) is not None
    }
