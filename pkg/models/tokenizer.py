"""
Object- and agent-centric visual tokenization.

Modes and token counts (K patches, N slots, G agent grid side):
    oat           N object tokens then G*G agent tokens
    full-patch    all K patch rows in patch order
    single-token  one attention-pooled token over all K rows
    object-only   N object tokens

Object tokens pool the features of one slot; empty slots give zero vectors.
Agent tokens are raw feature rows from the G x G window around the gripper
keypoint, or G*G copies of the global feature mean when nothing is detected.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from core.config import POOL_MODES, TOKENIZER_MODES
from core.errors import ParameterError
from core.imaging import PatchGeometry, PixelPoint, pixel_to_patch, window_flat_indices
from core.masks import MaskSet
from utils.gradcheck import check_gradients


@dataclass(frozen=True)
class TokenizerConfig:
    mode: str = 'oat'
    n_slots: int = 7
    grid: int = 3
    pool: str = 'average'
    dim: int = 64

    def __post_init__(self):
        if self.mode not in TOKENIZER_MODES:
            raise ParameterError(f"Unknown tokenizer mode {self.mode!r}")
        if self.pool not in POOL_MODES:
            raise ParameterError(f"Unknown pool {self.pool!r}")
        if self.n_slots < 1 or self.dim < 1:
            raise ParameterError("n_slots and dim must be positive")
        if self.grid < 1 or self.grid % 2 == 0:
            raise ParameterError(f"Agent grid must be odd, got {self.grid}")

    @property
    def uses_masks(self) -> bool:
        return self.mode in ('oat', 'object-only')

    @property
    def uses_keypoint(self) -> bool:
        return self.mode == 'oat'

    @property
    def uses_attention(self) -> bool:
        return self.mode == 'single-token' or (self.uses_masks and self.pool == 'attention')

    def to_dict(self) -> Dict:
        return {'mode': self.mode, 'n_slots': self.n_slots, 'grid': self.grid,
                'pool': self.pool, 'dim': self.dim}


def token_count(config: TokenizerConfig, geom: PatchGeometry) -> int:
    if config.mode == 'full-patch':
        return geom.K
    if config.mode == 'single-token':
        return 1
    if config.mode == 'object-only':
        return config.n_slots
    return config.n_slots + config.grid ** 2


def reduction_ratio(config: TokenizerConfig, geom: PatchGeometry) -> float:
    return 1.0 - token_count(config, geom) / geom.K


@dataclass(frozen=True)
class Provenance:
    kind: str                 # 'object' | 'agent' | 'patch' | 'global'
    index: Union[int, Tuple[int, int], None] = None
    empty: bool = False

    def label(self) -> str:
        if self.kind == 'object':
            return f"object slot {self.index}" + (' (empty)' if self.empty else '')
        if self.kind == 'agent':
            return f"agent cell {self.index[0]},{self.index[1]}"
        if self.kind == 'patch':
            return f"patch {self.index}"
        return 'global'


@dataclass
class VisualTokens:
    tokens: torch.Tensor                     # (T, D)
    provenance: List[Provenance] = field(default_factory=list)
    agent_fallback: bool = False

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


class AttentionPool(nn.Module):
    """
    One learned query per slot over that slot's member patches.

    Scores are q_j . W_k v_i / sqrt(D); values are the raw member features,
    so equal keys reduce to average pooling.
    """

    def __init__(self, n_queries: int, dim: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(dim)
        self.queries = nn.Parameter((torch.rand((n_queries, dim), generator=gen) * 2 - 1) * bound)
        self.key = nn.Parameter((torch.rand((dim, dim), generator=gen) * 2 - 1) * bound)
        self.dim = dim

    def scores(self, features: torch.Tensor) -> torch.Tensor:
        """(B, K, D) -> (B, n_queries, K)"""
        keys = features @ self.key.T
        return torch.einsum('nd,bkd->bnk', self.queries, keys) / math.sqrt(self.dim)


def pool_slots(features: torch.Tensor, assignment: torch.Tensor, n_slots: int,
               attention: Optional[AttentionPool] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Pool (B, K, D) features into (B, n_slots, D) slot tokens.

    Returns the tokens and the (B, n_slots) member counts.
    """
    members = nn.functional.one_hot(assignment, n_slots).transpose(1, 2).to(features.dtype)
    counts = members.sum(dim=2)
    if attention is None:
        weights = members / counts.clamp(min=1.0).unsqueeze(2)
    else:
        scores = attention.scores(features)
        scores = scores.masked_fill(members == 0, torch.finfo(scores.dtype).min)
        weights = scores.softmax(dim=2) * (counts > 0).unsqueeze(2).to(features.dtype)
    return weights @ features, counts


def attention_pool_grad_check(pool: AttentionPool, n_coords: int = 20, seed: int = 0, K: int = 16) -> float:
    """Max relative error of attention-pool gradients against finite differences."""
    gen = torch.Generator().manual_seed(seed)
    n_slots = pool.queries.shape[0]
    features = torch.randn((2, K, pool.dim), generator=gen, dtype=torch.float64)
    assignment = torch.stack([torch.randperm(K, generator=gen) % n_slots for _ in range(2)])
    weights = torch.randn((2, n_slots, pool.dim), generator=gen, dtype=torch.float64)

    def loss_fn(module):
        tokens = pool_slots(features, assignment, n_slots, module)[0]
        return (tokens * weights).sum() + 0.5 * (tokens ** 2).sum()

    return check_gradients(pool, loss_fn, n_coords=n_coords, seed=seed).max_rel_error


def agent_windows(geom: PatchGeometry, keypoints: np.ndarray, grid: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Flat patch indices (B, G*G) around each (u, v) keypoint.

    Rows with a NaN keypoint are marked absent and get index 0 placeholders.
    """
    keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    present = ~np.isnan(keypoints).any(axis=1)
    windows = np.zeros((keypoints.shape[0], grid * grid), dtype=np.int64)
    cache: Dict[Tuple[int, int], np.ndarray] = {}
    for i in np.flatnonzero(present):
        center = pixel_to_patch(geom, PixelPoint(float(keypoints[i, 0]), float(keypoints[i, 1])))
        if center not in cache:
            cache[center] = window_flat_indices(geom, center, grid)
        windows[i] = cache[center]
    return windows, present


def gather_agent_tokens(features: torch.Tensor, windows: np.ndarray, present: np.ndarray) -> torch.Tensor:
    """Raw feature rows at the window indices; the global mean where absent."""
    b, _, d = features.shape
    index = torch.from_numpy(windows).unsqueeze(2).expand(b, windows.shape[1], d)
    rows = features.gather(1, index)
    if present.all():
        return rows
    fallback = features.mean(dim=1, keepdim=True).expand_as(rows)
    mask = torch.from_numpy(present).view(b, 1, 1)
    return torch.where(mask, rows, fallback)


class OatTokenizer(nn.Module):
    """Batched tokenizer; owns the attention-pool parameters when a mode needs them."""

    def __init__(self, config: TokenizerConfig, geom: PatchGeometry, seed: int = 0):
        super().__init__()
        if config.uses_keypoint and config.grid > min(geom.grid_h, geom.grid_w):
            raise ParameterError(f"Agent grid {config.grid} exceeds the {geom.grid_h}x{geom.grid_w} patch grid")
        self.config = config
        self.geom = geom
        self.attention: Optional[AttentionPool] = None
        if config.mode == 'single-token':
            self.attention = AttentionPool(1, config.dim, seed)
        elif config.uses_attention:
            self.attention = AttentionPool(config.n_slots, config.dim, seed)

    @property
    def n_tokens(self) -> int:
        return token_count(self.config, self.geom)

    def forward(self, features: torch.Tensor, assignment: Optional[torch.Tensor] = None,
                keypoints: Optional[np.ndarray] = None) -> torch.Tensor:
        """
        Args:
            features: (B, K, D) patch features
            assignment: (B, K) slot ids, needed by oat and object-only
            keypoints: (B, 2) pixel (u, v), NaN rows for no detection; needed by oat
        """
        cfg = self.config
        if features.shape[1] != self.geom.K:
            raise ParameterError(f"Expected K={self.geom.K} feature rows, got {features.shape[1]}")
        if cfg.mode == 'full-patch':
            return features
        if cfg.mode == 'single-token':
            everything = torch.zeros(features.shape[:2], dtype=torch.long)
            return pool_slots(features, everything, 1, self.attention)[0]

        if assignment is None:
            raise ParameterError(f"Tokenizer mode {cfg.mode!r} needs slot masks")
        if assignment.shape != features.shape[:2]:
            raise ParameterError(f"Mask shape {tuple(assignment.shape)} does not match features")
        objects = pool_slots(features, assignment, cfg.n_slots, self.attention)[0]
        if cfg.mode == 'object-only':
            return objects
        if keypoints is None:
            raise ParameterError("Tokenizer mode 'oat' needs keypoints")
        windows, present = agent_windows(self.geom, keypoints, cfg.grid)
        return torch.cat([objects, gather_agent_tokens(features, windows, present)], dim=1)


# single-frame API

def _check_masks(feats, masks: MaskSet) -> None:
    if masks.K != feats.K:
        raise ParameterError(f"Mask covers K={masks.K} patches, features have K={feats.K}")


def _keypoint_array(kp) -> np.ndarray:
    point = getattr(kp, 'point', kp)
    if point is None or point.is_sentinel:
        return np.full((1, 2), np.nan)
    return np.array([[point.u, point.v]], dtype=np.float64)


def object_tokens(feats, masks: MaskSet, pool: str = 'average',
                  params: Optional[AttentionPool] = None) -> torch.Tensor:
    """(N, D) slot tokens for a PatchFeatureGrid and MaskSet."""
    _check_masks(feats, masks)
    if pool == 'attention' and params is None:
        raise ParameterError("Attention pooling needs AttentionPool parameters")
    if pool not in POOL_MODES:
        raise ParameterError(f"Unknown pool {pool!r}")
    assignment = torch.from_numpy(masks.assignment).unsqueeze(0)
    attention = params if pool == 'attention' else None
    return pool_slots(feats.features.unsqueeze(0), assignment, masks.n_slots, attention)[0][0]


def agent_tokens(feats, kp, grid: int = 3) -> torch.Tensor:
    """(G*G, D) raw rows around the keypoint, or G*G global means without one."""
    windows, present = agent_windows(feats.geom, _keypoint_array(kp), grid)
    return gather_agent_tokens(feats.features.unsqueeze(0), windows, present)[0]


def tokenize(feats, masks: Optional[MaskSet], kp, config: TokenizerConfig,
             params: Optional[Union[OatTokenizer, AttentionPool]] = None) -> VisualTokens:
    """Ordered visual tokens with provenance for one frame."""
    if config.dim != feats.dim:
        raise ParameterError(f"Tokenizer dim {config.dim} does not match feature dim {feats.dim}")
    tokenizer = params if isinstance(params, OatTokenizer) else None
    if tokenizer is None:
        tokenizer = OatTokenizer(config, feats.geom)
        if isinstance(params, AttentionPool):
            tokenizer.attention = params
    if config.uses_masks:
        if masks is None:
            raise ParameterError(f"Tokenizer mode {config.mode!r} needs masks")
        _check_masks(feats, masks)
        if masks.n_slots != config.n_slots:
            raise ParameterError(f"MaskSet has {masks.n_slots} slots, config expects {config.n_slots}")
    assignment = torch.from_numpy(masks.assignment).unsqueeze(0) if config.uses_masks else None
    keypoints = _keypoint_array(kp) if config.uses_keypoint else None
    with torch.no_grad():
        tokens = tokenizer(feats.features.unsqueeze(0), assignment, keypoints)[0]

    provenance: List[Provenance] = []
    fallback = False
    if config.mode == 'full-patch':
        provenance = [Provenance('patch', k) for k in range(feats.K)]
    elif config.mode == 'single-token':
        provenance = [Provenance('global')]
    else:
        counts = masks.counts
        provenance = [Provenance('object', j, bool(counts[j] == 0)) for j in range(config.n_slots)]
        if config.mode == 'oat':
            windows, present = agent_windows(feats.geom, keypoints, config.grid)
            fallback = not bool(present[0])
            for k in windows[0]:
                if fallback:
                    provenance.append(Provenance('global'))
                else:
                    provenance.append(Provenance('agent', divmod(int(k), feats.geom.grid_w)))
    return VisualTokens(tokens, provenance, fallback)
