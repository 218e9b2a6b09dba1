"""
End-to-end model and closed-loop agent.

OatModel chains encoder -> tokenizer -> policy and owns the binning and
vocabulary; FrameAnnotator supplies the slot masks and keypoints the
tokenizer consumes, from the configured sources.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from core.checkpoint import load_checkpoint, save_checkpoint
from core.config import TrainConfig, from_dict
from core.errors import DataError
from core.imaging import Image, PatchGeometry
from core.masks import MaskSet
from models.encoder import PatchEncoder
from models.gripper import DetectorParams, detect_batch, load_detector
from models.policy import (
    ActionBinning, ActionPolicy, PolicyConfig, Vocabulary, apply_grip_margin, first_argmax,
)
from models.segmenter import normalize_ground_truth, segment_unsupervised
from models.tokenizer import OatTokenizer, TokenizerConfig, token_count
from sim.render import render
from sim.scene import Action, Instruction, SceneState


logger = logging.getLogger(__name__)

DETECT_CHUNK = 256


def tokenizer_config(cfg: TrainConfig) -> TokenizerConfig:
    return TokenizerConfig(cfg.tokenizer_mode, cfg.object_slots, cfg.agent_grid, cfg.pool, cfg.feature_dim)


def geometry(cfg: TrainConfig) -> PatchGeometry:
    return PatchGeometry.square(cfg.image_size, cfg.patch_size)


def uint8_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(B, H, W, 3) uint8 -> (B, 3, H, W) in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(dtype) / 255.0


class OatModel(nn.Module):
    """Encoder, tokenizer (with attention-pool params if any) and policy in one module."""

    def __init__(self, cfg: TrainConfig, binning: ActionBinning):
        super().__init__()
        self.cfg = cfg
        self.geom = geometry(cfg)
        self.binning = binning
        self.vocab = Vocabulary(cfg.action_bins, cfg.max_language_tokens)
        self.tokenizer_config = tokenizer_config(cfg)
        self.encoder = PatchEncoder(cfg.encoder_mode, cfg.feature_dim, cfg.patch_size, cfg.seed)
        self.tokenizer = OatTokenizer(self.tokenizer_config, self.geom, cfg.seed)
        policy_cfg = PolicyConfig(
            layers=cfg.policy_layers, width=cfg.policy_width, heads=cfg.policy_heads,
            n_bins=cfg.action_bins, feature_dim=cfg.feature_dim,
            max_language_tokens=cfg.max_language_tokens,
            max_visual_tokens=token_count(self.tokenizer_config, self.geom),
        )
        self.policy = ActionPolicy(policy_cfg, self.vocab, cfg.seed)

    @property
    def n_visual_tokens(self) -> int:
        return self.tokenizer.n_tokens

    def visual_tokens(self, images: torch.Tensor, assignment: Optional[torch.Tensor],
                      keypoints: Optional[np.ndarray]) -> torch.Tensor:
        return self.tokenizer(self.encoder(images), assignment, keypoints)

    def forward(self, images, assignment, keypoints, lang_ids, action_ids) -> torch.Tensor:
        """Teacher-forced (B, 7, n_bins) logits."""
        visual = self.visual_tokens(images, assignment, keypoints)
        return self.policy.action_logits(lang_ids, visual, action_ids)

    def loss_and_accuracy(self, images, assignment, keypoints, lang_ids, action_ids) -> Tuple[torch.Tensor, float]:
        logits = self(images, assignment, keypoints, lang_ids, action_ids)
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), action_ids.reshape(-1))
        accuracy = float((first_argmax(logits.detach()) == action_ids).to(torch.float64).mean())
        return loss, accuracy

    def predict_ids(self, images, assignment, keypoints, lang_ids) -> torch.Tensor:
        with torch.no_grad():
            visual = self.visual_tokens(images, assignment, keypoints)
        return self.policy.greedy_decode(lang_ids, visual)

    def header(self) -> Dict:
        return {
            'config': self.cfg.to_dict(),
            'binning': self.binning.to_dict(),
            'tokenizer': self.tokenizer_config.to_dict(),
            'vocab_size': self.vocab.size,
            'encoder': self.encoder.get_config(),
        }

    def save(self, path: Union[str, Path], step: int = 0,
             optimizer: Optional[torch.optim.Optimizer] = None, extra: Optional[Dict] = None) -> Path:
        header = dict(self.header(), step=step, **(extra or {}))
        payload = {'model': self.state_dict()}
        if optimizer is not None:
            payload['optimizer'] = optimizer.state_dict()
        return save_checkpoint(path, 'policy', header, payload)

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple['OatModel', Dict, Dict]:
        """Returns (model, header, payload); the payload keeps the optimizer state if saved."""
        header, payload = load_checkpoint(path, 'policy')
        try:
            cfg = from_dict(header['config'])
            model = cls(cfg, ActionBinning.from_dict(header['binning']))
            model.load_state_dict(payload['model'])
        except (KeyError, RuntimeError) as e:
            raise DataError(f"{path}: checkpoint does not match the model: {e}") from e
        return model, header, payload


class FrameAnnotator:
    """Slot masks and gripper keypoints for frames, from the configured sources."""

    def __init__(self, cfg: TrainConfig, detector: Optional[DetectorParams] = None):
        self.cfg = cfg
        self.geom = geometry(cfg)
        self.mask_source = cfg.mask_source
        self.keypoint_source = cfg.keypoint_source
        self.needs_masks = tokenizer_config(cfg).uses_masks
        self.needs_keypoints = tokenizer_config(cfg).uses_keypoint
        if detector is None and self.keypoint_source == 'learned' and self.needs_keypoints:
            detector = load_detector(cfg.detector_path, cfg.detector_threshold)
        if detector is None:
            detector = DetectorParams('heuristic', cfg.detector_threshold)
        self.detector = detector

    def masks(self, images: np.ndarray, gt_masks: Sequence[MaskSet],
              states: Sequence[SceneState]) -> Optional[np.ndarray]:
        if not self.needs_masks:
            return None
        n = self.cfg.object_slots
        if self.mask_source == 'oracle':
            slots = [normalize_ground_truth(m, s, n, self.geom) for m, s in zip(gt_masks, states)]
        else:
            slots = [segment_unsupervised(Image.from_uint8(img), n, self.cfg.patch_size) for img in images]
        return np.stack([m.assignment for m in slots])

    def keypoints(self, images: np.ndarray, gt_keypoints: np.ndarray) -> Optional[np.ndarray]:
        if not self.needs_keypoints:
            return None
        if self.keypoint_source == 'oracle':
            return np.asarray(gt_keypoints, dtype=np.float64).reshape(-1, 2)
        out = np.full((len(images), 2), np.nan)
        for start in range(0, len(images), DETECT_CHUNK):
            for i, pred in enumerate(detect_batch(images[start:start + DETECT_CHUNK], self.detector)):
                if pred.detected:
                    out[start + i] = (pred.point.u, pred.point.v)
        return out

    def annotate(self, images: np.ndarray, gt_masks: Sequence[MaskSet], states: Sequence[SceneState],
                 gt_keypoints: np.ndarray) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        return self.masks(images, gt_masks, states), self.keypoints(images, gt_keypoints)


class OatAgent:
    """Closed-loop policy: render the state, annotate, decode one action."""

    def __init__(self, model: OatModel, annotator: Optional[FrameAnnotator] = None,
                 grip_close_margin: Optional[float] = None):
        self.model = model.eval()
        self.annotator = annotator or FrameAnnotator(model.cfg)
        margin = model.cfg.grip_close_margin if grip_close_margin is None else grip_close_margin
        self.grip_close_margin = margin

    def __call__(self, state: SceneState, instruction: Instruction) -> Action:
        image, gt_masks, keypoint = render(state, self.model.geom)
        pixels = image.to_uint8()[None]
        assignment, keypoints = self.annotator.annotate(
            pixels, [gt_masks], [state], np.array([[keypoint.u, keypoint.v]])
        )
        lang = torch.tensor([self.model.vocab.encode_instruction(instruction.text)], dtype=torch.long)
        ids = self.model.predict_ids(
            uint8_to_tensor(pixels),
            torch.from_numpy(assignment) if assignment is not None else None,
            keypoints, lang,
        )[0].numpy()
        action = Action.from_vector(self.model.binning.decode(ids))
        return apply_grip_margin(action, self.grip_close_margin)
