"""
Gripper keypoint locator.

heuristic: centroid of pixels in the reserved gripper colour.
learned:   small conv net, soft-argmax heatmap for (u, v) plus a sigmoid
           confidence head trained on simulator keypoints and gripper-free
           negatives.

A missing gripper is a value (point None), never an exception.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from core.checkpoint import load_checkpoint, save_checkpoint
from core.errors import DataError, ParameterError
from core.imaging import Image, PatchGeometry, PixelPoint
from core.masks import quantize_colors
from sim.render import render
from sim.scene import GRIPPER_COLOR
from utils.gradcheck import check_gradients


logger = logging.getLogger(__name__)

DETECTOR_MODES = ('heuristic', 'learned')
DEFAULT_THRESHOLD = 0.5
# matched pixels at which heuristic confidence saturates
HEURISTIC_FULL_PIXELS = 20
KEYPOINT_WEIGHT = 50.0

_GRIPPER_KEY = int(quantize_colors(np.array(GRIPPER_COLOR)))


@dataclass(frozen=True)
class KeypointPrediction:
    point: Optional[PixelPoint]
    confidence: float

    @property
    def detected(self) -> bool:
        return self.point is not None


NO_DETECTION = KeypointPrediction(None, 0.0)


class GripperDetectorNet(nn.Module):
    """Conv trunk -> (soft-argmax keypoint in pixels, confidence logit)."""

    def __init__(self, width: int = 16, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.conv1 = nn.Conv2d(3, width, 3, padding=1)
            self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
            self.conv3 = nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1)
            self.heat = nn.Conv2d(2 * width, 1, 1)
            self.confidence = nn.Linear(4 * width, 1)

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h, w = images.shape[-2:]
        x = F.gelu(self.conv1(images))
        x = F.gelu(self.conv2(x))
        x = F.gelu(self.conv3(x))

        logits = self.heat(x).flatten(1)
        gh, gw = x.shape[-2:]
        weights = logits.softmax(dim=1).view(-1, gh, gw)
        us = (torch.arange(gw, dtype=x.dtype) + 0.5) * (w / gw)
        vs = (torch.arange(gh, dtype=x.dtype) + 0.5) * (h / gh)
        u = (weights.sum(dim=1) * us).sum(dim=1)
        v = (weights.sum(dim=2) * vs).sum(dim=1)

        pooled = torch.cat([x.mean(dim=(2, 3)), x.amax(dim=(2, 3))], dim=1)
        return torch.stack([u, v], dim=1), self.confidence(pooled).squeeze(1)


@dataclass
class DetectorParams:
    mode: str = 'heuristic'
    threshold: float = DEFAULT_THRESHOLD
    net: Optional[GripperDetectorNet] = None

    def __post_init__(self):
        if self.mode not in DETECTOR_MODES:
            raise ParameterError(f"Unknown detector mode {self.mode!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"Detector threshold must lie in (0, 1), got {self.threshold}")
        if self.mode == 'learned' and self.net is None:
            raise ParameterError("Learned detector needs network weights")


def _as_batch(images: Union[Image, np.ndarray]) -> np.ndarray:
    if isinstance(images, Image):
        return images.to_uint8()[None]
    images = np.asarray(images)
    return images[None] if images.ndim == 3 else images


def _finalize(u: float, v: float, confidence: float, width: int, height: int,
              threshold: float) -> KeypointPrediction:
    if confidence < threshold or not np.isfinite(u) or not np.isfinite(v):
        return KeypointPrediction(None, float(confidence))
    u = float(np.clip(u, 0.0, np.nextafter(width, 0)))
    v = float(np.clip(v, 0.0, np.nextafter(height, 0)))
    return KeypointPrediction(PixelPoint(u, v), float(confidence))


def detect_batch(images: np.ndarray, params: DetectorParams) -> List[KeypointPrediction]:
    """Predictions for a (B, H, W, 3) uint8 batch."""
    images = _as_batch(images)
    b, h, w, _ = images.shape
    if params.mode == 'heuristic':
        matched = quantize_colors(images) == _GRIPPER_KEY
        counts = matched.sum(axis=(1, 2))
        vs, us = np.arange(h) + 0.5, np.arange(w) + 0.5
        out = []
        for i in range(b):
            if counts[i] == 0:
                out.append(NO_DETECTION)
                continue
            rows, cols = np.nonzero(matched[i])
            conf = min(1.0, counts[i] / HEURISTIC_FULL_PIXELS)
            out.append(_finalize(us[cols].mean(), vs[rows].mean(), conf, w, h, params.threshold))
        return out

    net = params.net
    dtype = next(net.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(dtype) / 255.0
    with torch.no_grad():
        points, logits = net(x)
        conf = torch.sigmoid(logits)
    return [
        _finalize(float(points[i, 0]), float(points[i, 1]), float(conf[i]), w, h, params.threshold)
        for i in range(b)
    ]


def detect(img: Union[Image, np.ndarray], params: DetectorParams) -> KeypointPrediction:
    return detect_batch(_as_batch(img), params)[0]


# training data

@dataclass
class DetectorSamples:
    images: np.ndarray        # (F, H, W, 3) uint8
    keypoints: np.ndarray     # (F, 2), NaN rows for gripper-free frames
    patch_size: int = 14

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.keypoints).any(axis=1)

    def subset(self, index: np.ndarray) -> 'DetectorSamples':
        return DetectorSamples(self.images[index], self.keypoints[index], self.patch_size)


def build_detector_samples(episodes: Sequence, negative_fraction: float = 0.1, seed: int = 0,
                           patch_size: int = 14, limit: Optional[int] = None) -> DetectorSamples:
    """Stored frames with their keypoints plus gripper-free re-renders as negatives."""
    steps = [step for episode in episodes for step in episode.steps]
    if limit is not None:
        steps = steps[:limit]
    if not steps:
        raise DataError("No frames to build detector samples from")
    if not 0.0 <= negative_fraction < 1.0:
        raise ParameterError(f"negative_fraction must lie in [0, 1), got {negative_fraction}")

    images = [step.image.to_uint8() for step in steps]
    keypoints = [(step.keypoint.u, step.keypoint.v) for step in steps]
    geom = PatchGeometry.square(images[0].shape[0], patch_size)

    n_neg = int(round(negative_fraction * len(steps)))
    rng = np.random.default_rng(seed)
    for idx in rng.choice(len(steps), size=n_neg, replace=n_neg > len(steps)):
        image, _, kp = render(steps[int(idx)].state, geom, draw_gripper=False)
        images.append(image.to_uint8())
        keypoints.append((kp.u, kp.v))
    return DetectorSamples(np.stack(images), np.asarray(keypoints, dtype=np.float64), patch_size)


@dataclass
class DetectorTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 2e-3
    optimizer: str = 'adam'
    width: int = 16
    holdout_fraction: float = 0.1
    threshold: float = DEFAULT_THRESHOLD
    seed: int = 0
    log_every: int = 100


def detector_loss(net: nn.Module, images: torch.Tensor, keypoints: torch.Tensor,
                  present: torch.Tensor) -> torch.Tensor:
    """Weighted L2 on normalized keypoints (positives only) + BCE on presence."""
    h, w = images.shape[-2:]
    points, logits = net(images)
    scale = torch.tensor([w, h], dtype=points.dtype)
    conf_loss = F.binary_cross_entropy_with_logits(logits, present.to(logits.dtype))
    if not bool(present.any()):
        return conf_loss
    diff = (points[present] - keypoints[present]) / scale
    return KEYPOINT_WEIGHT * (diff ** 2).sum(dim=1).mean() + conf_loss


def _tensors(samples: DetectorSamples, index: np.ndarray, dtype=torch.float32):
    images = torch.from_numpy(samples.images[index]).permute(0, 3, 1, 2).to(dtype) / 255.0
    kps = torch.from_numpy(np.nan_to_num(samples.keypoints[index])).to(dtype)
    present = torch.from_numpy(samples.present[index])
    return images, kps, present


def split_holdout(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(fraction * n))
    if n_hold >= n:
        n_hold = 0
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def train_detector(samples: DetectorSamples, hp: Optional[DetectorTrainConfig] = None,
                   progress=None) -> Tuple[DetectorParams, Dict]:
    """Fit the learned detector; returns params and holdout metrics."""
    hp = hp or DetectorTrainConfig()
    if len(samples) == 0:
        raise DataError("Cannot train a detector on an empty dataset")
    if hp.optimizer not in ('adam', 'sgd'):
        raise ParameterError(f"Unknown optimizer {hp.optimizer!r}")

    train_idx, hold_idx = split_holdout(len(samples), hp.holdout_fraction, hp.seed)
    net = GripperDetectorNet(hp.width, hp.seed)
    if hp.optimizer == 'adam':
        opt = torch.optim.Adam(net.parameters(), lr=hp.learning_rate)
    else:
        opt = torch.optim.SGD(net.parameters(), lr=hp.learning_rate)

    rng = np.random.default_rng(hp.seed)
    losses = []
    net.train()
    for step in range(hp.steps):
        batch = train_idx[rng.integers(len(train_idx), size=hp.batch_size)]
        images, kps, present = _tensors(samples, batch)
        loss = detector_loss(net, images, kps, present)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
        if progress:
            progress(1)
        if hp.log_every and (step + 1) % hp.log_every == 0:
            logger.debug("detector step %d loss %.5f", step + 1, losses[-1])
    net.eval()

    params = DetectorParams('learned', hp.threshold, net)
    eval_set = samples.subset(hold_idx) if hold_idx.size else samples.subset(train_idx)
    metrics = eval_detector(params, eval_set)
    metrics.update({'train_frames': int(train_idx.size), 'holdout_frames': int(hold_idx.size),
                    'final_loss': losses[-1] if losses else float('nan'), 'losses': losses})
    logger.info("Detector trained: hit-rate %.3f, median error %.2f px",
                metrics['hit_rate'], metrics['median_px_error'])
    return params, metrics


def detector_metrics(predictions: Sequence[KeypointPrediction], samples: DetectorSamples) -> Dict:
    """Median pixel error, hit-rate at patch_size/2, miss and false-positive rates."""
    if len(predictions) != len(samples):
        raise ParameterError("One prediction per sample is required")
    present = samples.present
    errors, hits, misses, false_pos = [], 0, 0, 0
    for pred, kp, pos in zip(predictions, samples.keypoints, present):
        if not pos:
            false_pos += int(pred.detected)
            continue
        if not pred.detected:
            misses += 1
            continue
        err = float(np.hypot(pred.point.u - kp[0], pred.point.v - kp[1]))
        errors.append(err)
        hits += int(err < samples.patch_size / 2)
    n_pos, n_neg = int(present.sum()), int((~present).sum())
    nan = float('nan')
    return {
        'frames': len(samples),
        'median_px_error': float(np.median(errors)) if errors else nan,
        'hit_rate': hits / n_pos if n_pos else nan,
        'miss_rate': misses / n_pos if n_pos else nan,
        'false_positive_rate': false_pos / n_neg if n_neg else nan,
    }


def eval_detector(params: DetectorParams, samples: DetectorSamples, batch_size: int = 256) -> Dict:
    predictions: List[KeypointPrediction] = []
    for start in range(0, len(samples), batch_size):
        predictions.extend(detect_batch(samples.images[start:start + batch_size], params))
    return detector_metrics(predictions, samples)


def detector_grad_check(net: GripperDetectorNet, n_coords: int = 20, seed: int = 0,
                        image_size: int = 28) -> float:
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand((3, 3, image_size, image_size), generator=gen, dtype=torch.float64)
    kps = torch.rand((3, 2), generator=gen, dtype=torch.float64) * image_size
    present = torch.tensor([True, True, False])
    return check_gradients(net, lambda m: detector_loss(m, images, kps, present),
                           n_coords=n_coords, seed=seed).max_rel_error


# persistence

def save_detector(params: DetectorParams, path: Union[str, Path]) -> Path:
    header = {'mode': params.mode, 'threshold': params.threshold}
    payload: Dict = {}
    if params.net is not None:
        header['width'] = params.net.conv1.out_channels
        payload['state_dict'] = params.net.state_dict()
    return save_checkpoint(path, 'detector', header, payload)


def load_detector(path: Union[str, Path], threshold: Optional[float] = None) -> DetectorParams:
    header, payload = load_checkpoint(path, 'detector')
    net = None
    if header.get('mode') == 'learned':
        try:
            net = GripperDetectorNet(int(header['width']))
            net.load_state_dict(payload['state_dict'])
        except (KeyError, RuntimeError) as e:
            raise DataError(f"{path}: detector weights do not load: {e}") from e
        net.eval()
    return DetectorParams(header.get('mode', 'heuristic'),
                          threshold if threshold is not None else float(header['threshold']), net)
