"""
Patch feature encoder: v_1..v_K for an image.

linear-frozen: flattened patch pixels times a fixed seeded projection.
conv-trained: strided conv stack whose stride product equals patch_size.
Both have a receptive field of exactly one patch.
"""

import math
from dataclasses import dataclass
from typing import List

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from core.config import ENCODER_MODES
from core.errors import GeometryError, ParameterError
from core.imaging import Image, PatchGeometry, patchify
from utils.gradcheck import check_gradients


DEFAULT_DIM = 64
HIDDEN_CHANNELS = 32


@dataclass
class PatchFeatureGrid:
    geom: PatchGeometry
    features: torch.Tensor    # (K, D), row k = patch k in row-major order

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.geom.K:
            raise GeometryError(
                f"Features {tuple(self.features.shape)} do not match K={self.geom.K}"
            )

    @property
    def K(self) -> int:
        return self.geom.K

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


def seeded_uniform(shape, fan_in: int, generator: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator) * 2.0 - 1.0) * bound


def stride_plan(patch_size: int) -> List[int]:
    if patch_size > 2 and patch_size % 2 == 0:
        return [2, patch_size // 2]
    return [patch_size]


def module_dtype(module: nn.Module) -> torch.dtype:
    for tensor in list(module.parameters()) + list(module.buffers()):
        return tensor.dtype
    return torch.get_default_dtype()


class PatchEncoder(nn.Module):
    """Encoder parameters; call on (B, 3, H, W) to get (B, K, D)."""

    def __init__(self, mode: str = 'conv-trained', dim: int = DEFAULT_DIM, patch_size: int = 14,
                 seed: int = 0):
        super().__init__()
        if mode not in ENCODER_MODES:
            raise ParameterError(f"Unknown encoder mode {mode!r}")
        self.mode = mode
        self.dim = dim
        self.patch_size = patch_size
        gen = torch.Generator().manual_seed(seed)

        if mode == 'linear-frozen':
            fan_in = 3 * patch_size * patch_size
            self.register_buffer('projection', seeded_uniform((fan_in, dim), fan_in, gen))
            self.register_buffer('bias', torch.zeros(dim))
            self.convs = nn.ModuleList()
        else:
            strides = stride_plan(patch_size)
            channels = [3] + [HIDDEN_CHANNELS] * (len(strides) - 1) + [dim]
            self.convs = nn.ModuleList()
            for c_in, c_out, s in zip(channels[:-1], channels[1:], strides):
                conv = nn.Conv2d(c_in, c_out, kernel_size=s, stride=s)
                fan_in = c_in * s * s
                with torch.no_grad():
                    conv.weight.copy_(seeded_uniform(conv.weight.shape, fan_in, gen))
                    conv.bias.copy_(seeded_uniform(conv.bias.shape, fan_in, gen))
                self.convs.append(conv)

    @property
    def trainable(self) -> bool:
        return self.mode == 'conv-trained'

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        b, c, h, w = images.shape
        ps = self.patch_size
        if c != 3 or h % ps or w % ps:
            raise GeometryError(f"Input {tuple(images.shape)} incompatible with patch size {ps}")
        if self.mode == 'linear-frozen':
            patches = F.unfold(images, kernel_size=ps, stride=ps).transpose(1, 2)
            return patches @ self.projection + self.bias
        x = images
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.gelu(x)
        return x.flatten(2).transpose(1, 2)

    def get_config(self) -> dict:
        return {'mode': self.mode, 'dim': self.dim, 'patch_size': self.patch_size}


def encode(img: Image, params: PatchEncoder) -> PatchFeatureGrid:
    """Patch features of a single image."""
    geom = patchify(img, params.patch_size)
    dtype = module_dtype(params)
    x = torch.from_numpy(np.ascontiguousarray(img.data)).to(dtype).unsqueeze(0)
    with torch.no_grad():
        features = params(x)[0]
    return PatchFeatureGrid(geom, features)


def encoder_grad_check(params: PatchEncoder, n_coords: int = 5, seed: int = 0,
                       loss_scale: float = 1.0, image_size: int = 28) -> float:
    """Max relative error of encoder gradients against finite differences."""
    if not params.trainable:
        raise ParameterError("Gradient check needs the conv-trained encoder")
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand((2, 3, image_size, image_size), generator=gen, dtype=torch.float64)
    weights = torch.randn((2, (image_size // params.patch_size) ** 2, params.dim),
                          generator=gen, dtype=torch.float64)

    def loss_fn(module):
        feats = module(images)
        return loss_scale * ((feats * weights).sum() + 0.5 * (feats ** 2).sum())

    return check_gradients(params, loss_fn, n_coords=n_coords, seed=seed).max_rel_error
