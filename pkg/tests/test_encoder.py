"""
Patch encoder: shapes, locality, determinism and gradients.
"""

import numpy as np
import pytest
import torch

from core.errors import GeometryError, ParameterError
from core.imaging import Image
from models.encoder import PatchEncoder, encode, encoder_grad_check


@pytest.mark.parametrize('mode', ['linear-frozen', 'conv-trained'])
def test_feature_grid_shape(mode):
    encoder = PatchEncoder(mode, dim=16, patch_size=14)
    feats = encode(Image(np.zeros((3, 112, 112))), encoder)
    assert tuple(feats.features.shape) == (64, 16)
    assert feats.geom.K == 64


@pytest.mark.parametrize('mode', ['linear-frozen', 'conv-trained'])
def test_changing_one_patch_changes_only_its_row(mode):
    encoder = PatchEncoder(mode, dim=8, patch_size=14, seed=3)
    rng = np.random.default_rng(0)
    data = rng.random((3, 56, 56))
    base = encode(Image(data), encoder).features
    edited = data.copy()
    edited[:, 14:28, 28:42] = rng.random((3, 14, 14))
    changed = encode(Image(edited), encoder).features
    differs = (base - changed).abs().amax(dim=1) > 0
    assert differs.nonzero().flatten().tolist() == [1 * 4 + 2]


def test_linear_frozen_zero_image_gives_bias_rows():
    encoder = PatchEncoder('linear-frozen', dim=8, patch_size=14)
    feats = encode(Image(np.zeros((3, 28, 28))), encoder).features
    assert torch.allclose(feats, torch.zeros_like(feats))


def test_same_seed_same_weights():
    a = PatchEncoder('conv-trained', dim=8, seed=5)
    b = PatchEncoder('conv-trained', dim=8, seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_linear_frozen_has_no_trainable_parameters():
    encoder = PatchEncoder('linear-frozen', dim=8)
    assert not encoder.trainable
    assert not any(p.requires_grad for p in encoder.parameters())


def test_indivisible_input_rejected():
    encoder = PatchEncoder('conv-trained', dim=8, patch_size=14)
    with pytest.raises(GeometryError):
        encoder(torch.zeros(1, 3, 30, 28))


def test_unknown_mode_rejected():
    with pytest.raises(ParameterError):
        PatchEncoder('resnet')


def test_conv_gradients_match_finite_differences():
    encoder = PatchEncoder('conv-trained', dim=8, patch_size=14, seed=1)
    assert encoder_grad_check(encoder, n_coords=20) < 1e-4


def test_grad_check_needs_trainable_encoder():
    with pytest.raises(ParameterError):
        encoder_grad_check(PatchEncoder('linear-frozen', dim=8))
