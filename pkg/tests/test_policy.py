"""
Action binning, vocabulary and the causal action policy.
"""

import numpy as np
import pytest
import torch

from core.errors import DataError, ParameterError
from models.policy import (
    ACTION_DIMS, ActionBinning, ActionPolicy, PolicyConfig, Vocabulary, action_token_accuracy,
    apply_grip_margin, bin_decode, bin_encode, first_argmax, policy_grad_check, predict_action,
)
from sim.scene import Action


def unit_binning(n_bins=64):
    binning = ActionBinning(n_bins)
    binning.lo = np.full(ACTION_DIMS, -1.0)
    binning.hi = np.full(ACTION_DIMS, 1.0)
    return binning


def tiny_policy(seed=0, n_visual=5):
    config = PolicyConfig(layers=1, width=16, heads=2, n_bins=8, feature_dim=4,
                          max_language_tokens=12, max_visual_tokens=n_visual)
    return ActionPolicy(config, Vocabulary(8, 12), seed)


LANG = 'place the red cube in the blue bowl'


# value -> expected bin with 64 bins over [-1, 1]
EXPECTED_BINS = {
    -1.0: 0,
    1.0: 63,
    0.0: 32,
    2.0: 63,
    -2.0: 0,
    -0.99: 0,
    0.99: 63,
}


@pytest.mark.parametrize('value', list(EXPECTED_BINS))
def test_bin_encode_endpoints_and_midpoint(value):
    ids = unit_binning().encode(np.full(ACTION_DIMS, value))
    assert (ids == EXPECTED_BINS[value]).all()


def test_bin_decode_returns_centres():
    centres = unit_binning().decode(np.array([0, 32, 63]))
    assert centres.tolist() == pytest.approx([-1 + 1 / 64, 1 / 64, 1 - 1 / 64])


def test_action_roundtrip_within_half_bin():
    binning = unit_binning()
    action = Action(np.array([0.3, -0.2, 0.05]), np.array([0.0, 0.0, 0.1]), 1.0)
    decoded = bin_decode(bin_encode(action, binning), binning)
    assert np.abs(decoded.to_vector() - action.to_vector()).max() <= binning.bin_width.max() / 2 + 1e-12


@pytest.mark.parametrize('n_bins', [2, 7, 64, 256])
def test_bin_edges_belong_to_the_upper_bin(n_bins):
    rng = np.random.default_rng(n_bins)
    for _ in range(50):
        binning = ActionBinning(n_bins)
        binning.lo = rng.uniform(-3.0, 1.0, ACTION_DIMS)
        binning.hi = binning.lo + rng.uniform(1e-3, 4.0, ACTION_DIMS)
        edges = binning.edges()
        for i in range(n_bins):
            assert (binning.encode(edges[:, i]) == i).all()
            if i > 0:
                below = np.nextafter(edges[:, i], -np.inf)
                assert (binning.encode(below) == i - 1).all()
        assert (binning.encode(binning.hi) == n_bins - 1).all()
        ids = np.tile(np.arange(n_bins)[:, None], (1, ACTION_DIMS))
        assert (binning.encode(binning.decode(ids)) == ids).all()


def test_fit_widens_constant_dimensions():
    actions = np.zeros((10, ACTION_DIMS))
    actions[:, 0] = np.linspace(-0.05, 0.05, 10)
    binning = ActionBinning(16).fit(actions)
    assert (binning.hi - binning.lo >= ActionBinning.MIN_WIDTH).all()
    assert binning.lo[0] < 0 < binning.hi[0]


def test_unfitted_binning_rejected():
    with pytest.raises(ParameterError):
        ActionBinning(8).encode(np.zeros(ACTION_DIMS))


def test_binning_serialization():
    binning = unit_binning(16)
    again = ActionBinning.from_dict(binning.to_dict())
    assert again.n_bins == 16
    assert np.array_equal(again.lo, binning.lo)


def test_vocabulary_ranges_are_disjoint():
    vocab = Vocabulary(64, 12)
    ids = vocab.encode_instruction(LANG)
    assert len(ids) == 12
    assert max(ids) < vocab.action_offset
    assert vocab.action_token(0) == vocab.action_offset
    assert vocab.size == vocab.action_offset + 64
    assert vocab.decode_instruction(ids) == LANG


def test_vocabulary_errors():
    vocab = Vocabulary(8, 4)
    with pytest.raises(ParameterError):
        vocab.encode_instruction(LANG)
    with pytest.raises(DataError):
        Vocabulary(8, 12).encode_instruction('place the red spoon')


def test_first_argmax_breaks_ties_low():
    logits = torch.tensor([[1.0, 3.0, 3.0, 0.0], [5.0, 5.0, 5.0, 5.0]])
    assert first_argmax(logits).tolist() == [1, 0]


def test_logits_are_a_distribution():
    policy = tiny_policy()
    lang = torch.tensor([policy.vocab.encode_instruction(LANG)])
    visual = torch.randn(1, 5, 4)
    logits = policy(lang, visual)
    assert logits.shape == (1, 1, 8)
    assert torch.allclose(logits.softmax(dim=-1).sum(dim=-1), torch.ones(1, 1))


def test_action_positions_are_causal():
    policy = tiny_policy().double()
    lang = torch.tensor([policy.vocab.encode_instruction(LANG)])
    visual = torch.randn(1, 5, 4, dtype=torch.float64)
    a = torch.tensor([[1, 2, 3, 4, 5, 6, 7]])
    b = a.clone()
    b[0, 5] = 0
    la = policy.action_logits(lang, visual, a)
    lb = policy.action_logits(lang, visual, b)
    assert torch.allclose(la[:, :6], lb[:, :6], atol=1e-12)
    assert not torch.allclose(la[:, 6], lb[:, 6])


def test_overflow_is_rejected():
    policy = tiny_policy(n_visual=5)
    lang = torch.tensor([policy.vocab.encode_instruction(LANG)])
    with pytest.raises(ParameterError):
        policy(lang, torch.randn(1, 6, 4))


def test_greedy_decode_shape_and_range():
    policy = tiny_policy()
    lang = torch.tensor([policy.vocab.encode_instruction(LANG)] * 3)
    ids = policy.greedy_decode(lang, torch.randn(3, 5, 4))
    assert ids.shape == (3, ACTION_DIMS)
    assert int(ids.min()) >= 0 and int(ids.max()) < 8


def test_greedy_decode_matches_forced_argmax_on_own_output():
    policy = tiny_policy(seed=3).double()
    lang = torch.tensor([policy.vocab.encode_instruction(LANG)])
    visual = torch.randn(1, 5, 4, dtype=torch.float64)
    ids = policy.greedy_decode(lang, visual)
    with torch.no_grad():
        forced = first_argmax(policy.action_logits(lang, visual, ids))
    assert torch.equal(forced, ids)
    assert action_token_accuracy(policy, lang, visual, ids) == 1.0


def test_predict_action_is_finite():
    action = predict_action(LANG, torch.randn(5, 4), tiny_policy(), unit_binning(8))
    assert action.is_finite


def test_grip_margin_only_tightens_closing():
    closing = Action(grip=0.2)
    opening = Action(grip=0.8)
    assert apply_grip_margin(closing, 0.1).grip == pytest.approx(0.1)
    assert apply_grip_margin(closing, 0.5).grip == 0.0
    assert apply_grip_margin(opening, 0.1).grip == 0.8


def test_policy_gradients_match_finite_differences():
    assert policy_grad_check(tiny_policy(), n_coords=20) < 1e-4
