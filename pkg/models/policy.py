"""
Action-token policy: vocabulary, action binning and a tiny causal transformer.

Sequence layout (positions left to right):
    BOS, l_1..l_J (PAD-filled to J_max), SEP, v_1..v_T, a_1..a_6
Action token a_i is predicted at the position preceding it, so the logits at
the SEP-to-a_6 tail give the 7 action distributions. Argmax ties go to the
lowest bin id.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from core.errors import DataError, ParameterError
from sim.scene import PALETTE, SHAPES, Action
from utils.gradcheck import check_gradients


ACTION_DIMS = 7
PAD, BOS, SEP = 0, 1, 2
SPECIAL_TOKENS = ('<pad>', '<bos>', '<sep>')
GRAMMAR_WORDS = ('place', 'the', 'in', 'front', 'left', 'of') + tuple(PALETTE) + SHAPES


class Vocabulary:
    """Disjoint id ranges: specials, template words, then action bins."""

    def __init__(self, n_bins: int = 64, max_language_tokens: int = 12):
        if n_bins < 2:
            raise ParameterError(f"Need at least 2 action bins, got {n_bins}")
        self.n_bins = n_bins
        self.max_language_tokens = max_language_tokens
        self.words = SPECIAL_TOKENS + GRAMMAR_WORDS
        self.word_ids = {w: i for i, w in enumerate(self.words)}
        self.action_offset = len(self.words)

    @property
    def size(self) -> int:
        return self.action_offset + self.n_bins

    def encode_instruction(self, text: str) -> List[int]:
        words = text.strip().lower().split()
        if len(words) > self.max_language_tokens:
            raise ParameterError(
                f"Instruction has {len(words)} words, at most {self.max_language_tokens} fit"
            )
        try:
            ids = [self.word_ids[w] for w in words]
        except KeyError as e:
            raise DataError(f"Word {e.args[0]!r} is not in the template vocabulary") from e
        return ids + [PAD] * (self.max_language_tokens - len(ids))

    def decode_instruction(self, ids: Sequence[int]) -> str:
        return ' '.join(self.words[i] for i in ids if i >= len(SPECIAL_TOKENS) and i < self.action_offset)

    def action_token(self, bin_id: int) -> int:
        return self.action_offset + int(bin_id)


class ActionBinning:
    """Uniform per-dimension bins over the [1st, 99th] percentile range."""

    MIN_WIDTH = 1e-3

    def __init__(self, n_bins: int = 64):
        self.n_bins = n_bins
        self.lo: Optional[np.ndarray] = None
        self.hi: Optional[np.ndarray] = None

    @property
    def fitted(self) -> bool:
        return self.lo is not None

    @property
    def bin_width(self) -> np.ndarray:
        self._require_fitted()
        return (self.hi - self.lo) / self.n_bins

    def _require_fitted(self) -> None:
        if not self.fitted:
            raise ParameterError("Action binning has not been fitted")

    def fit(self, actions: np.ndarray, low_pct: float = 1.0, high_pct: float = 99.0) -> 'ActionBinning':
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, ACTION_DIMS)
        if actions.shape[0] == 0:
            raise DataError("Cannot fit binning on zero actions")
        lo = np.percentile(actions, low_pct, axis=0)
        hi = np.percentile(actions, high_pct, axis=0)
        narrow = (hi - lo) < self.MIN_WIDTH
        lo[narrow] -= self.MIN_WIDTH
        hi[narrow] += self.MIN_WIDTH
        self.lo, self.hi = lo, hi
        return self

    def edges(self) -> np.ndarray:
        """(7, n_bins + 1) bin boundaries lo + i * width."""
        self._require_fitted()
        return self.lo[:, None] + np.arange(self.n_bins + 1)[None, :] * self.bin_width[:, None]

    def encode(self, actions: np.ndarray) -> np.ndarray:
        """(..., 7) continuous values -> (..., 7) bin ids; out-of-range clips to edge bins."""
        actions = np.asarray(actions, dtype=np.float64)
        edges = self.edges()
        ids = np.empty(actions.shape, dtype=np.int64)
        for d in range(ACTION_DIMS):
            # bins are [e_i, e_i+1); the last one also takes hi
            ids[..., d] = np.searchsorted(edges[d], actions[..., d], side='right') - 1
        return np.clip(ids, 0, self.n_bins - 1)

    def decode(self, ids: np.ndarray) -> np.ndarray:
        """Bin centres."""
        self._require_fitted()
        ids = np.asarray(ids, dtype=np.int64)
        return self.lo + (ids + 0.5) * self.bin_width

    def to_dict(self) -> Dict:
        self._require_fitted()
        return {'n_bins': self.n_bins, 'lo': self.lo.tolist(), 'hi': self.hi.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> 'ActionBinning':
        binning = cls(int(data['n_bins']))
        binning.lo = np.asarray(data['lo'], dtype=np.float64)
        binning.hi = np.asarray(data['hi'], dtype=np.float64)
        return binning


def bin_encode(action: Action, binning: ActionBinning) -> np.ndarray:
    return binning.encode(action.to_vector())


def bin_decode(ids: Sequence[int], binning: ActionBinning) -> Action:
    return Action.from_vector(binning.decode(np.asarray(ids)))


@dataclass
class PolicyConfig:
    layers: int = 4
    width: int = 128
    heads: int = 4
    n_bins: int = 64
    feature_dim: int = 64
    max_language_tokens: int = 12
    max_visual_tokens: int = 64

    @property
    def max_len(self) -> int:
        return 1 + self.max_language_tokens + 1 + self.max_visual_tokens + ACTION_DIMS - 1


def causal_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     key_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
    """(B, H, L, dh) scaled dot-product attention with a causal mask; padded keys never attended."""
    length = q.shape[2]
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    blocked = torch.ones(length, length, dtype=torch.bool).triu(1)
    if key_padding is not None:
        blocked = blocked | key_padding[:, None, None, :]
    scores = scores.masked_fill(blocked, float('-inf'))
    return scores.softmax(dim=-1) @ v


class CausalBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x: torch.Tensor, key_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, length, width = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(width, dim=2)
        shape = (b, length, self.heads, width // self.heads)
        q, k, v = (t.view(shape).transpose(1, 2) for t in (q, k, v))
        attended = causal_attention(q, k, v, key_padding).transpose(1, 2).reshape(b, length, width)
        x = x + self.proj(attended)
        return x + self.mlp(self.ln2(x))


class ActionPolicy(nn.Module):
    """Decoder-only transformer over [BOS, language, SEP, visual, actions]."""

    def __init__(self, config: PolicyConfig, vocab: Vocabulary, seed: int = 0):
        super().__init__()
        if config.width % config.heads:
            raise ParameterError("Policy width must be divisible by heads")
        self.config = config
        self.vocab = vocab
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = nn.Embedding(vocab.size, config.width)
            self.projector = nn.Sequential(
                nn.Linear(config.feature_dim, config.width), nn.GELU(), nn.Linear(config.width, config.width),
            )
            self.position = nn.Parameter(torch.randn(config.max_len, config.width) * 0.02)
            self.blocks = nn.ModuleList(CausalBlock(config.width, config.heads) for _ in range(config.layers))
            self.ln_f = nn.LayerNorm(config.width)
            self.head = nn.Linear(config.width, config.n_bins)

    def forward(self, lang_ids: torch.Tensor, visual: torch.Tensor,
                action_prefix: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Logits over action bins for each predicted action position.

        Args:
            lang_ids: (B, J) language ids, PAD-filled
            visual: (B, T, D) visual tokens
            action_prefix: (B, m) bin ids of the first m actions, 0 <= m <= 6

        Returns:
            (B, m + 1, n_bins) logits for actions 1..m+1
        """
        b, j = lang_ids.shape
        t = visual.shape[1]
        m = 0 if action_prefix is None else action_prefix.shape[1]
        if j > self.config.max_language_tokens or t > self.config.max_visual_tokens or m >= ACTION_DIMS:
            raise ParameterError(
                f"Sequence overflow: J={j}, T={t}, actions={m} "
                f"(limits {self.config.max_language_tokens}, {self.config.max_visual_tokens}, {ACTION_DIMS - 1})"
            )
        bos = torch.full((b, 1), BOS, dtype=torch.long)
        sep = torch.full((b, 1), SEP, dtype=torch.long)
        parts = [self.embed(torch.cat([bos, lang_ids, sep], dim=1)), self.projector(visual)]
        if m:
            parts.append(self.embed(action_prefix + self.vocab.action_offset))
        x = torch.cat(parts, dim=1)
        x = x + self.position[:x.shape[1]]

        padding = torch.zeros(b, x.shape[1], dtype=torch.bool)
        padding[:, 1:1 + j] = lang_ids == PAD
        for block in self.blocks:
            x = block(x, padding)
        tail = self.ln_f(x[:, -(m + 1):])
        return self.head(tail)

    def action_logits(self, lang_ids: torch.Tensor, visual: torch.Tensor,
                      action_ids: torch.Tensor) -> torch.Tensor:
        """Teacher-forced (B, 7, n_bins) logits."""
        return self(lang_ids, visual, action_ids[:, :ACTION_DIMS - 1])

    def greedy_decode(self, lang_ids: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
        """(B, 7) argmax bin ids, decoded one position at a time."""
        ids = torch.zeros((lang_ids.shape[0], 0), dtype=torch.long)
        with torch.no_grad():
            for _ in range(ACTION_DIMS):
                logits = self(lang_ids, visual, ids if ids.shape[1] else None)[:, -1]
                ids = torch.cat([ids, first_argmax(logits).unsqueeze(1)], dim=1)
        return ids


def first_argmax(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over the last axis with ties resolved to the lowest index."""
    best = logits.max(dim=-1, keepdim=True).values
    hits = (logits == best).to(torch.long)
    return (hits.cumsum(dim=-1) == 0).sum(dim=-1)


def action_loss(policy: ActionPolicy, lang_ids: torch.Tensor, visual: torch.Tensor,
                action_ids: torch.Tensor) -> torch.Tensor:
    logits = policy.action_logits(lang_ids, visual, action_ids)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), action_ids.reshape(-1))


def action_token_accuracy(policy: ActionPolicy, lang_ids: torch.Tensor, visual: torch.Tensor,
                          action_ids: torch.Tensor) -> float:
    """Teacher-forced per-token argmax accuracy over the 7 action positions."""
    with torch.no_grad():
        logits = policy.action_logits(lang_ids, visual, action_ids)
    return float((first_argmax(logits) == action_ids).to(torch.float64).mean())


def apply_grip_margin(action: Action, margin: float) -> Action:
    """Close a closing gripper a little further than predicted."""
    if margin and action.grip < 0.5:
        return Action(action.dpos, action.drot, max(0.0, action.grip - margin))
    return action


def predict_action(instruction: str, visual_tokens, policy: ActionPolicy, binning: ActionBinning,
                   grip_close_margin: float = 0.0) -> Action:
    """Greedy decode of the 7 action tokens for one frame."""
    tokens = getattr(visual_tokens, 'tokens', visual_tokens)
    lang = torch.tensor([policy.vocab.encode_instruction(instruction)], dtype=torch.long)
    dtype = next(policy.parameters()).dtype
    ids = policy.greedy_decode(lang, tokens.unsqueeze(0).to(dtype))[0].numpy()
    return apply_grip_margin(bin_decode(ids, binning), grip_close_margin)


def policy_grad_check(policy: ActionPolicy, n_coords: int = 20, seed: int = 0,
                      n_visual: int = 5) -> float:
    """Cross-entropy gradient against finite differences."""
    gen = torch.Generator().manual_seed(seed)
    words = policy.vocab.encode_instruction('place the red cube in the blue bowl')
    lang = torch.tensor([words, words], dtype=torch.long)
    visual = torch.randn((2, n_visual, policy.config.feature_dim), generator=gen, dtype=torch.float64)
    actions = torch.randint(0, policy.config.n_bins, (2, ACTION_DIMS), generator=gen)
    return check_gradients(policy, lambda m: action_loss(m, lang, visual, actions),
                           n_coords=n_coords, seed=seed).max_rel_error
