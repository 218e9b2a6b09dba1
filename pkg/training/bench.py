"""
Throughput and attention-cost benchmark.

One policy of fixed size is timed on synthetic visual tokens for each token
budget T. Alongside the measured rates the table carries the analytic
per-layer attention cost, which grows with (J + T + 7)^2.
"""

import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch

from core.imaging import PatchGeometry
from models.policy import ACTION_DIMS, ActionPolicy, PolicyConfig, Vocabulary, action_loss, causal_attention
from models.tokenizer import TokenizerConfig, token_count
from sim.render import DEFAULT_GEOMETRY


logger = logging.getLogger(__name__)

DEFAULT_BUDGETS = (1, 7, 16, 32, 64)
BENCH_INSTRUCTION = 'place the red cube in the blue bowl'


def analytic_length(J: int, T: int) -> int:
    return J + T + ACTION_DIMS


def analytic_attention_ratio(J: int, Ta: int, Tb: int) -> float:
    """Attention cost of T=Ta relative to T=Tb."""
    return (analytic_length(J, Ta) / analytic_length(J, Tb)) ** 2


def attention_ops(J: int, T: int, width: int, layers: int) -> int:
    """Multiply-adds of QK^T and the weighted sum of V over all layers."""
    return 2 * layers * analytic_length(J, T) ** 2 * width


@dataclass
class BenchRow:
    label: str
    tokens: int
    examples_per_sec: float
    seconds_per_example: float
    attention_seconds_per_example: float
    attention_ops: int
    analytic_ratio: float = 1.0
    measured_ratio: float = 1.0
    attention_ratio: float = 1.0

    def within(self, factor: float = 2.0) -> bool:
        """Isolated attention ratio within factor of the analytic one."""
        return self.analytic_ratio / factor <= self.attention_ratio <= self.analytic_ratio * factor


def _entry(item: Union[TokenizerConfig, int], geom: PatchGeometry):
    if isinstance(item, TokenizerConfig):
        n = token_count(item, geom)
        label = f'oat(N={item.n_slots},G={item.grid})' if item.mode == 'oat' else item.mode
        return label, n
    return f'T={int(item)}', int(item)


def _time(fn: Callable[[], None], repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_throughput(configs: Sequence[Union[TokenizerConfig, int]] = DEFAULT_BUDGETS,
                     geom: PatchGeometry = DEFAULT_GEOMETRY,
                     policy_config: Optional[PolicyConfig] = None,
                     batch_size: int = 16, repeats: int = 5, warmup: int = 1,
                     seed: int = 0) -> List[BenchRow]:
    """
    Time policy forward+backward per example for each token budget.

    configs holds tokenizer configs (T from the token-count law) or raw
    token counts. Ratios are taken against the largest budget.
    """
    entries = [_entry(item, geom) for item in configs]
    if not entries:
        return []
    t_max = max(t for _, t in entries)
    base = policy_config or PolicyConfig()
    config = PolicyConfig(base.layers, base.width, base.heads, base.n_bins, base.feature_dim,
                          base.max_language_tokens, max(base.max_visual_tokens, t_max))
    vocab = Vocabulary(config.n_bins, config.max_language_tokens)
    policy = ActionPolicy(config, vocab, seed)
    J = config.max_language_tokens
    gen = torch.Generator().manual_seed(seed)
    lang = torch.tensor([vocab.encode_instruction(BENCH_INSTRUCTION)] * batch_size, dtype=torch.long)
    actions = torch.randint(0, config.n_bins, (batch_size, ACTION_DIMS), generator=gen)
    dh = config.width // config.heads

    rows = []
    for label, t in entries:
        visual = torch.randn((batch_size, t, config.feature_dim), generator=gen)

        def step():
            policy.zero_grad()
            action_loss(policy, lang, visual, actions).backward()

        length = J + 2 + t + ACTION_DIMS - 1
        q, k, v = (torch.randn((batch_size, config.heads, length, dh), generator=gen, requires_grad=True)
                   for _ in range(3))

        def attend():
            causal_attention(q, k, v).sum().backward()

        seconds = _time(step, repeats, warmup) / batch_size
        attn_seconds = _time(attend, repeats, warmup) * config.layers / batch_size
        rows.append(BenchRow(label, t, 1.0 / seconds, seconds, attn_seconds,
                             attention_ops(J, t, config.width, config.layers)))
        logger.info("bench %s: T=%d, %.1f examples/s", label, t, 1.0 / seconds)

    reference = next(r for r in rows if r.tokens == t_max)
    for row in rows:
        row.analytic_ratio = analytic_attention_ratio(J, t_max, row.tokens)
        row.measured_ratio = reference.seconds_per_example / row.seconds_per_example
        row.attention_ratio = reference.attention_seconds_per_example / row.attention_seconds_per_example
    return rows


def is_monotone(rows: Sequence[BenchRow], key: str = 'seconds_per_example') -> bool:
    """Per-example time non-decreasing in T."""
    ordered = sorted(rows, key=lambda r: r.tokens)
    values = [getattr(r, key) for r in ordered]
    return all(a <= b for a, b in zip(values, values[1:]))


def bench_table(rows: Sequence[BenchRow]) -> List[Dict]:
    return [asdict(r) for r in rows]
