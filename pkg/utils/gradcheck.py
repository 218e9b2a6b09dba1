"""
Central finite-difference checks of autograd gradients.

Checks run on a float64 copy of the module, so the caller's module is never
modified. Relative error uses max(|analytic|, |numeric|, floor) as the
denominator; gradients smaller than the floor are compared absolutely.
"""

import copy
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np
import torch
from torch import nn


DEFAULT_EPS = 1e-5
DEFAULT_FLOOR = 1e-4


@dataclass
class GradCheckResult:
    max_rel_error: float = 0.0
    # (parameter name, flat index, analytic, numeric, relative error)
    records: List[Tuple[str, int, float, float, float]] = field(default_factory=list)


def relative_error(analytic: float, numeric: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(module: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor],
                    n_coords: int = 20, seed: int = 0, eps: float = DEFAULT_EPS,
                    floor: float = DEFAULT_FLOOR) -> GradCheckResult:
    """
    Compare d loss_fn(module) / d theta against central differences.

    loss_fn receives the float64 copy and must build its inputs in float64.
    Coordinates are drawn uniformly over all trainable scalars.
    """
    work = copy.deepcopy(module).double()
    named = [(name, p) for name, p in work.named_parameters() if p.requires_grad]
    if not named:
        raise ValueError("Module has no trainable parameters")

    loss = loss_fn(work)
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for (_, p), g in zip(named, grads)]

    sizes = np.array([p.numel() for _, p in named], dtype=np.float64)
    rng = np.random.default_rng(seed)
    result = GradCheckResult()
    for _ in range(n_coords):
        which = int(rng.choice(len(named), p=sizes / sizes.sum()))
        name, param = named[which]
        flat = int(rng.integers(param.numel()))
        with torch.no_grad():
            view = param.view(-1)
            original = view[flat].item()
            view[flat] = original + eps
            plus = loss_fn(work).item()
            view[flat] = original - eps
            minus = loss_fn(work).item()
            view[flat] = original
        numeric = (plus - minus) / (2 * eps)
        analytic = grads[which].reshape(-1)[flat].item()
        err = relative_error(analytic, numeric, floor)
        result.records.append((name, flat, analytic, numeric, err))
        result.max_rel_error = max(result.max_rel_error, err)
    return result
