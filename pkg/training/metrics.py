"""
Run metrics and convergence analysis.

Deterministic columns (step, loss, accuracy) are kept apart from wall-clock
columns so that re-running a seed reproduces metrics.csv bit for bit.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import uniform_filter1d


ACCURACY_THRESHOLD = 0.90
SMOOTHING_WINDOW = 5


@dataclass
class RunMetrics:
    """Append-only record of one run."""

    steps: List[Dict] = field(default_factory=list)        # step, loss, accuracy
    throughput: List[Dict] = field(default_factory=list)   # step, examples_per_sec, elapsed
    evals: List[Dict] = field(default_factory=list)        # step, success_rate, stderr, rollouts
    summary: Dict = field(default_factory=dict)

    def record_step(self, step: int, loss: float, accuracy: float) -> None:
        if self.steps and step <= self.steps[-1]['step']:
            raise ValueError(f"Step {step} is not after {self.steps[-1]['step']}")
        self.steps.append({'step': step, 'loss': loss, 'accuracy': accuracy})

    def record_throughput(self, step: int, examples_per_sec: float, elapsed: float) -> None:
        self.throughput.append({'step': step, 'examples_per_sec': examples_per_sec, 'elapsed': elapsed})

    def record_eval(self, step: int, report: Dict) -> None:
        self.evals.append({'step': step, 'success_rate': report['success_rate'],
                           'stderr': report['stderr'], 'rollouts': report['rollouts']})

    def curve(self) -> Tuple[np.ndarray, np.ndarray]:
        steps = np.array([row['step'] for row in self.steps], dtype=np.int64)
        acc = np.array([row['accuracy'] for row in self.steps], dtype=np.float64)
        return steps, acc

    def truncate(self, step: int) -> None:
        """Drop rows after `step` (resuming from an earlier checkpoint)."""
        self.steps = [r for r in self.steps if r['step'] <= step]
        self.throughput = [r for r in self.throughput if r['step'] <= step]
        self.evals = [r for r in self.evals if r['step'] <= step]


def smooth_curve(values: Sequence[float], window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Centered mean filter; edges repeat the boundary value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0 or window <= 1:
        return values.copy()
    return uniform_filter1d(values, size=min(window, values.size), mode='nearest')


def steps_to_threshold(metrics: RunMetrics, threshold: float = ACCURACY_THRESHOLD,
                       window: int = SMOOTHING_WINDOW) -> Optional[int]:
    """First logged step whose smoothed accuracy reaches threshold, or None."""
    steps, acc = metrics.curve()
    if steps.size == 0:
        return None
    hits = np.flatnonzero(smooth_curve(acc, window) >= threshold)
    return int(steps[hits[0]]) if hits.size else None


def compare_convergence(oat: RunMetrics, full: RunMetrics, threshold: float = ACCURACY_THRESHOLD,
                        window: int = SMOOTHING_WINDOW) -> Dict:
    """Steps-to-threshold of both runs and their ratio (oat / full)."""
    oat_steps = steps_to_threshold(oat, threshold, window)
    full_steps = steps_to_threshold(full, threshold, window)
    ratio = None
    if oat_steps is not None and full_steps is not None:
        ratio = oat_steps / full_steps
    return {
        'threshold': threshold,
        'oat_steps': oat_steps,
        'full_steps': full_steps,
        'step_ratio': ratio,
        'oat_faster': ratio is not None and ratio <= 0.75,
    }
