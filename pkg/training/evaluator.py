"""
Closed-loop evaluation in the simulator.

Rollout i uses task seed base_seed + i and its own RNG stream
default_rng([base_seed, i]), so results do not depend on worker count or
completion order.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from core.pipeline import OatAgent, OatModel
from sim.expert import scripted_expert
from sim.scene import A_MAX, RELATIONS, YAW_MAX, Action, Instruction, SceneState, SimEnv


logger = logging.getLogger(__name__)

# policy(state, instruction, rng) -> Action
Policy = Callable[[SceneState, Instruction, np.random.Generator], Action]


def expert_policy(state: SceneState, instruction: Instruction, rng=None) -> Action:
    return scripted_expert(state, instruction)


def random_policy(state: SceneState, instruction: Instruction, rng: np.random.Generator) -> Action:
    dpos = rng.uniform(-A_MAX, A_MAX, size=3)
    drot = np.array([0.0, 0.0, rng.uniform(-YAW_MAX, YAW_MAX)])
    return Action(dpos, drot, float(rng.integers(2)))


def agent_policy(agent: OatAgent) -> Policy:
    def act(state, instruction, rng=None):
        return agent(state, instruction)
    return act


@dataclass
class RolloutResult:
    index: int
    seed: int
    relation: str
    success: bool
    steps: int


@dataclass
class EvalReport:
    results: List[RolloutResult] = field(default_factory=list)

    @property
    def rollouts(self) -> int:
        return len(self.results)

    @property
    def successes(self) -> int:
        return sum(r.success for r in self.results)

    @property
    def success_rate(self) -> float:
        return self.successes / self.rollouts if self.rollouts else float('nan')

    @property
    def stderr(self) -> float:
        n = self.rollouts
        if n == 0:
            return float('nan')
        p = self.success_rate
        return math.sqrt(p * (1 - p) / n)

    def per_relation(self) -> Dict[str, Dict]:
        table = {}
        for relation in RELATIONS:
            subset = [r for r in self.results if r.relation == relation]
            table[relation] = {
                'rollouts': len(subset),
                'success_rate': sum(r.success for r in subset) / len(subset) if subset else float('nan'),
            }
        return table

    def get_report(self) -> Dict:
        return {
            'rollouts': self.rollouts,
            'successes': self.successes,
            'success_rate': self.success_rate,
            'stderr': self.stderr,
            'per_relation': self.per_relation(),
            'per_seed': {r.seed: r.success for r in self.results},
        }


def run_rollout(policy: Policy, base_seed: int, index: int, max_steps: int = 100) -> RolloutResult:
    seed = base_seed + index
    env = SimEnv.from_seed(seed, max_steps)
    rng = np.random.default_rng([base_seed, index])
    while not env.done:
        env.step(policy(env.state.copy(), env.instruction, rng))
    return RolloutResult(index, seed, env.instruction.relation, env.success, env.steps)


def evaluate(policy: Union[Policy, OatModel, str, Path], n_rollouts: int = 100, seed: int = 100000,
             workers: int = 1, max_steps: int = 100,
             progress: Optional[Callable[[int], None]] = None) -> EvalReport:
    """
    Success rate of a policy over n_rollouts seeded tasks.

    policy may be a callable, an OatModel or a checkpoint path.
    """
    if isinstance(policy, (str, Path)):
        policy, _, _ = OatModel.load(policy)
    if isinstance(policy, OatModel):
        policy = agent_policy(OatAgent(policy))

    def one(index: int) -> RolloutResult:
        result = run_rollout(policy, seed, index, max_steps)
        if progress:
            progress(1)
        return result

    if workers <= 1:
        results = [one(i) for i in range(n_rollouts)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n_rollouts)))
    report = EvalReport(sorted(results, key=lambda r: r.index))
    logger.info("Evaluated %d rollouts from seed %d: success %.3f +/- %.3f",
                report.rollouts, seed, report.success_rate, report.stderr)
    return report


def training_evaluator(n_rollouts: int, seed: int, workers: int = 1,
                       max_steps: int = 100) -> Callable[[OatModel, int], Dict]:
    """Hook for train(): evaluates the current model and returns the report dict."""
    def run(model: OatModel, step: int) -> Dict:
        report = evaluate(model, n_rollouts, seed, workers, max_steps)
        logger.info("step %d: success %.3f", step, report.success_rate)
        return report.get_report()
    return run
