"""Shapley run that can be killed mid-flight; used by the cache resume tests.

    python killable.py CACHE COUNTER [DIE_AFTER]

Every finished evaluator call appends a line to COUNTER. With DIE_AFTER the
process hard-exits (no cleanup, no flush of Python state) when the evaluator
is entered for the DIE_AFTER+1-th time.
"""

import os
import sys

from masattrib import AgentCapability, CacheStore, EvaluationSpec, SyntheticGameSpec, Topology
from masattrib import attribute_shapley_exact, make_ablation_protocol, synthetic_game
from masattrib.synth import SyntheticEvaluator

SPEC = SyntheticGameSpec(
    "orchestrated", Topology.centralized(5),
    tuple(AgentCapability(0.1 * (i + 1), 0.05, 10 * (i + 1)) for i in range(5)), bonus=0.2)
EVAL = EvaluationSpec(tasks=("a", "b"), seeds=(0, 1))


class CountingEvaluator(SyntheticEvaluator):
    def __init__(self, spec, counter, die_after=None):
        super().__init__(spec)
        self.counter = counter
        self.die_after = die_after
        self.calls = 0

    def __call__(self, coalition, roles, task, seed):
        if self.die_after is not None and self.calls >= self.die_after:
            os._exit(17)
        trace = super().__call__(coalition, roles, task, seed)
        self.calls += 1
        with open(self.counter, "a") as fh:
            fh.write("x\n")
        return trace


def run(cache, counter, die_after=None):
    game = synthetic_game(SPEC)
    game = type(game)(game.agents, game.topology, CountingEvaluator(SPEC, counter, die_after))
    with CacheStore(cache) as store:
        return attribute_shapley_exact(game, make_ablation_protocol(game), EVAL, store=store)


if __name__ == "__main__":
    die = int(sys.argv[3]) if len(sys.argv) > 3 else None
    res = run(sys.argv[1], sys.argv[2], die)
    print(" ".join(repr(s) for s in res.scores))
