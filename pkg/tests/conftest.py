import random

import pytest

from masattrib import (
    AgentCapability,
    EvaluationSpec,
    Game,
    SyntheticGameSpec,
    Topology,
    make_ablation_protocol,
    synthetic_game,
)

ONE_RUN = EvaluationSpec(seeds=(0,))


def additive_spec(weights, topology=None, subs=None, costs=None):
    n = len(weights)
    topology = topology or Topology.decentralized(n)
    subs = subs or [0.0] * n
    costs = costs or [0] * n
    profile = tuple(AgentCapability(w, s, c) for w, s, c in zip(weights, subs, costs))
    return SyntheticGameSpec("additive", topology, profile)


def additive_game(weights, **kw):
    return synthetic_game(additive_spec(weights, **kw))


class TableEvaluator:
    """Evaluator reading utilities straight from a ``mask -> value`` table."""

    def __init__(self, table):
        self.table = dict(table)
        self.calls = 0

    def fingerprint(self):
        return {"table": sorted(self.table.items())}

    def __call__(self, coalition, roles, task, seed):
        self.calls += 1
        return self.table[coalition.mask]


def table_game(table, n):
    return Game(tuple(f"a{i}" for i in range(n)), Topology.decentralized(n), TableEvaluator(table))


def random_synthetic_spec(rng: random.Random, family: str, n: int, kind: str = None):
    kind = kind or rng.choice(["independent", "centralized", "decentralized", "hybrid"])
    if kind == "hybrid" and n >= 3:
        workers = list(range(1, n))
        pairs = [(a, b) for a in workers for b in workers if a < b]
        topo = Topology.hybrid(n, 0, rng.sample(pairs, rng.randint(0, len(pairs))))
    elif kind == "hybrid":
        topo = Topology.centralized(n)
    else:
        topo = Topology.build(kind, n)
    profile = []
    for _ in range(n):
        skill = round(rng.uniform(0, 1), 3)
        profile.append(AgentCapability(skill, round(rng.uniform(0, skill), 3), rng.randint(0, 200)))
    return SyntheticGameSpec(
        family, topo, tuple(profile),
        k=rng.randint(1, n) if family == "threshold" else None,
        bonus=round(rng.uniform(0, 0.5), 3) if family == "orchestrated" else 0.0,
        sigma=0.1 if family == "noisy" else 0.0,
        noise_seed=rng.randint(0, 1000),
    )


@pytest.fixture
def additive3():
    return additive_game([0.3, 0.2, 0.5])


@pytest.fixture
def ablation3(additive3):
    return make_ablation_protocol(additive3)


# acceptance criteria report one line each; collected here and echoed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
