"""Deterministic synthetic multi-agent systems with known attribution.

Families:

* ``additive``      score = sum of effective skills of instantiated roles
* ``threshold``     1 if at least ``k`` instantiated roles have positive skill
* ``orchestrated``  additive + ``bonus`` while the hub runs; 0 if the hub is ablated
* ``noisy``         additive + seeded Gaussian noise with std ``sigma``

Effective skill is ``skill`` for the original backbone, ``substitute_skill``
for a replacement and 0 for a removed role. Billable tokens count only roles
running their original backbone.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import networkx as nx
import numpy as np

from .game import Coalition, Game, GameError, ProtocolVector, Topology, Trace

FAMILIES = ("additive", "threshold", "orchestrated", "noisy")


@dataclass(frozen=True)
class AgentCapability:
    skill: float
    substitute_skill: float = 0.0
    token_cost: int = 0

    def __post_init__(self):
        for name in ("skill", "substitute_skill"):
            x = getattr(self, name)
            if not 0.0 <= x <= 1.0:
                raise GameError(f"{name} must lie in [0, 1], got {x}")
        if self.token_cost < 0:
            raise GameError("token_cost must be non-negative")


@dataclass(frozen=True)
class SyntheticGameSpec:
    family: str
    topology: Topology
    profile: tuple
    k: Optional[int] = None
    bonus: float = 0.0
    sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "profile", tuple(
            p if isinstance(p, AgentCapability) else AgentCapability(**p) for p in self.profile))
        if self.family not in FAMILIES:
            raise GameError(f"unknown synthetic family {self.family!r}; expected one of {FAMILIES}")
        if len(self.profile) != self.topology.n:
            raise GameError(f"profile has {len(self.profile)} agents, topology {self.topology.n}")
        if self.family == "threshold" and not (self.k is not None and 1 <= self.k <= self.n):
            raise GameError(f"threshold k must lie in [1, {self.n}], got {self.k}")
        if self.sigma < 0:
            raise GameError("sigma must be >= 0")

    @property
    def n(self) -> int:
        return len(self.profile)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "topology": self.topology.to_dict(),
            "profile": [[p.skill, p.substitute_skill, p.token_cost] for p in self.profile],
            "k": self.k,
            "bonus": self.bonus,
            "sigma": self.sigma,
            "noise_seed": self.noise_seed,
        }


def _effective(spec: SyntheticGameSpec, roles) -> list:
    out = []
    for cap, r in zip(spec.profile, roles):
        if r.variant == "original":
            out.append(cap.skill)
        elif r.variant == "replacement":
            out.append(cap.substitute_skill)
        else:
            out.append(0.0)
    return out


def _noise(spec: SyntheticGameSpec, task: str, seed: int) -> float:
    task_key = int.from_bytes(hashlib.sha256(task.encode("utf-8")).digest()[:8], "big")
    rng = np.random.default_rng([spec.noise_seed, task_key, seed & (2**63 - 1)])
    return float(rng.normal(0.0, spec.sigma))


def synth_evaluate(spec: SyntheticGameSpec, coalition: Coalition, role_impls: Sequence, task: str, seed: int) -> tuple:
    """Return ``(score, billable_tokens)`` for one run."""
    if len(role_impls) != spec.n:
        raise GameError(f"expected {spec.n} role implementations, got {len(role_impls)}")
    for k, r in enumerate(role_impls):
        if (k in coalition) != (r.variant == "original"):
            raise GameError(f"role {k} resolved to {r} inconsistently with coalition {list(coalition.members)}")
    eff = _effective(spec, role_impls)
    tokens = sum(cap.token_cost for cap, r in zip(spec.profile, role_impls) if r.variant == "original")
    if spec.family == "threshold":
        live = sum(1 for e, r in zip(eff, role_impls) if r.instantiated and e > 0)
        return (1.0 if live >= spec.k else 0.0), tokens
    score = math.fsum(eff)
    if spec.family == "orchestrated":
        hub = spec.topology.hub
        if hub is not None:
            if not role_impls[hub].instantiated:
                return 0.0, tokens
            score += spec.bonus
    elif spec.family == "noisy" and spec.sigma > 0:
        score += _noise(spec, task, seed)
    return score, tokens


class SyntheticEvaluator:
    def __init__(self, spec: SyntheticGameSpec):
        self.spec = spec

    def fingerprint(self) -> dict:
        return {"synthetic": self.spec.to_dict()}

    def __call__(self, coalition, role_impls, task, seed) -> Trace:
        score, tokens = synth_evaluate(self.spec, coalition, role_impls, task, seed)
        return Trace(score, prompt_tokens=tokens)


def synthetic_game(spec: SyntheticGameSpec, labels: Optional[Sequence[str]] = None, **kwargs) -> Game:
    labels = list(labels) if labels is not None else [
        "orchestrator" if i == spec.topology.orchestrator else
        "aggregator" if i == spec.topology.aggregator else f"worker{i}"
        for i in range(spec.n)
    ]
    return Game(tuple(labels), spec.topology, SyntheticEvaluator(spec), **kwargs)


def expected_attribution_oracle(spec: SyntheticGameSpec, kernel, protocol: ProtocolVector, *,
                                tasks=("task0",), seeds=(0,), policy_value: Optional[float] = 0.0,
                                empty_value: float = 0.0, groups=None, graph=None) -> tuple:
    """Brute-force attribution by walking every agent ordering.

    Deliberately shares no code with the kernels: coalition values come
    straight from :func:`synth_evaluate`, Shapley and Myerson average over all
    ``n!`` orderings, Owen over all orderings that keep groups contiguous, and
    graph components come from networkx.
    """
    n = spec.n
    if n > 8:
        raise GameError(f"oracle enumerates n! orderings; n={n} exceeds 8")
    kind = getattr(kernel, "kind", kernel)
    groups = groups if groups is not None else getattr(kernel, "groups", None)
    graph = graph if graph is not None else getattr(kernel, "graph", None)
    hub = spec.topology.hub
    memo = {}

    def nu(members: frozenset) -> float:
        if members in memo:
            return memo[members]
        if not members:
            memo[members] = empty_value
            return empty_value
        roles = [protocol.per_role[k] if k not in members else _Orig for k in range(n)]
        if hub is not None and hub not in members and protocol.per_role[hub].variant == "null_ablation":
            memo[members] = policy_value
            return policy_value
        coalition = Coalition(sum(1 << k for k in members), n)
        total = [synth_evaluate(spec, coalition, roles, t, s)[0] for t in tasks for s in seeds]
        memo[members] = sum(total) / len(total)
        return memo[members]

    everyone = frozenset(range(n))
    if kind == "loo":
        return tuple(nu(everyone) - nu(everyone - {i}) for i in range(n))

    if kind == "myerson":
        g = nx.Graph()
        g.add_nodes_from(range(n))
        g.add_edges_from(graph if graph is not None else spec.topology.edges)
        restricted = {}

        def value(s):
            if s not in restricted:
                parts = nx.connected_components(g.subgraph(s))
                restricted[s] = sum(nu(frozenset(c)) for c in parts) if s else empty_value
            return restricted[s]

        orders = itertools.permutations(range(n))
    elif kind in ("shapley_exact", "shapley", "shapley_sampled"):
        value = nu
        orders = itertools.permutations(range(n))
    elif kind == "owen":
        if groups is None:
            raise GameError("owen oracle needs groups")
        value = nu
        orders = _block_orders([list(g) for g in groups])
    else:
        raise GameError(f"oracle has no rule for kernel {kind!r}")

    totals = [0.0] * n
    count = 0
    for order in orders:
        seen = frozenset()
        prev = value(seen)
        for i in order:
            seen = seen | {i}
            cur = value(seen)
            totals[i] += cur - prev
            prev = cur
        count += 1
    return tuple(t / count for t in totals)


def _block_orders(groups):
    for block_order in itertools.permutations(groups):
        for inner in itertools.product(*(itertools.permutations(b) for b in block_order)):
            yield [i for b in inner for i in b]


class _OrigRole:
    variant = "original"
    instantiated = True


_Orig = _OrigRole()
