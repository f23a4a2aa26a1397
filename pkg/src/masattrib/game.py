"""Protocol-conditioned game: agents, topologies, coalitions and protocol vectors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence, Union

TOPOLOGY_KINDS = ("independent", "centralized", "decentralized", "hybrid")


class GameError(ValueError):
    """Raised when a game, coalition or protocol is malformed."""


def canonical_digest(payload: Any, length: int = 16) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:length]


@dataclass(frozen=True)
class AgentId:
    index: int
    label: str = ""

    def __post_init__(self):
        if self.index < 0:
            raise GameError(f"agent index must be non-negative, got {self.index}")
        if not self.label:
            object.__setattr__(self, "label", f"agent{self.index}")


@dataclass(frozen=True)
class Topology:
    """Communication structure of a multi-agent system.

    Edges are directed ``(src, dst)`` pairs of agent indices. Use the
    ``independent``/``centralized``/``decentralized``/``hybrid`` constructors
    rather than building edge sets by hand.
    """

    kind: str
    n: int
    edges: frozenset = frozenset()
    orchestrator: Optional[int] = None
    aggregator: Optional[int] = None

    def __post_init__(self):
        if self.kind not in TOPOLOGY_KINDS:
            raise GameError(f"unknown topology kind {self.kind!r}; expected one of {TOPOLOGY_KINDS}")
        if self.n < 1:
            raise GameError("a topology needs at least one agent")
        object.__setattr__(self, "edges", frozenset((int(a), int(b)) for a, b in self.edges))
        for hub in (self.orchestrator, self.aggregator):
            if hub is not None and not 0 <= hub < self.n:
                raise GameError(f"hub index {hub} out of range for {self.n} agents")
        if self.kind in ("centralized", "hybrid"):
            if self.orchestrator is None or self.aggregator is not None:
                raise GameError(f"{self.kind} topology needs an orchestrator and no aggregator")
        elif self.kind == "independent":
            if self.aggregator is None or self.orchestrator is not None:
                raise GameError("independent topology needs an aggregator and no orchestrator")
        elif self.orchestrator is not None or self.aggregator is not None:
            raise GameError("decentralized topology has no hub roles")
        for a, b in self.edges:
            if a == b or not (0 <= a < self.n and 0 <= b < self.n):
                raise GameError(f"invalid edge ({a}, {b})")
        self._check_edges()

    def _check_edges(self):
        others = [i for i in range(self.n) if i not in (self.orchestrator, self.aggregator)]
        if self.kind == "independent":
            expected = {(i, self.aggregator) for i in others}
        elif self.kind == "centralized":
            expected = {(self.orchestrator, i) for i in others}
        elif self.kind == "decentralized":
            expected = {(i, j) for i in range(self.n) for j in range(self.n) if i != j}
        else:
            star = {(self.orchestrator, i) for i in others}
            if not star <= self.edges:
                raise GameError("hybrid topology must contain every orchestrator -> worker link")
            stray = [e for e in self.edges - star if self.orchestrator in e]
            if stray:
                raise GameError(f"hybrid peer links must join two workers, got {sorted(stray)}")
            return
        if set(self.edges) != expected:
            raise GameError(f"edges do not match the {self.kind} topology definition")

    @classmethod
    def independent(cls, n: int, aggregator: int = 0) -> "Topology":
        edges = {(i, aggregator) for i in range(n) if i != aggregator}
        return cls("independent", n, frozenset(edges), aggregator=aggregator)

    @classmethod
    def centralized(cls, n: int, orchestrator: int = 0) -> "Topology":
        edges = {(orchestrator, i) for i in range(n) if i != orchestrator}
        return cls("centralized", n, frozenset(edges), orchestrator=orchestrator)

    @classmethod
    def decentralized(cls, n: int) -> "Topology":
        edges = {(i, j) for i in range(n) for j in range(n) if i != j}
        return cls("decentralized", n, frozenset(edges))

    @classmethod
    def hybrid(cls, n: int, orchestrator: int = 0, peer_edges: Iterable[tuple] = ()) -> "Topology":
        edges = {(orchestrator, i) for i in range(n) if i != orchestrator}
        edges |= {(int(a), int(b)) for a, b in peer_edges}
        return cls("hybrid", n, frozenset(edges), orchestrator=orchestrator)

    @classmethod
    def build(cls, kind: str, n: int, hub: Optional[int] = None, peer_edges: Iterable[tuple] = ()) -> "Topology":
        if kind == "independent":
            return cls.independent(n, 0 if hub is None else hub)
        if kind == "centralized":
            return cls.centralized(n, 0 if hub is None else hub)
        if kind == "hybrid":
            return cls.hybrid(n, 0 if hub is None else hub, peer_edges)
        if kind == "decentralized":
            return cls.decentralized(n)
        raise GameError(f"unknown topology kind {kind!r}; expected one of {TOPOLOGY_KINDS}")

    @property
    def hub(self) -> Optional[int]:
        return self.orchestrator if self.orchestrator is not None else self.aggregator

    def relabel(self, perm: Sequence[int]) -> "Topology":
        """Move agent ``i`` to slot ``perm[i]``."""
        mapped = lambda i: None if i is None else perm[i]  # noqa: E731
        edges = frozenset((perm[a], perm[b]) for a, b in self.edges)
        return Topology(self.kind, self.n, edges, mapped(self.orchestrator), mapped(self.aggregator))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "edges": sorted(list(e) for e in self.edges),
            "orchestrator": self.orchestrator,
            "aggregator": self.aggregator,
        }


@dataclass(frozen=True)
class Coalition:
    """A set of agent slots stored as a bitmask of width ``n``."""

    mask: int
    n: int

    def __post_init__(self):
        if self.n < 0 or self.mask < 0 or self.mask >> self.n:
            raise GameError(f"mask {self.mask:#b} does not fit {self.n} agents")

    @classmethod
    def of(cls, n: int, members: Iterable[int] = ()) -> "Coalition":
        mask = 0
        for i in members:
            if not 0 <= i < n:
                raise GameError(f"agent index {i} out of range for {n} agents")
            mask |= 1 << i
        return cls(mask, n)

    @classmethod
    def grand(cls, n: int) -> "Coalition":
        return cls((1 << n) - 1, n)

    @classmethod
    def empty(cls, n: int) -> "Coalition":
        return cls(0, n)

    @property
    def members(self) -> tuple:
        return tuple(i for i in range(self.n) if self.mask >> i & 1)

    def __contains__(self, i: int) -> bool:
        return 0 <= i < self.n and bool(self.mask >> i & 1)

    def __len__(self) -> int:
        return bin(self.mask).count("1")

    def __iter__(self):
        return iter(self.members)

    def with_agent(self, i: int) -> "Coalition":
        return Coalition(self.mask | 1 << i, self.n)

    def without(self, i: int) -> "Coalition":
        return Coalition(self.mask & ~(1 << i), self.n)

    def complement(self) -> "Coalition":
        return Coalition(((1 << self.n) - 1) ^ self.mask, self.n)


@dataclass(frozen=True)
class RoleProtocol:
    """Stand-in for a role: ``original``, ``null_ablation``, ``simulated_null`` or ``replacement``."""

    variant: str
    substitute: Optional[str] = None

    VARIANTS = ("original", "null_ablation", "simulated_null", "replacement")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise GameError(f"unknown role protocol {self.variant!r}")
        if self.variant == "replacement":
            if not self.substitute:
                raise GameError("replacement needs a non-empty substitute specification")
        elif self.substitute is not None:
            raise GameError(f"{self.variant} does not take a substitute")

    @classmethod
    def replacement(cls, substitute: str) -> "RoleProtocol":
        return cls("replacement", substitute)

    @property
    def instantiated(self) -> bool:
        return self.variant in ("original", "replacement")

    def to_dict(self) -> dict:
        if self.substitute is None:
            return {"variant": self.variant}
        return {"variant": self.variant, "substitute": self.substitute}

    def __str__(self):
        return f"replacement({self.substitute})" if self.substitute else self.variant


ORIGINAL = RoleProtocol("original")
NULL = RoleProtocol("null_ablation")
SIMULATED_NULL = RoleProtocol("simulated_null")


@dataclass(frozen=True)
class ProtocolVector:
    per_role: tuple

    def __post_init__(self):
        object.__setattr__(self, "per_role", tuple(self.per_role))
        for p in self.per_role:
            if not isinstance(p, RoleProtocol):
                raise GameError(f"protocol entries must be RoleProtocol, got {p!r}")

    def __len__(self):
        return len(self.per_role)

    def __getitem__(self, i):
        return self.per_role[i]

    @property
    def is_mixed(self) -> bool:
        """True when stand-ins mix removal styles (null and replacement in one vector)."""
        kinds = {p.variant for p in self.per_role if p.variant != "original"}
        return len(kinds) > 1

    def to_dict(self) -> list:
        return [p.to_dict() for p in self.per_role]

    def digest(self) -> str:
        return canonical_digest(self.to_dict())

    def summary(self) -> str:
        kinds = sorted({str(p) for p in self.per_role})
        return kinds[0] if len(kinds) == 1 else "mixed:" + ",".join(kinds)


@dataclass(frozen=True)
class Trace:
    """Scored outcome of one system run (the metric input)."""

    score: float
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost: float = 0.0
    model: Optional[str] = None

    @property
    def tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class BehaviorMetric:
    name: str
    fn: Callable[[Trace], float]

    def __call__(self, trace: Trace) -> float:
        return float(self.fn(trace))


METRICS = {
    "success": BehaviorMetric("success", lambda t: t.score),
    "tokens": BehaviorMetric("tokens", lambda t: t.tokens),
    "cost": BehaviorMetric("cost", lambda t: t.cost),
}


def get_metric(metric: Union[str, BehaviorMetric]) -> BehaviorMetric:
    if isinstance(metric, BehaviorMetric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise GameError(f"unknown metric {metric!r}; known: {sorted(METRICS)}") from None


@dataclass(frozen=True)
class EvaluationSpec:
    """Task instances and seeds that define the expectation behind a coalition value.

    ``seed_mode='shared'`` passes the same seeds to every coalition (common
    random numbers); ``'independent'`` derives a per-coalition seed.
    """

    tasks: tuple = ("task0",)
    seeds: tuple = (0, 1, 2)
    metric: Union[str, BehaviorMetric] = "success"
    seed_mode: str = "shared"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(str(t) for t in self.tasks))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "metric", get_metric(self.metric))
        if not self.tasks:
            raise GameError("evaluation spec needs at least one task")
        if not self.seeds:
            raise GameError("evaluation spec needs at least one seed")
        if self.seed_mode not in ("shared", "independent"):
            raise GameError(f"seed_mode must be 'shared' or 'independent', got {self.seed_mode!r}")

    def effective_seed(self, seed: int, mask: int) -> int:
        if self.seed_mode == "shared":
            return seed
        return int(canonical_digest([seed, mask], 8), 16)


def evaluator_fingerprint(evaluator: Callable) -> Any:
    fp = getattr(evaluator, "fingerprint", None)
    if callable(fp):
        return fp()
    return f"{getattr(evaluator, '__module__', '?')}.{getattr(evaluator, '__qualname__', repr(evaluator))}"


@dataclass(frozen=True)
class Game:
    """Agents, topology and the coalition evaluator they are scored with.

    ``evaluator(coalition, role_impls, task, seed)`` returns a :class:`Trace`
    (or a bare float score). ``empty_value`` is the utility of the empty
    coalition, which is never executed; pass ``"evaluate"`` to run it instead.
    """

    agents: tuple
    topology: Topology
    evaluator: Callable = field(compare=False)
    groups: Optional[tuple] = None
    graph: Optional[frozenset] = None
    empty_value: Union[float, str] = 0.0

    def __post_init__(self):
        agents = tuple(a if isinstance(a, AgentId) else AgentId(i, str(a)) for i, a in enumerate(self.agents))
        object.__setattr__(self, "agents", agents)
        if [a.index for a in agents] != list(range(len(agents))):
            raise GameError("agent indices must be 0..n-1 in order")
        if self.topology.n != len(agents):
            raise GameError(f"topology has {self.topology.n} slots but game has {len(agents)} agents")
        if self.groups is not None:
            object.__setattr__(self, "groups", validate_partition(self.groups, self.n))
        if self.graph is not None:
            object.__setattr__(self, "graph", validate_graph(self.graph, self.n))
        if isinstance(self.empty_value, str) and self.empty_value != "evaluate":
            raise GameError("empty_value must be a number or 'evaluate'")

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def labels(self) -> tuple:
        return tuple(a.label for a in self.agents)

    @property
    def interaction_graph(self) -> frozenset:
        return self.graph if self.graph is not None else self.topology.edges

    def describe(self) -> dict:
        return {
            "agents": list(self.labels),
            "topology": self.topology.to_dict(),
            "evaluator": evaluator_fingerprint(self.evaluator),
            "empty_value": self.empty_value,
        }

    def digest(self) -> str:
        return canonical_digest(self.describe())


def validate_partition(groups: Iterable[Iterable[int]], n: int) -> tuple:
    blocks = tuple(tuple(sorted(int(i) for i in g)) for g in groups)
    flat = [i for g in blocks for i in g]
    if any(not g for g in blocks):
        raise GameError("partition blocks must be non-empty")
    if sorted(flat) != list(range(n)):
        raise GameError(f"groups {[list(g) for g in blocks]} do not partition agents 0..{n - 1}")
    return blocks


def validate_graph(edges: Iterable[Sequence[int]], n: int) -> frozenset:
    out = set()
    for e in edges:
        a, b = (int(x) for x in e)
        if not (0 <= a < n and 0 <= b < n) or a == b:
            raise GameError(f"invalid graph edge ({a}, {b}) for {n} agents")
        out.add((a, b))
    return frozenset(out)


def role_implementation(game: Game, coalition: Coalition, protocol: ProtocolVector, role: Union[int, AgentId]) -> RoleProtocol:
    """Implementation deployed for ``role``: the original if it is in the coalition, else its stand-in."""
    k = role.index if isinstance(role, AgentId) else int(role)
    if not 0 <= k < game.n:
        raise GameError(f"role index {k} out of range for {game.n} agents")
    if len(protocol) != game.n:
        raise GameError(f"protocol vector has {len(protocol)} entries for {game.n} agents")
    return ORIGINAL if coalition.mask >> k & 1 else protocol.per_role[k]


def resolve_roles(game: Game, coalition: Coalition, protocol: ProtocolVector) -> tuple:
    return tuple(role_implementation(game, coalition, protocol, k) for k in range(game.n))


def as_trace(result: Union[Trace, float, int, Mapping]) -> Trace:
    if isinstance(result, Trace):
        return result
    if isinstance(result, Mapping):
        return Trace(**result)
    return Trace(float(result))
