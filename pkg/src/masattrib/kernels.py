"""Coalition distributions: leave-one-out, Shapley (exact and sampled), Owen and Myerson.

Each kernel first collects the coalitions it needs, fetches their values
through :class:`~masattrib.utility.CoalitionValues`, then combines
marginal contributions with its weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .game import EvaluationSpec, Game, GameError, ProtocolVector, validate_graph, validate_partition
from .utility import CoalitionValues

KERNEL_KINDS = ("loo", "shapley_exact", "shapley_sampled", "owen", "myerson")
EXACT_LIMIT = 20


class KernelError(GameError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    budget: Optional[int] = None
    seed: int = 0
    groups: Optional[tuple] = None
    graph: Optional[tuple] = None
    exact_limit: int = EXACT_LIMIT

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise KernelError(f"unknown kernel {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.kind == "shapley_sampled" and (self.budget is None or self.budget < 1):
            raise KernelError("shapley_sampled needs budget >= 1")
        if self.kind == "owen" and self.groups is None:
            raise KernelError("owen needs a partition of the agents (groups)")
        if self.kind == "myerson" and self.graph is None:
            raise KernelError("myerson needs an interaction graph")
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(tuple(int(i) for i in g) for g in self.groups))
        if self.graph is not None:
            object.__setattr__(self, "graph", tuple(sorted(tuple(int(i) for i in e) for e in self.graph)))

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "shapley_sampled":
            out.update(budget=self.budget, seed=self.seed)
        if self.groups is not None:
            out["groups"] = [list(g) for g in self.groups]
        if self.graph is not None:
            out["graph"] = [list(e) for e in self.graph]
        return out


@dataclass
class AttributionResult:
    agents: tuple
    scores: tuple
    kernel: KernelSpec
    protocol_digest: str
    protocol: str
    metric: str
    coalition_evaluations: int
    cost_ledger: dict
    std_errors: Optional[tuple] = None
    notes: list = field(default_factory=list)
    evaluator_calls: int = 0
    entries: list = field(default_factory=list, repr=False)

    def score_map(self) -> dict:
        return dict(zip(self.agents, self.scores))

    def ranking(self) -> list:
        """Agent indices ordered by descending score (ties by index)."""
        return sorted(range(len(self.scores)), key=lambda i: (-self.scores[i], i))

    def to_dict(self) -> dict:
        out = {
            "agents": list(self.agents),
            "scores": list(self.scores),
            "kernel": self.kernel.to_dict(),
            "protocol": self.protocol,
            "protocol_digest": self.protocol_digest,
            "metric": self.metric,
            "coalition_evaluations": self.coalition_evaluations,
            "cost_ledger": self.cost_ledger,
            "notes": list(self.notes),
        }
        if self.std_errors is not None:
            out["std_errors"] = list(self.std_errors)
        return out


def _values(game, protocol, spec, values=None, **kwargs) -> CoalitionValues:
    if values is not None:
        return values
    return CoalitionValues(game, protocol, spec, **kwargs)


def _result(game, vals: CoalitionValues, kernel: KernelSpec, scores, std_errors=None) -> AttributionResult:
    entries = vals.entries()
    notes = []
    if vals.protocol.is_mixed:
        notes.append("experimental: mixed protocol vector")
    if vals.non_executable:
        notes.append(f"{len(vals.non_executable)} non-executable coalition(s) valued by policy "
                     f"{vals.policy.mode}={vals.policy.value}")
    ledger = {
        "tokens": sum(e.tokens for e in entries),
        "cost": math.fsum(e.cost for e in entries),
        "runs": len(entries),
        "policy": vals.policy.to_dict(),
    }
    return AttributionResult(
        agents=game.labels,
        scores=tuple(float(s) for s in scores),
        kernel=kernel,
        protocol_digest=vals.protocol.digest(),
        protocol=vals.protocol.summary(),
        metric=vals.spec.metric.name,
        coalition_evaluations=len(vals.requested),
        cost_ledger=ledger,
        std_errors=None if std_errors is None else tuple(std_errors),
        notes=notes,
        evaluator_calls=vals.evaluator_calls,
        entries=entries,
    )


def _check_exact(n: int, limit: int):
    if n > limit:
        raise KernelError(
            f"{n} agents exceeds the exact-enumeration limit of {limit}; use kind='shapley_sampled' "
            "or raise exact_limit")


def attribute_loo(game: Game, protocol: ProtocolVector, spec: EvaluationSpec, **kwargs) -> AttributionResult:
    n = game.n
    if n < 1:
        raise KernelError("leave-one-out needs at least one agent")
    vals = _values(game, protocol, spec, **kwargs)
    full = (1 << n) - 1
    vals.fetch([full] + [full ^ 1 << i for i in range(n)])
    top = vals.value(full)
    scores = [top - vals.value(full ^ 1 << i) for i in range(n)]
    return _result(game, vals, KernelSpec("loo"), scores)


def _popcounts(size: int) -> np.ndarray:
    idx = np.arange(size, dtype=np.int64)
    counts = np.zeros(size, dtype=np.int64)
    while idx.any():
        counts += idx & 1
        idx >>= 1
    return counts


def shapley_from_table(v: np.ndarray, n: int) -> np.ndarray:
    """Exact Shapley values from a full table ``v[mask]`` of ``2**n`` utilities."""
    size = 1 << n
    masks = np.arange(size, dtype=np.int64)
    sizes = _popcounts(size)
    # weight for a base coalition of size s that excludes i: s!(n-s-1)!/n!
    weights = np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])
    phi = np.empty(n)
    for i in range(n):
        base = masks[(masks >> i & 1) == 0]
        phi[i] = math.fsum(weights[sizes[base]] * (v[base | 1 << i] - v[base]))
    return phi


def attribute_shapley_exact(game: Game, protocol: ProtocolVector, spec: EvaluationSpec, *,
                            exact_limit: int = EXACT_LIMIT, **kwargs) -> AttributionResult:
    n = game.n
    _check_exact(n, exact_limit)
    vals = _values(game, protocol, spec, **kwargs)
    size = 1 << n
    vals.fetch(range(1, size))
    v = np.array([vals.value(m) for m in range(size)])
    return _result(game, vals, KernelSpec("shapley_exact", exact_limit=exact_limit), shapley_from_table(v, n))


def attribute_shapley_sampled(game: Game, protocol: ProtocolVector, spec: EvaluationSpec, budget: int,
                              seed: int = 0, **kwargs) -> AttributionResult:
    """Monte-Carlo permutation estimate with per-agent standard errors.

    Standard errors are ``None`` when ``budget == 1``.
    """
    if budget < 1:
        raise KernelError("shapley_sampled needs budget >= 1")
    n = game.n
    if n > 62:
        raise KernelError("sampled Shapley supports at most 62 agents")
    vals = _values(game, protocol, spec, **kwargs)
    rng = np.random.default_rng(seed)
    perms = rng.permuted(np.tile(np.arange(n, dtype=np.int64), (budget, 1)), axis=1)
    bits = np.left_shift(np.int64(1), perms)
    after = np.bitwise_or.accumulate(bits, axis=1)
    before = after ^ bits
    uniq, inverse = np.unique(np.concatenate([after.ravel(), before.ravel()]), return_inverse=True)
    vals.fetch(int(m) for m in uniq)
    table = np.array([vals.value(int(m)) for m in uniq])
    lookup = table[inverse]
    marg_pos = lookup[: after.size].reshape(after.shape) - lookup[after.size:].reshape(after.shape)
    marg = np.empty_like(marg_pos)
    np.put_along_axis(marg, perms, marg_pos, axis=1)
    scores = marg.mean(axis=0)
    se = None
    if budget > 1:
        se = marg.std(axis=0, ddof=1) / math.sqrt(budget)
    kernel = KernelSpec("shapley_sampled", budget=budget, seed=seed)
    return _result(game, vals, kernel, scores, None if se is None else [float(x) for x in se])


def _submasks(mask: int):
    sub = mask
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & mask


def _owen_terms(n: int, groups: tuple):
    """Yield ``(i, weight, base_mask)`` for every term of the Owen sum."""
    m = len(groups)
    gmasks = [sum(1 << i for i in g) for g in groups]
    owner = {i: gi for gi, g in enumerate(groups) for i in g}
    fm = math.factorial
    for i in range(n):
        gi = owner[i]
        others = [gmasks[j] for j in range(m) if j != gi]
        own = gmasks[gi]
        g_size = bin(own).count("1")
        within = own & ~(1 << i)
        for tsel in range(1 << len(others)):
            t_size = bin(tsel).count("1")
            union = 0
            for j, gm in enumerate(others):
                if tsel >> j & 1:
                    union |= gm
            w_t = fm(t_size) * fm(m - t_size - 1) / fm(m)
            for s in _submasks(within):
                s_size = bin(s).count("1")
                w_s = fm(s_size) * fm(g_size - s_size - 1) / fm(g_size)
                yield i, w_t * w_s, union | s


def attribute_owen(game: Game, protocol: ProtocolVector, spec: EvaluationSpec, groups=None, *,
                   exact_limit: int = EXACT_LIMIT, **kwargs) -> AttributionResult:
    n = game.n
    _check_exact(n, exact_limit)
    groups = groups if groups is not None else game.groups
    if groups is None:
        raise KernelError("owen needs a partition of the agents (groups)")
    groups = validate_partition(groups, n)
    terms = list(_owen_terms(n, groups))
    vals = _values(game, protocol, spec, **kwargs)
    vals.fetch({b for _, _, b in terms} | {b | 1 << i for i, _, b in terms})
    acc = [[] for _ in range(n)]
    for i, w, b in terms:
        acc[i].append(w * (vals.value(b | 1 << i) - vals.value(b)))
    scores = [math.fsum(a) for a in acc]
    return _result(game, vals, KernelSpec("owen", groups=groups), scores)


def undirected_adjacency(n: int, edges) -> list:
    adj = [0] * n
    for a, b in edges:
        adj[a] |= 1 << b
        adj[b] |= 1 << a
    return adj


def components(mask: int, adj: list) -> list:
    """Connected components of the subgraph induced by ``mask``, as bitmasks."""
    out = []
    rest = mask
    while rest:
        seed = rest & -rest
        comp = frontier = seed
        while frontier:
            low = frontier & -frontier
            frontier ^= low
            grow = adj[low.bit_length() - 1] & mask & ~comp
            comp |= grow
            frontier |= grow
        out.append(comp)
        rest &= ~comp
    return out


def attribute_myerson(game: Game, protocol: ProtocolVector, spec: EvaluationSpec, graph=None, *,
                      exact_limit: int = EXACT_LIMIT, **kwargs) -> AttributionResult:
    """Shapley value of the graph-restricted game; only connected coalitions are executed."""
    n = game.n
    _check_exact(n, exact_limit)
    edges = validate_graph(graph, n) if graph is not None else game.interaction_graph
    adj = undirected_adjacency(n, edges)
    size = 1 << n
    parts = [components(m, adj) for m in range(size)]
    vals = _values(game, protocol, spec, **kwargs)
    vals.fetch({c for comps in parts for c in comps})
    v = np.empty(size)
    v[0] = vals.value(0)
    for m in range(1, size):
        v[m] = math.fsum(vals.value(c) for c in parts[m])
    kernel = KernelSpec("myerson", graph=tuple(sorted(edges)))
    return _result(game, vals, kernel, shapley_from_table(v, n))


def attribute(kernel: KernelSpec, game: Game, protocol: ProtocolVector, spec: EvaluationSpec, **kwargs) -> AttributionResult:
    """Run the kernel named by ``kernel.kind``."""
    if kernel.kind == "loo":
        return attribute_loo(game, protocol, spec, **kwargs)
    if kernel.kind == "shapley_exact":
        return attribute_shapley_exact(game, protocol, spec, exact_limit=kernel.exact_limit, **kwargs)
    if kernel.kind == "shapley_sampled":
        return attribute_shapley_sampled(game, protocol, spec, kernel.budget, kernel.seed, **kwargs)
    if kernel.kind == "owen":
        return attribute_owen(game, protocol, spec, kernel.groups, exact_limit=kernel.exact_limit, **kwargs)
    if kernel.kind == "myerson":
        return attribute_myerson(game, protocol, spec, kernel.graph, exact_limit=kernel.exact_limit, **kwargs)
    raise KernelError(f"unknown kernel {kernel.kind!r}")


def required_coalitions(kernel: KernelSpec, n: int) -> list:
    """Non-empty coalitions an exact kernel will request, in mask order."""
    full = (1 << n) - 1
    if kernel.kind == "loo":
        masks = {full} | {full ^ 1 << i for i in range(n)}
    elif kernel.kind == "shapley_exact":
        masks = set(range(1, 1 << n))
    elif kernel.kind == "owen":
        groups = validate_partition(kernel.groups, n)
        masks = set()
        for i, _, b in _owen_terms(n, groups):
            masks.update((b, b | 1 << i))
    elif kernel.kind == "myerson":
        adj = undirected_adjacency(n, validate_graph(kernel.graph, n))
        masks = {c for m in range(1, 1 << n) for c in components(m, adj)}
    else:
        raise KernelError(f"{kernel.kind} has no fixed coalition set")
    masks.discard(0)
    return sorted(masks)
