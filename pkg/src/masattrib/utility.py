"""Coalition utilities and marginal contributions, drawn through the cache."""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Optional

from .cache import CacheKey, CacheStore, Measurement
from .game import Coalition, EvaluationSpec, Game, GameError, ProtocolVector, as_trace, resolve_roles
from .protocols import ExecutabilityPolicy, NonExecutableCoalitionError, is_executable


class EvaluationError(RuntimeError):
    """The evaluator failed on a task; carries the offending coalition and task."""

    def __init__(self, message, coalition: int, task: str, seed: int):
        super().__init__(message)
        self.coalition = coalition
        self.task = task
        self.seed = seed


class CoalitionValues:
    """Lazily evaluated characteristic function ``mask -> utility`` for one query.

    Every non-empty coalition whose value is asked for is recorded in
    :attr:`requested`; evaluator runs go through the shared :class:`CacheStore`
    so different kernels on the same game and protocol share work.
    """

    def __init__(self, game: Game, protocol: ProtocolVector, spec: EvaluationSpec, *,
                 store: Optional[CacheStore] = None, policy: Optional[ExecutabilityPolicy] = None,
                 jobs: int = 1):
        if len(protocol) != game.n:
            raise GameError(f"protocol vector has {len(protocol)} entries for {game.n} agents")
        self.game = game
        self.protocol = protocol
        self.spec = spec
        self.store = store if store is not None else CacheStore()
        self.policy = policy or ExecutabilityPolicy.zero_utility()
        self.jobs = max(1, int(jobs))
        self._game_digest = game.digest()
        self._protocol_digest = protocol.digest()
        self._values: dict = {}
        self._tokens: dict = {}
        self._entries: dict = {}
        self._lock = threading.Lock()
        self.requested: set = set()
        self.evaluator_calls = 0
        self.non_executable: set = set()

    @property
    def n(self) -> int:
        return self.game.n

    def key(self, mask: int, task: str, seed: int) -> CacheKey:
        return CacheKey(self._game_digest, mask, self._protocol_digest, task, seed, self.spec.metric.name)

    def _evaluate(self, mask: int):
        coalition = Coalition(mask, self.n)
        if mask == 0 and self.game.empty_value != "evaluate":
            return float(self.game.empty_value), 0, []
        if not is_executable(self.game, coalition, self.protocol):
            with self._lock:
                self.non_executable.add(mask)
            if self.policy.mode == "skip_with_error":
                raise NonExecutableCoalitionError(
                    f"coalition {list(coalition.members)} drops a required role under {self.protocol.summary()}")
            return self.policy.value, 0, []
        roles = resolve_roles(self.game, coalition, self.protocol)
        metric = self.spec.metric
        entries = []
        for task in self.spec.tasks:
            for seed in self.spec.seeds:
                eff = self.spec.effective_seed(seed, mask)

                def run(task=task, eff=eff):
                    try:
                        trace = as_trace(self.game.evaluator(coalition, roles, task, eff))
                    except Exception as exc:
                        raise EvaluationError(
                            f"evaluator failed on coalition {list(coalition.members)}, task {task!r}, seed {eff}: {exc}",
                            mask, task, eff) from exc
                    score = metric(trace)
                    if not math.isfinite(score):
                        raise EvaluationError(f"metric {metric.name} returned {score}", mask, task, eff)
                    with self._lock:
                        self.evaluator_calls += 1
                    return Measurement(score, trace.prompt_tokens, trace.completion_tokens, trace.cost, trace.model)

                entries.append(self.store.get_or_evaluate(self.key(mask, task, eff), run))
        value = math.fsum(e.score for e in entries) / len(entries)
        return value, sum(e.tokens for e in entries), entries

    def _ensure(self, mask: int):
        if mask in self._values:
            return
        value, tokens, entries = self._evaluate(mask)
        with self._lock:
            self._values[mask] = value
            self._tokens[mask] = tokens
            self._entries[mask] = entries

    def value(self, mask: int) -> float:
        if mask >> self.n or mask < 0:
            raise GameError(f"mask {mask:#b} does not fit {self.n} agents")
        if mask:
            with self._lock:
                self.requested.add(mask)
        self._ensure(mask)
        return self._values[mask]

    def tokens(self, mask: int) -> int:
        """Billable tokens summed over the tasks x seeds runs of ``mask``."""
        self.value(mask)
        return self._tokens[mask]

    def fetch(self, masks: Iterable[int]) -> None:
        """Evaluate many coalitions, concurrently when ``jobs > 1``."""
        todo = sorted(set(masks))
        if self.jobs == 1 or len(todo) < 2:
            for m in todo:
                self.value(m)
            return
        with ThreadPoolExecutor(self.jobs) as pool:
            list(pool.map(self.value, todo))

    def entries(self) -> list:
        """Cache entries behind every requested coalition, in mask order."""
        out = []
        for m in sorted(self.requested):
            out.extend(self._entries.get(m, []))
        return out


def coalition_utility(game: Game, coalition: Coalition, protocol: ProtocolVector, spec: EvaluationSpec,
                      **kwargs) -> float:
    """Mean metric over tasks x seeds for ``coalition`` with the protocol's stand-ins."""
    if coalition.n != game.n:
        raise GameError(f"coalition width {coalition.n} != {game.n} agents")
    return CoalitionValues(game, protocol, spec, **kwargs).value(coalition.mask)


def marginal_contribution(game: Game, agent, base: Coalition, protocol: ProtocolVector, spec: EvaluationSpec,
                          *, values: Optional[CoalitionValues] = None, **kwargs) -> float:
    i = getattr(agent, "index", agent)
    if not 0 <= i < game.n:
        raise GameError(f"agent index {i} out of range for {game.n} agents")
    if i in base:
        raise GameError(f"agent {i} is already in the base coalition {list(base.members)}")
    values = values or CoalitionValues(game, protocol, spec, **kwargs)
    return values.value(base.mask | 1 << i) - values.value(base.mask)
