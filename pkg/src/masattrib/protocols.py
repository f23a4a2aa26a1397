"""Removal protocols: agent ablation, introspective (judge) removal, and model replacement."""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional

from .game import (
    NULL,
    SIMULATED_NULL,
    Coalition,
    EvaluationSpec,
    Game,
    GameError,
    ProtocolVector,
    RoleProtocol,
    Trace,
    canonical_digest,
    resolve_roles,
)
from .llm import ChatResult, PricingTable, ResponseFormatError, parse_verdict, price, render_judge_prompt

logger = logging.getLogger(__name__)


class NonExecutableCoalitionError(RuntimeError):
    pass


class JudgeError(RuntimeError):
    """The judge produced no parseable verdict for a task within the retry budget."""

    def __init__(self, task: str, attempts: int, last: Exception):
        super().__init__(f"judge gave no valid verdict for task {task!r} after {attempts} attempts: {last}")
        self.task = task
        self.attempts = attempts


@dataclass(frozen=True)
class ExecutabilityPolicy:
    """What a non-executable coalition is worth: ``zero_utility``, ``baseline`` or ``skip_with_error``."""

    mode: str = "zero_utility"
    value: float = 0.0

    def __post_init__(self):
        if self.mode not in ("zero_utility", "skip_with_error", "baseline"):
            raise GameError(f"unknown executability policy {self.mode!r}")
        if not math.isfinite(self.value):
            raise GameError("policy baseline must be finite")
        if self.mode == "zero_utility" and self.value != 0.0:
            raise GameError("zero_utility policy has value 0")

    @classmethod
    def zero_utility(cls):
        return cls("zero_utility")

    @classmethod
    def baseline(cls, value: float):
        return cls("baseline", float(value))

    @classmethod
    def skip_with_error(cls):
        return cls("skip_with_error")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "value": self.value}


def make_ablation_protocol(game: Game) -> ProtocolVector:
    return ProtocolVector((NULL,) * game.n)


def make_introspective_protocol(game: Game) -> ProtocolVector:
    return ProtocolVector((SIMULATED_NULL,) * game.n)


def make_replacement_protocol(game: Game, substitutes: Optional[Mapping[int, str]] = None,
                              default: Optional[str] = None) -> ProtocolVector:
    """Every role is stood in by a substitute backbone; ``default`` covers unlisted roles."""
    substitutes = {int(k): v for k, v in (substitutes or {}).items()}
    stray = [k for k in substitutes if not 0 <= k < game.n]
    if stray:
        raise GameError(f"substitutes given for unknown agent(s) {stray}")
    roles = []
    for k in range(game.n):
        sub = substitutes.get(k, default)
        if not sub:
            raise GameError(f"no substitute for agent {k} ({game.agents[k].label}) and no default")
        roles.append(RoleProtocol.replacement(sub))
    return ProtocolVector(tuple(roles))


def required_roles(game: Game) -> frozenset:
    """Roles the topology cannot run without: orchestrator or aggregator hubs."""
    hub = game.topology.hub
    return frozenset() if hub is None else frozenset({hub})


def is_executable(game: Game, coalition: Coalition, protocol: ProtocolVector) -> bool:
    roles = resolve_roles(game, coalition, protocol)
    return all(roles[k].variant != "null_ablation" for k in required_roles(game))


@dataclass
class JudgeBinding:
    """An LLM judge plus the grand-coalition transcripts it reasons over.

    ``judge`` maps chat messages to a :class:`~masattrib.llm.ChatResult`.
    ``transcripts[task][agent_index]`` holds that agent's messages for the
    unmodified run of ``task``; ``task_text`` optionally maps task ids to the
    task statement shown to the judge.
    """

    judge: Callable[[list], ChatResult]
    transcripts: Mapping[str, Mapping[int, str]]
    judge_model: str = "judge"
    task_text: Mapping[str, str] = field(default_factory=dict)
    max_attempts: int = 3
    pricing: Optional[PricingTable] = None
    parse_failures: int = 0
    task_errors: list = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()
        if self.max_attempts < 1:
            raise GameError("judge max_attempts must be >= 1")

    def check_covers(self, game: Game, tasks) -> None:
        for task in tasks:
            have = self.transcripts.get(task)
            if have is None:
                raise GameError(f"no transcripts for task {task!r}")
            missing = [k for k in range(game.n) if k not in have]
            if missing:
                raise GameError(f"task {task!r} lacks transcripts for agent(s) {missing}")

    def fingerprint(self) -> dict:
        return {
            "judge": self.judge_model,
            "max_attempts": self.max_attempts,
            "transcripts": canonical_digest({t: {str(k): v for k, v in m.items()} for t, m in self.transcripts.items()}),
            "task_text": canonical_digest(dict(self.task_text)),
        }


class JudgeEvaluator:
    """Evaluator that asks the judge instead of re-running the system."""

    def __init__(self, binding: JudgeBinding, game: Game):
        self.binding = binding
        self.labels = dict(enumerate(game.labels))
        self.lead = game.topology.orchestrator

    def fingerprint(self):
        return {"introspective": self.binding.fingerprint()}

    def __call__(self, coalition: Coalition, role_impls, task: str, seed: int) -> Trace:
        b = self.binding
        ablated = [k for k, r in enumerate(role_impls) if r.variant != "original"]
        transcripts = b.transcripts[task]
        messages = render_judge_prompt(b.task_text.get(task, task), transcripts, ablated,
                                       labels=self.labels, lead=self.lead)
        prompt = completion = 0
        last = None
        for _ in range(b.max_attempts):
            reply = b.judge(messages)
            prompt += reply.prompt_tokens
            completion += reply.completion_tokens
            try:
                verdict = parse_verdict(reply.text)
            except ResponseFormatError as exc:
                last = exc
                with b._lock:
                    b.parse_failures += 1
                continue
            if b.pricing is None:
                return Trace(float(verdict["success"]), prompt, completion)
            cost = price({"prompt": prompt, "completion": completion}, b.judge_model, b.pricing)
            return Trace(float(verdict["success"]), prompt, completion, cost, b.judge_model)
        with b._lock:
            b.task_errors.append({"task": task, "coalition": coalition.mask, "attempts": b.max_attempts})
        raise JudgeError(task, b.max_attempts, last)


def introspective_game(game: Game, binding: JudgeBinding) -> Game:
    return replace(game, evaluator=JudgeEvaluator(binding, game))


def introspective_utility(binding: JudgeBinding, game: Game, coalition: Coalition, spec: EvaluationSpec, **kwargs) -> float:
    """Mean judge verdict over the spec's tasks; the system itself is never re-run."""
    from .utility import coalition_utility

    binding.check_covers(game, spec.tasks)
    return coalition_utility(introspective_game(game, binding), coalition, make_introspective_protocol(game), spec, **kwargs)
