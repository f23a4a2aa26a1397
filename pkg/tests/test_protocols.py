import json

import pytest

from masattrib import (
    NULL,
    Coalition,
    EvaluationSpec,
    ExecutabilityPolicy,
    GameError,
    JudgeBinding,
    KernelSpec,
    ProtocolVector,
    RoleProtocol,
    Topology,
    attribute,
    attribute_loo,
    coalition_utility,
    introspective_utility,
    is_executable,
    make_ablation_protocol,
    make_introspective_protocol,
    make_replacement_protocol,
)
from masattrib.llm import ChatResult, PricingTable
from masattrib.protocols import JudgeError, NonExecutableCoalitionError, introspective_game
from masattrib.utility import EvaluationError

from conftest import ONE_RUN, additive_game


def star_game(n=4):
    return additive_game([0.25] * n, topology=Topology.centralized(n), subs=[0.1] * n)


def reply(success, tokens=(7, 3)):
    return ChatResult(json.dumps({"success": success, "reasoning": "ok"}), *tokens)


def transcripts(n, tasks=("task0",)):
    return {t: {k: f"agent {k} did its part" for k in range(n)} for t in tasks}


def test_protocol_constructors():
    game = additive_game([0.1] * 5)
    assert make_ablation_protocol(game).per_role == (NULL,) * 5
    repl = make_replacement_protocol(game, default="open_substitute")
    assert {r.substitute for r in repl.per_role} == {"open_substitute"}
    assert {r.variant for r in make_introspective_protocol(game).per_role} == {"simulated_null"}
    with pytest.raises(GameError):
        make_replacement_protocol(game, {0: "x"})
    with pytest.raises(GameError):
        make_replacement_protocol(game, {9: "x"}, default="y")


def test_executability_by_topology():
    game = star_game()
    no_hub = Coalition.of(4, [1, 2])
    assert not is_executable(game, no_hub, make_ablation_protocol(game))
    assert is_executable(game, no_hub, make_replacement_protocol(game, default="small"))
    flat = additive_game([0.1] * 4)
    proto = make_ablation_protocol(flat)
    assert all(is_executable(flat, Coalition(m, 4), proto) for m in range(16))
    agg = additive_game([0.1] * 3, topology=Topology.independent(3, aggregator=2))
    assert not is_executable(agg, Coalition.of(3, [0, 1]), make_ablation_protocol(agg))


def test_policies_value_non_executable_coalitions():
    game = star_game()
    proto = make_ablation_protocol(game)
    no_hub = Coalition.of(4, [1, 2])
    assert coalition_utility(game, no_hub, proto, ONE_RUN) == 0.0
    assert coalition_utility(game, no_hub, proto, ONE_RUN, policy=ExecutabilityPolicy.baseline(0.125)) == 0.125
    with pytest.raises(NonExecutableCoalitionError):
        coalition_utility(game, no_hub, proto, ONE_RUN, policy=ExecutabilityPolicy.skip_with_error())
    with pytest.raises(GameError):
        ExecutabilityPolicy("optimistic")


def test_non_executable_coalitions_noted_in_result():
    game = star_game()
    res = attribute_loo(game, make_ablation_protocol(game), ONE_RUN)
    assert any("non-executable" in note for note in res.notes)
    assert res.scores[0] == pytest.approx(1.0)


def test_replacement_keeps_star_running():
    game = star_game()
    res = attribute_loo(game, make_replacement_protocol(game, default="small"), ONE_RUN)
    assert res.scores == pytest.approx((0.15,) * 4)


def test_constant_judge_gives_one_everywhere():
    game = additive_game([0.2] * 3)
    binding = JudgeBinding(lambda msgs: reply(1), transcripts(3))
    for m in range(1, 8):
        assert introspective_utility(binding, game, Coalition(m, 3), ONE_RUN) == 1.0


def test_all_active_judge_loo():
    game = additive_game([0.2] * 3)

    def judge(messages):
        text = messages[-1]["content"]
        return reply(int("ABLATED" not in text))

    binding = JudgeBinding(judge, transcripts(3))
    res = attribute_loo(introspective_game(game, binding), make_introspective_protocol(game), ONE_RUN)
    assert res.scores == pytest.approx((1.0, 1.0, 1.0))
    assert res.coalition_evaluations == 4


def test_unparseable_judge_records_task_error():
    game = additive_game([0.2] * 2)
    calls = []

    def judge(messages):
        calls.append(1)
        return ChatResult("not json", 4, 1)

    binding = JudgeBinding(judge, transcripts(2))
    with pytest.raises(EvaluationError) as info:
        introspective_utility(binding, game, Coalition.of(2, [0]), ONE_RUN)
    assert isinstance(info.value.__cause__, JudgeError)
    assert len(calls) == 3 and binding.parse_failures == 3
    assert binding.task_errors == [{"task": "task0", "coalition": 1, "attempts": 3}]


def test_judge_recovers_within_attempts_and_counts_tokens():
    game = additive_game([0.2] * 2)
    answers = iter([ChatResult("```nope", 5, 1), reply(1, (10, 2))])
    binding = JudgeBinding(lambda m: next(answers), transcripts(2), judge_model="j",
                           pricing=PricingTable({"j": (1.0, 2.0)}))
    ev = introspective_game(game, binding).evaluator
    trace = ev(Coalition.of(2, [0]), make_introspective_protocol(game).per_role, "task0", 0)
    assert (trace.score, trace.prompt_tokens, trace.completion_tokens) == (1.0, 15, 3)
    assert trace.cost == pytest.approx((15 * 1.0 + 3 * 2.0) / 1000)


def test_judge_needs_transcripts_for_every_task():
    game = additive_game([0.2] * 2)
    binding = JudgeBinding(lambda m: reply(1), transcripts(2))
    spec = EvaluationSpec(tasks=("task0", "task1"), seeds=(0,))
    with pytest.raises(GameError):
        introspective_utility(binding, game, Coalition.grand(2), spec)


def test_mixed_protocol_is_flagged():
    game = additive_game([0.3, 0.4], subs=[0.1, 0.1])
    mixed = ProtocolVector((NULL, RoleProtocol.replacement("small")))
    res = attribute(KernelSpec("shapley_exact"), game, mixed, ONE_RUN)
    assert any("experimental" in n for n in res.notes)
    # the empty coalition keeps its configured value 0, so efficiency closes at v(grand)
    assert sum(res.scores) == pytest.approx(0.7)
