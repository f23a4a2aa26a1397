"""Attribution-query config documents (YAML, JSON accepted) with strict validation.

Every error names the offending field as a dotted path, e.g. ``kernel.graph``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .game import EvaluationSpec, Game, GameError, Topology, canonical_digest
from .kernels import KERNEL_KINDS, KernelSpec
from .llm import ChatResult, ModelEndpoint, PricingTable
from .protocols import (
    ExecutabilityPolicy,
    JudgeBinding,
    introspective_game,
    make_ablation_protocol,
    make_introspective_protocol,
    make_replacement_protocol,
)
from .synth import AgentCapability, SyntheticGameSpec, synthetic_game


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"config error at `{field_path}`: {message}")
        self.field = field_path


TOP_KEYS = {"game", "protocol", "kernel", "metric", "tasks", "seeds", "seed_mode", "executability",
            "cache", "out", "pricing", "compare", "jobs"}
GAME_KEYS = {"agents", "topology", "synthetic", "empty_value"}
TOPOLOGY_KEYS = {"kind", "hub", "peer_edges"}
SYNTH_KEYS = {"family", "profile", "k", "bonus", "sigma", "noise_seed"}
PROFILE_KEYS = {"skill", "substitute_skill", "token_cost"}
PROTOCOL_KEYS = {"kind", "substitute", "substitutes", "judge", "coalitions"}
JUDGE_KEYS = {"model", "endpoint", "constant", "max_attempts", "transcripts", "task_text"}
ENDPOINT_KEYS = {"base_url", "api_key_env", "timeout", "max_retries", "temperature", "max_concurrency"}
KERNEL_KEYS = {"kind", "budget", "seed", "groups", "graph", "exact_limit"}
POLICY_KEYS = {"mode", "value"}
COMPARE_KEYS = {"protocols"}


def _strict(section: Any, allowed: set, where: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(where, f"expected a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}" if where else unknown[0], "unknown key")
    return section


def _require(section: dict, key: str, where: str):
    if key not in section or section[key] is None:
        raise ConfigError(f"{where}.{key}" if where else key, "required")
    return section[key]


def _int_list(value, where: str) -> list:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(where, "expected a list of integers")
    return value


def load_document(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML/JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a mapping")
    return doc


@dataclass
class Query:
    """A validated query: everything needed to run one attribution."""

    game: Game
    protocol_cfg: dict
    kernel: KernelSpec
    spec: EvaluationSpec
    policy: ExecutabilityPolicy
    pricing: PricingTable
    effective: dict
    base_dir: Path
    cache: Optional[str] = None
    out: Optional[str] = None
    jobs: int = 1
    synthetic: Optional[SyntheticGameSpec] = None
    compare: list = field(default_factory=list)


def parse_query(doc: dict, base_dir: Path = Path(".")) -> Query:
    _strict(doc, TOP_KEYS, "")
    game_doc = _strict(_require(doc, "game", ""), GAME_KEYS, "game")
    agents = _require(game_doc, "agents", "game")
    if not isinstance(agents, list) or not agents or not all(isinstance(a, str) and a for a in agents):
        raise ConfigError("game.agents", "expected a non-empty list of agent labels")
    if len(set(agents)) != len(agents):
        raise ConfigError("game.agents", "labels must be unique")
    n = len(agents)

    topo_doc = _strict(_require(game_doc, "topology", "game"), TOPOLOGY_KEYS, "game.topology")
    kind = _require(topo_doc, "kind", "game.topology")
    hub = topo_doc.get("hub")
    if isinstance(hub, str):
        if hub not in agents:
            raise ConfigError("game.topology.hub", f"unknown agent {hub!r}")
        hub = agents.index(hub)
    peer_edges = topo_doc.get("peer_edges", [])
    if peer_edges and kind != "hybrid":
        raise ConfigError("game.topology.peer_edges", "only hybrid topologies take peer links")
    try:
        topology = Topology.build(kind, n, hub, [tuple(_int_list(e, "game.topology.peer_edges")) for e in peer_edges])
    except GameError as exc:
        raise ConfigError("game.topology", str(exc)) from exc

    empty_value = game_doc.get("empty_value", 0.0)
    if not (empty_value == "evaluate" or isinstance(empty_value, (int, float)) and not isinstance(empty_value, bool)):
        raise ConfigError("game.empty_value", "expected a number or 'evaluate'")

    synthetic = None
    synth_eff = None
    if "synthetic" in game_doc:
        sdoc = _strict(game_doc["synthetic"], SYNTH_KEYS, "game.synthetic")
        profile = _require(sdoc, "profile", "game.synthetic")
        if not isinstance(profile, list) or len(profile) != n:
            raise ConfigError("game.synthetic.profile", f"expected one entry per agent ({n})")
        caps = []
        for j, p in enumerate(profile):
            where = f"game.synthetic.profile[{j}]"
            p = _strict(p, PROFILE_KEYS, where)
            try:
                caps.append(AgentCapability(float(_require(p, "skill", where)), float(p.get("substitute_skill", 0.0)),
                                            int(p.get("token_cost", 0))))
            except (GameError, TypeError, ValueError) as exc:
                raise ConfigError(where, str(exc)) from exc
        try:
            synthetic = SyntheticGameSpec(
                family=_require(sdoc, "family", "game.synthetic"), topology=topology, profile=tuple(caps),
                k=sdoc.get("k"), bonus=float(sdoc.get("bonus", 0.0)), sigma=float(sdoc.get("sigma", 0.0)),
                noise_seed=int(sdoc.get("noise_seed", 0)))
        except GameError as exc:
            raise ConfigError("game.synthetic", str(exc)) from exc
        synth_eff = {"family": synthetic.family, "k": synthetic.k, "bonus": synthetic.bonus,
                     "sigma": synthetic.sigma, "noise_seed": synthetic.noise_seed,
                     "profile": [{"skill": c.skill, "substitute_skill": c.substitute_skill,
                                  "token_cost": c.token_cost} for c in caps]}
        game = synthetic_game(synthetic, agents, empty_value=empty_value)
    else:
        game = Game(tuple(agents), topology, TranscriptOnlyEvaluator(), empty_value=empty_value)

    metric = doc.get("metric", "success")
    tasks = doc.get("tasks", ["task0"])
    seeds = doc.get("seeds", [0, 1, 2])
    if not isinstance(tasks, list) or not tasks:
        raise ConfigError("tasks", "expected a non-empty list")
    seeds = _int_list(seeds, "seeds")
    if not seeds:
        raise ConfigError("seeds", "expected a non-empty list")
    try:
        spec = EvaluationSpec(tuple(str(t) for t in tasks), tuple(seeds), metric, doc.get("seed_mode", "shared"))
    except GameError as exc:
        raise ConfigError("metric" if "metric" in str(exc) else "seed_mode", str(exc)) from exc

    pol_doc = _strict(doc.get("executability", {"mode": "zero_utility"}), POLICY_KEYS, "executability")
    try:
        policy = ExecutabilityPolicy(pol_doc.get("mode", "zero_utility"), float(pol_doc.get("value", 0.0)))
    except (GameError, TypeError, ValueError) as exc:
        raise ConfigError("executability", str(exc)) from exc

    pricing_doc = doc.get("pricing", {}) or {}
    if not isinstance(pricing_doc, dict):
        raise ConfigError("pricing", "expected a mapping of model -> {prompt, completion}")
    try:
        pricing = PricingTable(pricing_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("pricing", f"bad entry: {exc}") from exc

    kernel, kernel_eff = _parse_kernel(doc.get("kernel"), game)

    protocol_cfg = _parse_protocol(_require(doc, "protocol", ""), "protocol", game, synthetic, pricing, spec.tasks, base_dir)
    compare = []
    if "compare" in doc:
        cdoc = _strict(doc["compare"], COMPARE_KEYS, "compare")
        plist = _require(cdoc, "protocols", "compare")
        if not isinstance(plist, list) or len(plist) != 2:
            raise ConfigError("compare.protocols", "expected exactly two protocols")
        compare = [_parse_protocol(p, f"compare.protocols[{j}]", game, synthetic, pricing, spec.tasks, base_dir) for j, p in enumerate(plist)]

    jobs = doc.get("jobs", 1)
    if not isinstance(jobs, int) or jobs < 1:
        raise ConfigError("jobs", "expected a positive integer")

    effective = {
        "game": {"agents": agents, "topology": topology.to_dict(), "empty_value": empty_value,
                 "synthetic": synth_eff},
        "protocol": protocol_cfg["effective"],
        "kernel": kernel_eff,
        "metric": spec.metric.name,
        "tasks": list(spec.tasks),
        "seeds": list(spec.seeds),
        "seed_mode": spec.seed_mode,
        "executability": policy.to_dict(),
        "pricing": {m: {"prompt": p, "completion": q} for m, (p, q) in sorted(pricing.per_model.items())},
        "compare": [c["effective"] for c in compare] or None,
    }
    return Query(game=game, protocol_cfg=protocol_cfg, kernel=kernel, spec=spec, policy=policy, pricing=pricing,
                 effective=effective, base_dir=base_dir, cache=doc.get("cache"), out=doc.get("out"), jobs=jobs,
                 synthetic=synthetic, compare=compare)


def _parse_kernel(kdoc, game: Game):
    kdoc = _strict(kdoc if kdoc is not None else {"kind": "loo"}, KERNEL_KEYS, "kernel")
    kind = _require(kdoc, "kind", "kernel")
    if kind not in KERNEL_KINDS:
        raise ConfigError("kernel.kind", f"unknown kernel {kind!r}; expected one of {list(KERNEL_KINDS)}")
    n = game.n
    groups = graph = None
    if kind == "owen":
        raw = _require(kdoc, "groups", "kernel")
        if not isinstance(raw, list):
            raise ConfigError("kernel.groups", "expected a list of agent lists")
        groups = [[_agent_index(a, game, "kernel.groups") for a in g] for g in raw]
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(n)) or any(not g for g in groups):
            raise ConfigError("kernel.groups", "groups must partition the agents exactly")
    if kind == "myerson":
        raw = _require(kdoc, "graph", "kernel")
        if raw == "topology":
            graph = sorted(game.topology.edges)
        elif isinstance(raw, list):
            graph = []
            for e in raw:
                if not isinstance(e, list) or len(e) != 2:
                    raise ConfigError("kernel.graph", "edges must be [a, b] pairs")
                a, b = (_agent_index(x, game, "kernel.graph") for x in e)
                if a == b:
                    raise ConfigError("kernel.graph", f"self-loop on agent {a}")
                graph.append((a, b))
        else:
            raise ConfigError("kernel.graph", "expected 'topology' or a list of edges")
    budget = kdoc.get("budget")
    if kind == "shapley_sampled" and (not isinstance(budget, int) or budget < 1):
        raise ConfigError("kernel.budget", "shapley_sampled needs an integer budget >= 1")
    seed = kdoc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("kernel.seed", "expected an integer")
    exact_limit = kdoc.get("exact_limit", 20)
    kernel = KernelSpec(kind, budget if kind == "shapley_sampled" else None, seed, groups, graph, exact_limit)
    eff = kernel.to_dict()
    eff["exact_limit"] = exact_limit
    eff.setdefault("seed", seed)
    return kernel, eff


def _agent_index(a, game: Game, where: str) -> int:
    if isinstance(a, str):
        if a not in game.labels:
            raise ConfigError(where, f"unknown agent {a!r}")
        return game.labels.index(a)
    if not isinstance(a, int) or not 0 <= a < game.n:
        raise ConfigError(where, f"agent index {a!r} out of range")
    return a


def _parse_protocol(pdoc, where: str, game: Game, synthetic, pricing: PricingTable, tasks, base_dir=Path(".")) -> dict:
    if isinstance(pdoc, str):
        pdoc = {"kind": pdoc}
    pdoc = _strict(pdoc, PROTOCOL_KEYS, where)
    kind = _require(pdoc, "kind", where)
    out = {"kind": kind}
    eff = {"kind": kind}
    if kind in ("ablation", "replacement") and synthetic is None:
        raise ConfigError("game.synthetic", f"{kind} re-executes the system; only synthetic games are runnable")
    if kind == "ablation":
        out["vector"] = make_ablation_protocol(game)
        out["game"] = game
    elif kind == "replacement":
        subs = pdoc.get("substitutes", {}) or {}
        if not isinstance(subs, dict):
            raise ConfigError(f"{where}.substitutes", "expected a mapping agent -> substitute")
        subs = {_agent_index(k if not str(k).isdigit() else int(k), game, f"{where}.substitutes"): str(v)
                for k, v in subs.items()}
        try:
            out["vector"] = make_replacement_protocol(game, subs, pdoc.get("substitute"))
        except GameError as exc:
            raise ConfigError(f"{where}.substitute", str(exc)) from exc
        out["game"] = game
        eff["substitutes"] = [r.substitute for r in out["vector"].per_role]
    elif kind == "introspective":
        binding, judge_eff = _parse_judge(_require(pdoc, "judge", where), f"{where}.judge", game, synthetic, pricing, tasks,
                                         base_dir)
        out["vector"] = make_introspective_protocol(game)
        out["game"] = introspective_game(game, binding)
        out["binding"] = binding
        eff["judge"] = judge_eff
    else:
        raise ConfigError(f"{where}.kind", f"unknown protocol {kind!r}; expected ablation, introspective or replacement")
    if "coalitions" in pdoc:
        raw = pdoc["coalitions"]
        if not isinstance(raw, list) or not raw:
            raise ConfigError(f"{where}.coalitions", "expected a non-empty list of agent lists")
        masks = []
        for c in raw:
            if not isinstance(c, list):
                raise ConfigError(f"{where}.coalitions", "each coalition must be a list of agents")
            masks.append(sum(1 << _agent_index(a, game, f"{where}.coalitions") for a in set(c)))
        out["coalitions"] = sorted(set(masks))
        eff["coalitions"] = out["coalitions"]
    out["effective"] = eff
    return out


class TranscriptOnlyEvaluator:
    """Evaluator for games known only through transcripts; they cannot be re-run."""

    def fingerprint(self):
        return "transcript-only"

    def __call__(self, *args):
        raise RuntimeError("this game has no executable evaluator; use the introspective protocol")


def _constant_judge(verdict: int):
    text = json.dumps({"success": verdict, "reasoning": "constant offline verdict"})

    def judge(messages):
        return ChatResult(text, 0, 0)

    return judge


def _placeholder_transcripts(game: Game, synthetic: SyntheticGameSpec, tasks) -> dict:
    out = {}
    for task in tasks:
        out[task] = {k: f"{game.labels[k]} finished its part of {task} (skill {cap.skill:g})"
                     for k, cap in enumerate(synthetic.profile)}
    return out


def _parse_judge(jdoc, where: str, game: Game, synthetic, pricing: PricingTable, tasks, base_dir=Path(".")):
    from .llm import ChatClient

    jdoc = _strict(jdoc, JUDGE_KEYS, where)
    eff: dict = {"max_attempts": jdoc.get("max_attempts", 3)}
    has_endpoint, has_const = "endpoint" in jdoc, "constant" in jdoc
    if has_endpoint == has_const:
        raise ConfigError(where, "give exactly one of `endpoint` or `constant`")
    if has_const:
        verdict = jdoc["constant"]
        if verdict not in (0, 1) or isinstance(verdict, bool):
            raise ConfigError(f"{where}.constant", "expected 0 or 1")
        judge = _constant_judge(verdict)
        model = f"constant-{verdict}"
        eff.update(constant=verdict)
        priced = None
    else:
        model = _require(jdoc, "model", where)
        edoc = _strict(jdoc["endpoint"], ENDPOINT_KEYS, f"{where}.endpoint")
        try:
            endpoint = ModelEndpoint(base_url=_require(edoc, "base_url", f"{where}.endpoint"), model=model,
                                     api_key_env=edoc.get("api_key_env", "OPENAI_API_KEY"),
                                     timeout=float(edoc.get("timeout", 60.0)),
                                     max_retries=int(edoc.get("max_retries", 3)),
                                     temperature=float(edoc.get("temperature", 0.0)),
                                     max_concurrency=int(edoc.get("max_concurrency", 4)))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}.endpoint", str(exc)) from exc
        if model not in pricing:
            raise ConfigError("pricing", f"judge model {model!r} has no price entry")
        client = ChatClient()
        judge = lambda messages: client.chat(endpoint, messages)  # noqa: E731
        priced = pricing
        eff.update(model=model, endpoint={"base_url": endpoint.base_url, "api_key_env": endpoint.api_key_env,
                                          "timeout": endpoint.timeout, "max_retries": endpoint.max_retries,
                                          "temperature": endpoint.temperature,
                                          "max_concurrency": endpoint.max_concurrency})
    tpath = jdoc.get("transcripts")
    if tpath is not None:
        try:
            raw = json.loads((Path(base_dir) / tpath).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{where}.transcripts", f"cannot load {tpath}: {exc}") from exc
        transcripts = {str(t): {_agent_index(int(a) if str(a).isdigit() else a, game, f"{where}.transcripts"): str(v)
                                for a, v in per.items()} for t, per in raw.items()}
        eff["transcripts"] = canonical_digest(raw)
    elif synthetic is not None:
        transcripts = _placeholder_transcripts(game, synthetic, tasks)
        eff["transcripts"] = "synthetic-placeholder"
    else:
        raise ConfigError(f"{where}.transcripts", "required for games without a synthetic evaluator")
    task_text = jdoc.get("task_text", {}) or {}
    if not isinstance(task_text, dict):
        raise ConfigError(f"{where}.task_text", "expected a mapping task -> text")
    eff["task_text"] = task_text
    try:
        attempts = int(eff["max_attempts"])
        binding = JudgeBinding(judge=judge, transcripts=transcripts, judge_model=model,
                               task_text={str(k): str(v) for k, v in task_text.items()},
                               max_attempts=attempts, pricing=priced)
    except (GameError, ValueError, TypeError) as exc:
        raise ConfigError(f"{where}.max_attempts", str(exc)) from exc
    try:
        binding.check_covers(game, tasks)
    except GameError as exc:
        raise ConfigError(f"{where}.transcripts", str(exc)) from exc
    return binding, eff


def load_query(path) -> Query:
    path = Path(path)
    return parse_query(load_document(path), path.parent)


def query_digest(effective: dict, command: str, extra: Optional[dict] = None) -> str:
    return canonical_digest({"command": command, "query": effective, "extra": extra or {}}, 12)


