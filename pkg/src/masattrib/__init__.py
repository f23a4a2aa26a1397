"""Cooperative-game attribution for multi-agent systems."""

from .cache import CacheEntry, CacheKey, CacheStore, export_ledger, open_store
from .game import (
    NULL,
    ORIGINAL,
    SIMULATED_NULL,
    AgentId,
    BehaviorMetric,
    Coalition,
    EvaluationSpec,
    Game,
    GameError,
    ProtocolVector,
    RoleProtocol,
    Topology,
    Trace,
    role_implementation,
)
from .kernels import (
    AttributionResult,
    KernelError,
    KernelSpec,
    attribute,
    attribute_loo,
    attribute_myerson,
    attribute_owen,
    attribute_shapley_exact,
    attribute_shapley_sampled,
)
from .metrics import AgreementReport, DeletionCurve, agreement, cost_summary, deletion_curve, normalized_entropy
from .protocols import (
    ExecutabilityPolicy,
    JudgeBinding,
    introspective_utility,
    is_executable,
    make_ablation_protocol,
    make_introspective_protocol,
    make_replacement_protocol,
)
from .synth import AgentCapability, SyntheticGameSpec, expected_attribution_oracle, synth_evaluate, synthetic_game
from .utility import CoalitionValues, EvaluationError, coalition_utility, marginal_contribution

__version__ = "0.1.0"
