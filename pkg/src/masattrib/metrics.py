"""Post-attribution analytics: deletion curves, attribution entropy, agreement, cost totals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .game import EvaluationSpec, Game, ProtocolVector
from .llm import PricingTable, price
from .utility import CoalitionValues


class MetricsError(ValueError):
    pass


def _scores(scores) -> list:
    return [float(s) for s in getattr(scores, "scores", scores)]


def ascending_order(scores) -> list:
    """Agent indices from lowest to highest score; ties broken by index."""
    s = _scores(scores)
    return sorted(range(len(s)), key=lambda i: (s[i], i))


def auc_trapezoid(utilities: Sequence[float]) -> float:
    """Trapezoid area with the removal count rescaled to [0, 1]."""
    u = [float(x) for x in utilities]
    if not u:
        raise MetricsError("empty curve")
    if len(u) == 1:
        return u[0]
    h = 1.0 / (len(u) - 1)
    return math.fsum(h * (a + b) / 2.0 for a, b in zip(u, u[1:]))


@dataclass(frozen=True)
class CurvePoint:
    k: int
    utility: float
    billable_tokens: int


@dataclass(frozen=True)
class DeletionCurve:
    order: tuple
    points: tuple
    auc: float

    def to_dict(self) -> dict:
        return {
            "order": list(self.order),
            "points": [{"k": p.k, "utility": p.utility, "tokens": p.billable_tokens} for p in self.points],
            "auc": self.auc,
        }


def deletion_curve(game: Game, scores, protocol: ProtocolVector, spec: EvaluationSpec, k_max: Optional[int] = None,
                   *, values: Optional[CoalitionValues] = None, **kwargs) -> DeletionCurve:
    """Apply the protocol to the ``k`` lowest-ranked agents for ``k = 0..k_max``.

    The ranking is computed once from ``scores`` and never revised.
    """
    n = game.n
    k_max = n if k_max is None else int(k_max)
    if not 0 <= k_max <= n:
        raise MetricsError(f"k_max must lie in [0, {n}], got {k_max}")
    s = _scores(scores)
    if len(s) != n:
        raise MetricsError(f"{len(s)} scores for {n} agents")
    order = ascending_order(s)
    vals = values or CoalitionValues(game, protocol, spec, **kwargs)
    mask = (1 << n) - 1
    masks = [mask]
    for i in order[:k_max]:
        mask &= ~(1 << i)
        masks.append(mask)
    vals.fetch(masks)
    points = tuple(CurvePoint(k, vals.value(m), vals.tokens(m)) for k, m in enumerate(masks))
    return DeletionCurve(tuple(order), points, auc_trapezoid([p.utility for p in points]))


def normalized_entropy(scores) -> float:
    """Entropy of |score| shares divided by log n; 0 is fully concentrated, 1 uniform."""
    mags = np.abs(np.asarray(_scores(scores), dtype=float))
    n = mags.size
    if n < 2:
        raise MetricsError("entropy needs at least two agents")
    total = mags.sum()
    if total == 0:
        raise MetricsError("all attribution scores are zero; shares are undefined")
    p = mags / total
    p = p[p > 0]  # shares can underflow to 0 even when the magnitude is not
    return float(-(p * np.log(p)).sum() / math.log(n))


@dataclass(frozen=True)
class AgreementReport:
    r_squared: float
    spearman_rho: Optional[float]
    paired: int

    def to_dict(self) -> dict:
        return {"r_squared": self.r_squared, "spearman_rho": self.spearman_rho, "paired": self.paired}


def spearman(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Spearman rank correlation with average ranks for ties; ``None`` if either side is constant."""
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0:
        return None
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))


def agreement(introspective_values: Sequence[float], ablation_values: Sequence[float]) -> AgreementReport:
    """Score judge-based coalition values against ablation values taken as ground truth."""
    pred = np.asarray(introspective_values, dtype=float)
    truth = np.asarray(ablation_values, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise MetricsError(f"paired vectors differ in shape: {pred.shape} vs {truth.shape}")
    if pred.size < 2:
        raise MetricsError("agreement needs at least two paired coalitions")
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    if ss_tot == 0:
        raise MetricsError("ground-truth values have zero variance; R^2 is undefined")
    ss_res = float(((truth - pred) ** 2).sum())
    return AgreementReport(1.0 - ss_res / ss_tot, spearman(pred, truth), int(pred.size))


@dataclass(frozen=True)
class CostRecord:
    """Token usage of one evaluation; ``model=None`` marks a synthetic (free) run."""

    prompt_tokens: int = 0
    completion_tokens: int = 0
    model: Optional[str] = None

    @classmethod
    def from_entry(cls, entry) -> "CostRecord":
        return cls(entry.prompt_tokens, entry.completion_tokens, entry.model)


def cost_summary(records: Iterable, table: Optional[PricingTable] = None) -> dict:
    """Total tokens and priced cost; raises if a priced model is missing from ``table``."""
    table = table or PricingTable()
    tokens = 0
    costs = []
    for rec in records:
        if not isinstance(rec, CostRecord):
            rec = CostRecord.from_entry(rec)
        tokens += rec.prompt_tokens + rec.completion_tokens
        if rec.model is not None:
            costs.append(price({"prompt": rec.prompt_tokens, "completion": rec.completion_tokens}, rec.model, table))
    return {"tokens": tokens, "cost": math.fsum(costs)}

