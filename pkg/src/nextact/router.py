"""Entropy-driven choice of model family."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .entropy import HIGH, LOW, EntropyReport, complexity_class

DAW_TRANSFORMER = "DAWTransformer"
RANDOM_FOREST = "RandomForest"
DECISION_TREE = "DecisionTree"

TRANSFORMER_TARGET = "Transformer"
TREES_TARGET = "Trees"


@dataclass(frozen=True)
class RoutingPolicy:
    """Band thresholds and tie-breaks for :func:`route`.

    ``medium_target`` picks the family for the Medium band; setting
    ``prefer_interpretable`` sends Medium logs to trees and Low logs to a
    single decision tree instead of a forest.
    """

    low_threshold: float = 3.0
    high_threshold: float = 5.0
    medium_target: str = TRANSFORMER_TARGET
    prefer_interpretable: bool = False
    imbalance_ratio_warn: float = 10.0

    def __post_init__(self):
        if not self.low_threshold < self.high_threshold:
            raise ValueError("low_threshold must be below high_threshold")
        if self.medium_target not in (TRANSFORMER_TARGET, TREES_TARGET):
            raise ValueError(f"medium_target must be {TRANSFORMER_TARGET!r} or "
                             f"{TREES_TARGET!r}")


@dataclass(frozen=True)
class RoutingDecision:
    chosen: str
    complexity: str
    rationale: str
    warnings: tuple[str, ...] = field(default=())
    imbalance_ratio: float | None = None

    def to_dict(self) -> dict:
        return {
            "chosen": self.chosen,
            "complexity": self.complexity,
            "rationale": self.rationale,
            "warnings": list(self.warnings),
            "imbalance_ratio": self.imbalance_ratio,
        }


def imbalance_ratio(label_counts) -> float:
    counts = list(label_counts.values()) if isinstance(label_counts, Mapping) \
        else list(label_counts)
    counts = [c for c in counts if c > 0]
    if not counts:
        raise ValueError("label histogram is empty")
    return max(counts) / min(counts)


def route(report: EntropyReport, label_counts: Mapping | Sequence[int],
          policy: RoutingPolicy | None = None) -> RoutingDecision:
    policy = policy or RoutingPolicy()
    band = complexity_class(report.entropy, policy.low_threshold, policy.high_threshold)
    trees = DECISION_TREE if policy.prefer_interpretable else RANDOM_FOREST
    if band == HIGH:
        chosen = DAW_TRANSFORMER
        why = f"above {policy.high_threshold:g}"
    elif band == LOW:
        chosen = trees
        why = f"below {policy.low_threshold:g}"
    else:
        use_trees = policy.prefer_interpretable or policy.medium_target == TREES_TARGET
        chosen = RANDOM_FOREST if use_trees else DAW_TRANSFORMER
        why = f"within [{policy.low_threshold:g}, {policy.high_threshold:g}]"
    rationale = (f"process entropy {report.entropy:.4f} (base {report.log_base}) is "
                 f"{why}: {band} complexity -> {chosen}")

    ratio = imbalance_ratio(label_counts)
    warnings = []
    if ratio >= policy.imbalance_ratio_warn:
        advice = ("forest handles skew without discarding data" if chosen != DAW_TRANSFORMER
                  else "consider the forest path or under-sampling before training")
        warnings.append(f"class imbalance: largest/smallest class = {ratio:.1f}; {advice}")
    return RoutingDecision(chosen, band, rationale, tuple(warnings), ratio)
