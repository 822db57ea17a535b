"""Process entropy: Shannon entropy of the activity-transition pair distribution."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .eventlog import EmptyLogError, EventLog

LOW = "Low"
MEDIUM = "Medium"
HIGH = "High"

DEFAULT_LOW_THRESHOLD = 3.0
DEFAULT_HIGH_THRESHOLD = 5.0


class NoTransitionsError(ValueError):
    """Every trace is a singleton, so there is no transition to measure."""


class AllZeroEntropyError(ValueError):
    pass


@dataclass(frozen=True)
class TransitionModel:
    counts: Counter = field(default_factory=Counter)
    alphabet: tuple[str, ...] = ()

    @property
    def total_transitions(self) -> int:
        return sum(self.counts.values())

    def merge(self, other: "TransitionModel") -> "TransitionModel":
        alphabet = tuple(dict.fromkeys(self.alphabet + other.alphabet))
        return TransitionModel(self.counts + other.counts, alphabet)

    def top(self, n: int = 10) -> list[tuple[tuple[str, str], int]]:
        # ties broken by pair so reports are stable
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]


@dataclass(frozen=True)
class EntropyReport:
    entropy: float
    log_base: str
    complexity: str
    transition_count: int
    distinct_transitions: int
    normalized: float | None = None

    def to_dict(self) -> dict:
        return {
            "entropy": self.entropy,
            "log_base": self.log_base,
            "normalized": self.normalized,
            "complexity": self.complexity,
            "transition_count": self.transition_count,
            "distinct_transitions": self.distinct_transitions,
        }


def _log_fn(base):
    if base in (2, "2"):
        return math.log2, "2"
    if base in ("e", math.e):
        return math.log, "e"
    raise ValueError(f"log base must be 2 or 'e', got {base!r}")


def count_transitions(log: EventLog) -> TransitionModel:
    """Count consecutive activity pairs within each trace (never across traces)."""
    if len(log) == 0:
        raise EmptyLogError("log has no traces")
    counts: Counter = Counter()
    for trace in log.traces:
        acts = trace.activities
        counts.update(zip(acts, acts[1:]))
    return TransitionModel(counts, tuple(log.activities()))


def entropy_of_counts(counts: Iterable[int], base=2) -> float:
    """Shannon entropy of the empirical distribution given by ``counts``."""
    log, _ = _log_fn(base)
    counts = [c for c in counts if c > 0]
    total = sum(counts)
    if total == 0:
        raise NoTransitionsError("no observations")
    h = 0.0
    for c in counts:
        p = c / total
        h -= p * log(p)
    return max(h, 0.0)


def complexity_class(entropy: float, low: float = DEFAULT_LOW_THRESHOLD,
                     high: float = DEFAULT_HIGH_THRESHOLD) -> str:
    """Band an entropy value: below ``low`` is Low, above ``high`` is High,
    and the closed interval between them is Medium."""
    if entropy < 0:
        raise ValueError("entropy must be non-negative")
    if entropy < low:
        return LOW
    if entropy > high:
        return HIGH
    return MEDIUM


def process_entropy(model: TransitionModel, base=2, low: float = DEFAULT_LOW_THRESHOLD,
                    high: float = DEFAULT_HIGH_THRESHOLD) -> EntropyReport:
    if model.total_transitions == 0:
        raise NoTransitionsError("log has no transitions (all traces are singletons)")
    _, base_name = _log_fn(base)
    h = entropy_of_counts(model.counts.values(), base)
    return EntropyReport(
        entropy=h,
        log_base=base_name,
        complexity=complexity_class(h, low, high),
        transition_count=model.total_transitions,
        distinct_transitions=len(model.counts),
    )


def log_entropy(log: EventLog, base=2, **thresholds) -> EntropyReport:
    return process_entropy(count_transitions(log), base, **thresholds)


def normalize_entropies(reports: Sequence[EntropyReport]) -> list[EntropyReport]:
    """Scale every entropy by the largest one in ``reports``."""
    if not reports:
        raise ValueError("need at least one report")
    top = max(r.entropy for r in reports)
    if top <= 0:
        raise AllZeroEntropyError("every report has zero entropy")
    return [replace(r, normalized=r.entropy / top) for r in reports]
