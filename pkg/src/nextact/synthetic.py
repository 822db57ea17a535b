"""Synthetic event logs from Markov chains or small deterministic grammars.

Grammars
--------
``first-event``
    ``n_starts`` start symbols; the rest of each trace is a fixed chain chosen
    by the start symbol, so every next activity is a function of the first
    event and the position.
``two-branch``
    ``A B C D`` or ``E B C F``: a low-entropy log where the final step depends
    on the first event.
``long-range``
    ``S_i``, a random run of filler activities, a closing ``Z``, then ``E_i``.
    The final activity is decided by the first event alone, which a window
    holding only the last event cannot see.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from .eventlog import Event, EventLog, LogSchema, Trace

GRAMMARS = ("first-event", "two-branch", "long-range")

_BASE_TIME = datetime(2024, 1, 1, tzinfo=timezone.utc)


class InvalidSpecError(ValueError):
    pass


def activity_names(n: int) -> list[str]:
    letters = string.ascii_uppercase
    if n <= len(letters):
        return list(letters[:n])
    return [f"A{i:03d}" for i in range(n)]


@dataclass
class SyntheticLogSpec:
    """Either ``transitions`` (row-stochastic, one row per activity) or a
    ``grammar`` name from :data:`GRAMMARS`.

    ``min_len``/``max_len`` bound trace length for chains and the filler run
    of ``long-range``; ``alphabet_size`` sizes chains and ``first-event``.
    """

    n_traces: int = 100
    seed: int = 0
    transitions: np.ndarray | None = None
    initial: np.ndarray | None = None
    grammar: str | None = None
    alphabet_size: int = 5
    n_starts: int = 2
    min_len: int = 2
    max_len: int = 8
    balanced_starts: bool = False
    names: list[str] | None = field(default=None)

    def validate(self) -> None:
        if self.n_traces < 1:
            raise InvalidSpecError("n_traces must be >= 1")
        if (self.transitions is None) == (self.grammar is None):
            raise InvalidSpecError("give exactly one of transitions or grammar")
        if not 1 <= self.min_len <= self.max_len:
            raise InvalidSpecError("need 1 <= min_len <= max_len")
        if self.transitions is not None:
            T = np.asarray(self.transitions, dtype=float)
            if T.ndim != 2 or T.shape[0] != T.shape[1]:
                raise InvalidSpecError("transition matrix must be square")
            if np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0, atol=1e-9, rtol=0):
                raise InvalidSpecError("transition rows must be non-negative and sum to 1")
            if self.initial is not None:
                p = np.asarray(self.initial, dtype=float)
                if p.shape != (T.shape[0],) or abs(p.sum() - 1.0) > 1e-9:
                    raise InvalidSpecError("initial distribution must match and sum to 1")
        elif self.grammar not in GRAMMARS:
            raise InvalidSpecError(f"unknown grammar {self.grammar!r}")


def uniform_chain(n: int) -> np.ndarray:
    return np.full((n, n), 1.0 / n)


def deterministic_chain(n: int) -> np.ndarray:
    """0 -> 1 -> ... -> n-1, with the last state absorbing."""
    T = np.zeros((n, n))
    for i in range(n - 1):
        T[i, i + 1] = 1.0
    T[n - 1, n - 1] = 1.0
    return T


def _first_event_trace(s: int, m: int) -> list[str]:
    names = activity_names(m)
    length = 3 + s % 3
    return [f"S{s}"] + [names[(s + j * (s + 1)) % m] for j in range(length)]


def _grammar_trace(spec: SyntheticLogSpec, case: int, rng) -> list[str]:
    if spec.balanced_starts:
        start = case % spec.n_starts
    else:
        start = int(rng.integers(spec.n_starts))
    if spec.grammar == "first-event":
        return _first_event_trace(start, spec.alphabet_size)
    if spec.grammar == "two-branch":
        return ["A", "B", "C", "D"] if start % 2 == 0 else ["E", "B", "C", "F"]
    # long-range
    n_fill = int(rng.integers(spec.min_len, spec.max_len + 1))
    fillers = [f"M{int(i)}" for i in rng.integers(3, size=n_fill)]
    return [f"S{start}"] + fillers + ["Z", f"E{start}"]


def _chain_trace(spec: SyntheticLogSpec, rng) -> list[str]:
    T = np.asarray(spec.transitions, dtype=float)
    n = T.shape[0]
    names = spec.names or activity_names(n)
    p0 = np.full(n, 1.0 / n) if spec.initial is None else np.asarray(spec.initial)
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    state = int(rng.choice(n, p=p0))
    out = [names[state]]
    for _ in range(length - 1):
        state = int(rng.choice(n, p=T[state]))
        out.append(names[state])
    return out


def generate_synthetic_log(spec: SyntheticLogSpec) -> EventLog:
    """Sample a log; timestamps increase strictly within each trace."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    width = len(str(spec.n_traces - 1))
    traces = []
    for case in range(spec.n_traces):
        if spec.grammar is not None:
            acts = _grammar_trace(spec, case, rng)
        else:
            acts = _chain_trace(spec, rng)
        case_id = f"case_{case:0{width}d}"
        t = _BASE_TIME + timedelta(hours=case)
        events = []
        for act in acts:
            events.append(Event(case_id, act, t))
            t = t + timedelta(seconds=int(rng.integers(1, 3600)))
        traces.append(Trace(case_id, tuple(events)))
    return EventLog(tuple(traces), LogSchema(), source=f"synthetic:{spec.grammar or 'chain'}")


def bundled_log_path() -> Path:
    """Path of the bundled low-entropy example log (two-branch grammar, 200 traces).

    Regenerate with ``nextact synth --grammar two-branch --n-traces 200 --seed 0``.
    """
    return Path(str(resources.files("nextact") / "data" / "synthetic_low.csv"))
