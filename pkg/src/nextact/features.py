"""Prefix-sample construction: attribute encoding, windowing, padding, splits.

Each trace of length ``L`` yields ``L - 1`` prefix samples. Prefixes are
right-aligned inside a window of ``max_len`` slots, so the most recent event
always sits in the last slot and padding fills the front.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Sequence

import numpy as np

from .eventlog import CATEGORICAL, NUMERIC, EventLog, Trace

PAD = 0
UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

TIME_SINCE_PREV = "time_since_prev"
TIME_SINCE_START = "time_since_start"
DERIVED_ATTRIBUTES = (TIME_SINCE_PREV, TIME_SINCE_START)

RESOURCE_LIKE = ("org:resource", "resource", "org:group", "org:role", "user")

MANIFEST_VERSION = 1


class UnknownAttributeError(KeyError):
    pass


class TooFewCasesError(ValueError):
    pass


class SingleClassError(ValueError):
    pass


class ManifestMismatchError(ValueError):
    """A model or sample does not belong to the dataset manifest in use."""


# -- windows ----------------------------------------------------------------


@dataclass(frozen=True)
class Window:
    """``Window()`` is the dynamic (full-history) window; ``Window(k)`` keeps
    only the ``k`` most recent events."""

    k: int | None = None

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError("fixed window needs k >= 1")

    @property
    def dynamic(self) -> bool:
        return self.k is None

    def __str__(self) -> str:
        return "dynamic" if self.k is None else f"fixed:{self.k}"

    @classmethod
    def parse(cls, text: str) -> "Window":
        text = text.strip().lower()
        if text == "dynamic":
            return cls()
        if text.startswith("fixed"):
            _, _, k = text.partition(":")
            return cls(int(k) if k else 5)
        raise ValueError(f"unknown window {text!r}; use 'dynamic' or 'fixed:K'")


DYNAMIC = Window()


# -- encoders ---------------------------------------------------------------


@dataclass
class AttributeEncoder:
    attribute: str
    kind: str
    vocabulary: dict[str, int] | None = None
    mean: float | None = None
    std: float | None = None

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary) if self.vocabulary is not None else 0

    @property
    def tokens(self) -> list[str]:
        return sorted(self.vocabulary, key=self.vocabulary.__getitem__)

    def encode(self, value) -> int | float:
        if self.kind == CATEGORICAL:
            if value is None:
                return UNK
            return self.vocabulary.get(str(value), UNK)
        if value is None or isinstance(value, str) or not math.isfinite(value):
            return 0.0
        return (float(value) - self.mean) / self.std

    def decode(self, code):
        if self.kind == CATEGORICAL:
            return self.tokens[int(code)]
        return float(code) * self.std + self.mean

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "kind": self.kind,
            "vocabulary": self.vocabulary,
            "mean": self.mean,
            "std": self.std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeEncoder":
        return cls(d["attribute"], d["kind"], d.get("vocabulary"), d.get("mean"),
                   d.get("std"))


def _trace_values(trace: Trace, attribute: str, kind: str) -> list:
    """Raw per-event values of one attribute (numeric kinds as floats/None)."""
    if attribute == "activity":
        return trace.activities
    if attribute == TIME_SINCE_START:
        t0 = trace.events[0].timestamp
        return [(e.timestamp - t0).total_seconds() for e in trace.events]
    if attribute == TIME_SINCE_PREV:
        out = [0.0]
        for prev, cur in zip(trace.events, trace.events[1:]):
            out.append((cur.timestamp - prev.timestamp).total_seconds())
        return out
    values = [e.extras.get(attribute) for e in trace.events]
    if kind == CATEGORICAL:
        return [None if v is None else str(v) for v in values]
    out = []
    for v, e in zip(values, trace.events):
        if isinstance(v, float):
            out.append(v)
        elif isinstance(v, datetime):
            # timestamp attributes become seconds relative to the event itself
            out.append((v - e.timestamp).total_seconds())
        else:
            out.append(None)
    return out


def default_attributes(log: EventLog) -> list[str]:
    """Activity, any resource-like categorical column, and both time features."""
    chosen = ["activity"]
    for name, kind in log.schema.attributes.items():
        if kind == CATEGORICAL and name.lower() in RESOURCE_LIKE:
            chosen.append(name)
    return chosen + list(DERIVED_ATTRIBUTES)


def fit_encoders(log: EventLog, selected_attributes: Iterable[str] | None = None,
                 train_cases: Iterable[str] | None = None) -> list[AttributeEncoder]:
    """Fit one encoder per selected attribute on the training cases only.

    Categorical vocabularies reserve index 0 for padding and 1 for unseen
    tokens; numeric encoders store the training mean and standard deviation.
    """
    if selected_attributes is None:
        selected_attributes = default_attributes(log)
    names = list(dict.fromkeys(selected_attributes))
    if "activity" in names:
        names.remove("activity")
    names.insert(0, "activity")
    kinds = {}
    for name in names:
        if name == "activity":
            kinds[name] = CATEGORICAL
        elif name in DERIVED_ATTRIBUTES:
            kinds[name] = NUMERIC
        elif name in log.schema.attributes:
            kind = log.schema.attributes[name]
            kinds[name] = CATEGORICAL if kind == CATEGORICAL else NUMERIC
        else:
            raise UnknownAttributeError(name)

    train = log.traces if train_cases is None else log.subset(train_cases).traces
    if not train:
        raise ValueError("no training cases to fit encoders on")
    encoders = []
    for name in names:
        kind = kinds[name]
        values = [v for t in train for v in _trace_values(t, name, kind)]
        if kind == CATEGORICAL:
            tokens = sorted({v for v in values if v is not None})
            vocab = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
            vocab.update({tok: i + 2 for i, tok in enumerate(tokens)})
            encoders.append(AttributeEncoder(name, CATEGORICAL, vocabulary=vocab))
        else:
            xs = np.array([v for v in values if v is not None], dtype=float)
            mean = float(xs.mean()) if xs.size else 0.0
            std = float(xs.std()) if xs.size else 0.0
            if not std > 0:
                warnings.warn(f"attribute {name!r} has zero variance; using std=1",
                              stacklevel=2)
                std = 1.0
            encoders.append(AttributeEncoder(name, NUMERIC, mean=mean, std=std))
    return encoders


# -- samples ----------------------------------------------------------------


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of the flat per-sample vector shared by every model.

    ``[cat_0 slots | cat_1 slots | ... | num_0 slots | ... | prefix_len]``
    """

    categorical: tuple[tuple[str, int], ...]
    numeric: tuple[str, ...]
    max_len: int

    @property
    def n_features(self) -> int:
        return (len(self.categorical) + len(self.numeric)) * self.max_len + 1

    def split(self, X: np.ndarray):
        """Unpack a flat matrix into ``(cat, num, prefix_len, mask)`` arrays."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} columns for this layout, got {X.shape}")
        n, L = X.shape[0], self.max_len
        nc, nn = len(self.categorical), len(self.numeric)
        cat = X[:, : nc * L].reshape(n, nc, L).astype(np.int64)
        num = X[:, nc * L: (nc + nn) * L].reshape(n, nn, L)
        prefix_len = X[:, -1].astype(np.int64)
        mask = np.arange(L)[None, :] >= (L - prefix_len)[:, None]
        return cat, num, prefix_len, mask

    def feature_names(self) -> list[str]:
        """Column names such as ``activity[t-1]`` (the most recent event)."""
        L = self.max_len
        names = []
        for attr in [c[0] for c in self.categorical] + list(self.numeric):
            names += [f"{attr}[t-{L - j}]" for j in range(L)]
        return names + ["prefix_len"]

    def to_dict(self) -> dict:
        return {
            "categorical": [list(c) for c in self.categorical],
            "numeric": list(self.numeric),
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        return cls(tuple((n, int(v)) for n, v in d["categorical"]), tuple(d["numeric"]),
                   int(d["max_len"]))


@dataclass(frozen=True)
class PrefixSample:
    case_id: str
    position: int
    categorical_seqs: dict[str, np.ndarray]
    numeric_seqs: dict[str, np.ndarray]
    mask: np.ndarray
    label: int
    prefix_len: int


def flatten_for_trees(sample: PrefixSample) -> np.ndarray:
    parts = [seq.astype(float) for seq in sample.categorical_seqs.values()]
    parts += [seq.astype(float) for seq in sample.numeric_seqs.values()]
    parts.append(np.array([float(sample.prefix_len)]))
    return np.concatenate(parts)


@dataclass
class EncodedDataset:
    samples: list[PrefixSample]
    encoders: list[AttributeEncoder]
    window: Window
    max_len: int
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.class_names:
            # every non-PAD activity token; class position = label - 1
            self.class_names = tuple(self.encoders[0].tokens[1:])

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(
            tuple((e.attribute, e.vocab_size) for e in self.encoders
                  if e.kind == CATEGORICAL),
            tuple(e.attribute for e in self.encoders if e.kind == NUMERIC),
            self.max_len,
        )

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        """Labels as 0-based positions into ``class_names``."""
        return self.labels - 1

    @property
    def case_ids(self) -> list[str]:
        return list(dict.fromkeys(s.case_id for s in self.samples))

    def to_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.layout.n_features))
        return np.stack([flatten_for_trees(s) for s in self.samples])

    def subset(self, indices: Iterable[int]) -> "EncodedDataset":
        return EncodedDataset([self.samples[i] for i in indices], self.encoders,
                              self.window, self.max_len, self.class_names)

    def with_cases(self, case_ids: Iterable[str]) -> "EncodedDataset":
        keep = set(case_ids)
        return self.subset(i for i, s in enumerate(self.samples) if s.case_id in keep)

    def manifest(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "encoders": [e.to_dict() for e in self.encoders],
            "window": str(self.window),
            "max_len": self.max_len,
            "layout": self.layout.to_dict(),
            "class_names": list(self.class_names),
        }


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def encoders_from_manifest(manifest: dict) -> list[AttributeEncoder]:
    return [AttributeEncoder.from_dict(d) for d in manifest["encoders"]]


def _encode_trace(trace: Trace, encoders: Sequence[AttributeEncoder]):
    cat, num = {}, {}
    for enc in encoders:
        raw = _trace_values(trace, enc.attribute, enc.kind)
        codes = [enc.encode(v) for v in raw]
        if enc.kind == CATEGORICAL:
            cat[enc.attribute] = np.array(codes, dtype=np.int64)
        else:
            num[enc.attribute] = np.array(codes, dtype=float)
    return cat, num


def generate_prefix_samples(log: EventLog, encoders: Sequence[AttributeEncoder],
                            window: Window = DYNAMIC,
                            max_len: int | None = None) -> EncodedDataset:
    """Emit one sample per (trace, position) with the next activity as label.

    ``max_len`` pins the window capacity (e.g. to a trained model's manifest);
    longer prefixes then keep only their most recent events.
    """
    if encoders[0].attribute != "activity":
        raise ValueError("the first encoder must be the activity encoder")
    if max_len is None:
        if window.dynamic:
            longest = max(len(t) for t in log.traces) if len(log) else 1
            max_len = max(longest - 1, 1)
        else:
            max_len = window.k
    samples = []
    for trace in sorted(log.traces, key=lambda t: t.case_id):
        n = len(trace)
        if n < 2:
            continue
        cat, num = _encode_trace(trace, encoders)
        activity = cat["activity"]
        for i in range(1, n):
            start = 0 if window.dynamic else max(0, i - window.k)
            start = max(start, i - max_len)
            plen = i - start
            pad = max_len - plen
            cseq = {}
            for name, codes in cat.items():
                seq = np.full(max_len, PAD, dtype=np.int64)
                seq[pad:] = codes[start:i]
                cseq[name] = seq
            nseq = {}
            for name, vals in num.items():
                seq = np.zeros(max_len)
                seq[pad:] = vals[start:i]
                nseq[name] = seq
            mask = np.zeros(max_len, dtype=bool)
            mask[pad:] = True
            samples.append(PrefixSample(trace.case_id, i, cseq, nseq, mask,
                                        int(activity[i]), plen))
    return EncodedDataset(samples, list(encoders), window, max_len)


def decode_sample(sample: PrefixSample, encoders: Sequence[AttributeEncoder]) -> list[dict]:
    """Recover per-event attribute values for the real (unmasked) slots."""
    slots = np.flatnonzero(sample.mask)
    events = []
    for pos in slots:
        ev = {}
        for enc in encoders:
            if enc.kind == CATEGORICAL:
                ev[enc.attribute] = enc.decode(sample.categorical_seqs[enc.attribute][pos])
            else:
                ev[enc.attribute] = enc.decode(sample.numeric_seqs[enc.attribute][pos])
        events.append(ev)
    return events


# -- splitting and resampling -----------------------------------------------


@dataclass
class SplitDataset:
    train: EncodedDataset
    validation: EncodedDataset
    test: EncodedDataset
    seed: int


def eligible_case_ids(log: EventLog) -> list[str]:
    """Cases that produce at least one prefix sample."""
    return sorted(t.case_id for t in log.traces if len(t) >= 2)


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_cases(case_ids: Iterable[str], test_fraction: float = 0.2, seed: int = 0,
                validation_fraction: float = 0.2):
    """Shuffle cases and cut them into ``(train, validation, test)`` id lists."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    if not 0 <= validation_fraction < 1:
        raise ValueError("validation_fraction must lie in [0, 1)")
    ids = sorted(set(case_ids))
    if len(ids) < 5:
        raise TooFewCasesError(f"need at least 5 cases to split, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_test = max(1, _round(test_fraction * len(ids)))
    test, pool = shuffled[:n_test], shuffled[n_test:]
    n_val = max(1, _round(validation_fraction * len(pool))) if validation_fraction else 0
    return pool[n_val:], pool[:n_val], test


def split_by_case(dataset: EncodedDataset, test_fraction: float = 0.2, seed: int = 0,
                  validation_fraction: float = 0.2) -> SplitDataset:
    train, val, test = split_cases(dataset.case_ids, test_fraction, seed,
                                   validation_fraction)
    return SplitDataset(dataset.with_cases(train), dataset.with_cases(val),
                        dataset.with_cases(test), seed)


def undersample_indices(labels: np.ndarray, seed: int = 0) -> np.ndarray:
    """Indices keeping a uniform random subset of each class, sized to the
    rarest class. Returned in ascending order."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise SingleClassError("under-sampling needs at least two classes")
    rng = np.random.default_rng(seed)
    n_min = counts.min()
    keep = [rng.choice(np.flatnonzero(labels == c), size=n_min, replace=False)
            for c in classes]
    return np.sort(np.concatenate(keep))


def undersample(dataset: EncodedDataset, seed: int = 0) -> EncodedDataset:
    return dataset.subset(undersample_indices(dataset.labels, seed).tolist())
