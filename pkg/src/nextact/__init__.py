"""Entropy-driven next-activity prediction for business-process event logs.

Typical flow: read a log (:func:`read_log`), measure its process entropy
(:func:`log_entropy`), let :func:`route` pick a model family, build prefix
samples (:func:`generate_prefix_samples`), then fit
:class:`DAWTransformerClassifier`, :class:`ForestClassifier` or
:class:`TreeClassifier` on ``dataset.to_matrix()`` and score with
:func:`evaluate`.
"""

from .baselines import ForestClassifier, TreeClassifier, load_tree_model
from .entropy import (
    EntropyReport,
    TransitionModel,
    complexity_class,
    count_transitions,
    log_entropy,
    normalize_entropies,
    process_entropy,
)
from .evaluation import ConfusionMatrix, EvalReport, cm_entropy, confusion_matrix, evaluate
from .eventlog import Event, EventLog, Trace, parse_csv, parse_xes, read_log
from .features import (
    DYNAMIC,
    EncodedDataset,
    FeatureLayout,
    Window,
    fit_encoders,
    generate_prefix_samples,
    split_by_case,
    undersample,
)
from .pipeline import PipelineConfig, run_pipeline
from .router import RoutingDecision, RoutingPolicy, route
from .synthetic import SyntheticLogSpec, bundled_log_path, generate_synthetic_log
from .transformer import DAWTransformerClassifier

__version__ = "0.1.0"

__all__ = [
    "DYNAMIC",
    "ConfusionMatrix",
    "DAWTransformerClassifier",
    "EncodedDataset",
    "EntropyReport",
    "EvalReport",
    "Event",
    "EventLog",
    "FeatureLayout",
    "ForestClassifier",
    "PipelineConfig",
    "RoutingDecision",
    "RoutingPolicy",
    "SyntheticLogSpec",
    "Trace",
    "TransitionModel",
    "TreeClassifier",
    "Window",
    "bundled_log_path",
    "cm_entropy",
    "complexity_class",
    "confusion_matrix",
    "count_transitions",
    "evaluate",
    "fit_encoders",
    "generate_prefix_samples",
    "generate_synthetic_log",
    "load_tree_model",
    "log_entropy",
    "normalize_entropies",
    "parse_csv",
    "parse_xes",
    "process_entropy",
    "read_log",
    "route",
    "run_pipeline",
    "split_by_case",
    "undersample",
]
