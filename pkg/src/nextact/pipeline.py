"""Stage functions shared by the ``pipeline`` command and the per-stage commands.

Each stage reads its inputs from and writes its artifacts to a run directory,
so running the stages one by one with the same root seed produces the same
files as a single ``run_pipeline`` call.

Artifacts
---------
``entropy.json``   process-entropy report plus the most frequent transitions
``routing.json``   chosen model family, band, rationale and warnings
``manifest.json``  encoders, window, layout and class names
``samples.npz``    flat train/validation/test matrices, targets and case ids
``model.json``     tree/forest model file or transformer checkpoint
``eval.json``      accuracy, per-class scores, confusion matrices
``summary.json``   configuration, stage seeds and library versions
"""

from __future__ import annotations

import json
import logging
import platform
import shutil
import sys
import tempfile
import zipfile
from collections import Counter
from dataclasses import asdict, dataclass
from importlib import metadata
from io import BytesIO
from pathlib import Path

import numpy as np

from . import features as feat
from .baselines import ForestClassifier, TreeClassifier, load_tree_model
from .entropy import EntropyReport, count_transitions, process_entropy
from .evaluation import evaluate
from .eventlog import ColumnMapping, EventLog, EventLogError, read_log
from .router import (
    DAW_TRANSFORMER,
    DECISION_TREE,
    RANDOM_FOREST,
    RoutingPolicy,
    route,
)
from .transformer.estimator import CHECKPOINT_FORMAT, PROFILES, DAWTransformerClassifier

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARSE = 10
EXIT_PREPARE = 20
EXIT_TRAIN = 30
EXIT_EVALUATE = 40
EXIT_CONFIG = 50

STAGE_EXIT = {"parse": EXIT_PARSE, "entropy": EXIT_PARSE, "route": EXIT_PREPARE,
              "prepare": EXIT_PREPARE, "train": EXIT_TRAIN, "evaluate": EXIT_EVALUATE,
              "config": EXIT_CONFIG}

MODELS = (DAW_TRANSFORMER, RANDOM_FOREST, DECISION_TREE)

ENTROPY_FILE = "entropy.json"
ROUTING_FILE = "routing.json"
MANIFEST_FILE = "manifest.json"
SAMPLES_FILE = "samples.npz"
MODEL_FILE = "model.json"
EVAL_FILE = "eval.json"
SUMMARY_FILE = "summary.json"

_SPLITS = ("train", "validation", "test")


class StageError(RuntimeError):
    """A stage failed; ``exit_code`` tells the CLI what to return."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.exit_code = STAGE_EXIT[stage]


@dataclass
class PipelineConfig:
    input: str = ""
    format: str | None = None
    case_column: str = "case_id"
    activity_column: str = "activity"
    timestamp_column: str = "timestamp"
    timestamp_format: str | None = None
    delimiter: str = ","
    attributes: list[str] | None = None
    window: str = "dynamic"
    log_base: str = "2"
    low_threshold: float = 3.0
    high_threshold: float = 5.0
    medium_target: str = "Transformer"
    prefer_interpretable: bool = False
    imbalance_ratio_warn: float = 10.0
    model: str | None = None
    profile: str = "desk"
    epochs: int | None = None
    n_trees: int = 100
    test_fraction: float = 0.2
    validation_fraction: float = 0.2
    undersample: bool = False
    seed: int = 0
    output: str = ""
    top_transitions: int = 10

    def validate(self) -> None:
        if self.log_base not in ("2", "e"):
            raise ValueError(f"log_base must be '2' or 'e', got {self.log_base!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {sorted(PROFILES)}")
        if self.model is not None and self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        feat.Window.parse(self.window)
        self.policy()

    def policy(self) -> RoutingPolicy:
        return RoutingPolicy(self.low_threshold, self.high_threshold, self.medium_target,
                             self.prefer_interpretable, self.imbalance_ratio_warn)

    def mapping(self) -> ColumnMapping:
        return ColumnMapping(case=self.case_column, activity=self.activity_column,
                             timestamp=self.timestamp_column,
                             timestamp_format=self.timestamp_format,
                             delimiter=self.delimiter)


def stage_seeds(root: int) -> dict[str, int]:
    """Independent per-stage seeds spawned from one root seed."""
    children = np.random.SeedSequence(root).spawn(3)
    return {name: int(ss.generate_state(1)[0])
            for name, ss in zip(("prepare", "undersample", "train"), children)}


# -- file helpers -----------------------------------------------------------


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def load_json(path: Path):
    return json.loads(Path(path).read_text())


def _save_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    # np.savez stamps the current time into the zip entries; fixed dates keep
    # the file byte-identical across runs
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = BytesIO()
            np.save(buf, arrays[name], allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_samples(run_dir) -> dict[str, np.ndarray]:
    with np.load(Path(run_dir) / SAMPLES_FILE, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


# -- stages -----------------------------------------------------------------


def load_input(config: PipelineConfig) -> EventLog:
    path = Path(config.input)
    if not path.is_file():
        raise StageError("parse", f"input file not found: {path}")
    try:
        return read_log(path, config.mapping(), config.format)
    except (EventLogError, OSError, UnicodeDecodeError) as exc:
        raise StageError("parse", str(exc)) from exc


def label_histogram(log: EventLog) -> dict[str, int]:
    """How often each activity occurs as a next-activity label."""
    counts = Counter(a for t in log.traces for a in t.activities[1:])
    return dict(sorted(counts.items()))


def run_entropy(log: EventLog, config: PipelineConfig, out: Path | None) -> dict:
    try:
        model = count_transitions(log)
        report = process_entropy(model, config.log_base, config.low_threshold,
                                 config.high_threshold)
    except ValueError as exc:
        raise StageError("entropy", str(exc)) from exc
    payload = report.to_dict()
    payload["top_transitions"] = [
        {"from": a, "to": b, "count": c} for (a, b), c in model.top(config.top_transitions)]
    payload["source"] = log.source
    payload["seed"] = config.seed
    if out is not None:
        dump_json(payload, out / ENTROPY_FILE)
    return payload


def run_route(log: EventLog, config: PipelineConfig, out: Path | None,
              entropy: dict | None = None) -> dict:
    """Route on ``entropy`` (a :func:`run_entropy` payload) or on the run
    directory's ``entropy.json``."""
    ent = entropy if entropy is not None else load_json(out / ENTROPY_FILE)
    report = EntropyReport(ent["entropy"], ent["log_base"], ent["complexity"],
                           ent["transition_count"], ent["distinct_transitions"])
    try:
        decision = route(report, label_histogram(log), config.policy())
    except ValueError as exc:
        raise StageError("route", str(exc)) from exc
    payload = decision.to_dict()
    payload["entropy"] = report.entropy
    payload["seed"] = config.seed
    if out is not None:
        dump_json(payload, out / ROUTING_FILE)
    return payload


def run_prepare(log: EventLog, config: PipelineConfig, out: Path) -> dict:
    seeds = stage_seeds(config.seed)
    try:
        window = feat.Window.parse(config.window)
        train_ids, val_ids, test_ids = feat.split_cases(
            feat.eligible_case_ids(log), config.test_fraction, seeds["prepare"],
            config.validation_fraction)
        # vocabularies and scalers see only cases outside the test split
        encoders = feat.fit_encoders(log, config.attributes,
                                     train_cases=train_ids + val_ids)
        dataset = feat.generate_prefix_samples(log, encoders, window)
    except (ValueError, KeyError) as exc:
        raise StageError("prepare", str(exc)) from exc
    parts = {"train": dataset.with_cases(train_ids),
             "validation": dataset.with_cases(val_ids),
             "test": dataset.with_cases(test_ids)}
    if config.undersample:
        try:
            parts["train"] = feat.undersample(parts["train"], seeds["undersample"])
        except ValueError as exc:
            raise StageError("prepare", str(exc)) from exc

    manifest = dataset.manifest()
    arrays = {}
    for name in _SPLITS:
        part = parts[name]
        arrays[f"X_{name}"] = part.to_matrix()
        arrays[f"y_{name}"] = part.targets
        arrays[f"case_{name}"] = np.array([s.case_id for s in part.samples], dtype=str)
        arrays[f"position_{name}"] = np.array([s.position for s in part.samples],
                                              dtype=np.int64)
    dump_json(manifest, out / MANIFEST_FILE)
    _save_npz(out / SAMPLES_FILE, arrays)
    return {"manifest_hash": feat.manifest_hash(manifest),
            "n_samples": {n: len(parts[n]) for n in _SPLITS},
            "n_cases": {"train": len(train_ids), "validation": len(val_ids),
                        "test": len(test_ids)}}


def _choose_model(config: PipelineConfig, out: Path) -> str:
    if config.model is not None:
        return config.model
    routing = out / ROUTING_FILE
    if not routing.is_file():
        raise StageError("train", "no --model given and no routing decision in the run dir")
    return load_json(routing)["chosen"]


def build_estimator(name: str, config: PipelineConfig, layout, n_classes: int, seed: int):
    if name == DAW_TRANSFORMER:
        overrides = {} if config.epochs is None else {"epochs": config.epochs}
        return DAWTransformerClassifier.from_profile(
            config.profile, layout=layout, classes=np.arange(n_classes),
            random_state=seed, **overrides)
    if name == RANDOM_FOREST:
        return ForestClassifier(n_trees=config.n_trees, random_state=seed)
    if name == DECISION_TREE:
        return TreeClassifier(random_state=seed)
    raise StageError("config", f"unknown model {name!r}")


def run_train(config: PipelineConfig, out: Path) -> dict:
    name = _choose_model(config, out)
    seed = stage_seeds(config.seed)["train"]
    manifest = load_json(out / MANIFEST_FILE)
    data = load_samples(out)
    layout = feat.FeatureLayout.from_dict(manifest["layout"])
    n_classes = len(manifest["class_names"])
    est = build_estimator(name, config, layout, n_classes, seed)
    X, y = data["X_train"], data["y_train"]
    try:
        if name == DAW_TRANSFORMER:
            eval_set = None
            if len(data["y_validation"]):
                eval_set = (data["X_validation"], data["y_validation"])
            est.fit(X, y, eval_set=eval_set)
        else:
            # trees need no early stopping, so they also learn from validation cases
            est.fit(np.vstack([X, data["X_validation"]]),
                    np.concatenate([y, data["y_validation"]]))
        est.save(out / MODEL_FILE, feat.manifest_hash(manifest))
    except (ValueError, FloatingPointError, RuntimeError) as exc:
        raise StageError("train", str(exc)) from exc
    info = {"model": name, "seed": seed}
    if name == DAW_TRANSFORMER:
        info["epochs_run"] = len(est.history_["train_loss"])
        info["best_epoch"] = est.state_.best_epoch
    return info


def load_model(path, manifest_hash: str | None = None):
    """Load any model file written by :func:`run_train`."""
    payload = load_json(path)
    if payload.get("format") == CHECKPOINT_FORMAT:
        return DAWTransformerClassifier.load(path, manifest_hash)
    return load_tree_model(path, manifest_hash)


def run_evaluate(config: PipelineConfig, out: Path, model_path: Path | None = None) -> dict:
    manifest = load_json(out / MANIFEST_FILE)
    data = load_samples(out)
    try:
        model = load_model(model_path or out / MODEL_FILE, feat.manifest_hash(manifest))
        if not len(data["y_test"]):
            raise ValueError("test split is empty")
        predictions = model.predict(data["X_test"])
        report = evaluate(predictions, data["y_test"], manifest["class_names"],
                          config.log_base)
    except (ValueError, OSError) as exc:
        raise StageError("evaluate", str(exc)) from exc
    payload = report.to_dict()
    payload["seed"] = config.seed
    dump_json(payload, out / EVAL_FILE)
    return payload


def _versions() -> dict:
    def version(pkg):
        try:
            return metadata.version(pkg)
        except metadata.PackageNotFoundError:
            return None

    return {"nextact": version("nextact"), "numpy": np.__version__,
            "scikit-learn": version("scikit-learn"),
            "python": platform.python_version()}


def run_pipeline(config: PipelineConfig) -> int:
    """entropy -> route -> prepare -> train -> evaluate into ``config.output``.

    Artifacts are staged in a scratch directory and moved into place only when
    every stage succeeds, so a failed run leaves no partial output. Returns the
    process exit code; the failing stage is named on standard error.
    """
    try:
        config.validate()
    except ValueError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    final = Path(config.output)
    final.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".nextact-", dir=final.parent))
    try:
        event_log = load_input(config)
        ent = run_entropy(event_log, config, scratch)
        decision = run_route(event_log, config, scratch)
        prep = run_prepare(event_log, config, scratch)
        trained = run_train(config, scratch)
        ev = run_evaluate(config, scratch)
        summary = {
            "config": {k: v for k, v in asdict(config).items() if k != "output"},
            "seeds": {"root": config.seed, **stage_seeds(config.seed)},
            "versions": _versions(),
            "entropy": ent["entropy"],
            "complexity": ent["complexity"],
            "chosen": decision["chosen"],
            "prepare": prep,
            "train": trained,
            "accuracy": ev["accuracy"],
        }
        dump_json(summary, scratch / SUMMARY_FILE)
        final.mkdir(parents=True, exist_ok=True)
        for item in sorted(scratch.iterdir()):
            shutil.move(str(item), final / item.name)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return exc.exit_code
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    log.info("run complete: %s accuracy=%.4f", decision["chosen"], ev["accuracy"])
    return EXIT_OK
