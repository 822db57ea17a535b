"""``nextact`` command-line interface.

Every subcommand accepts ``--config FILE``, a plain ``key = value`` file whose
keys are the long option names (``low-threshold`` or ``low_threshold``).
Options given on the command line override the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .eventlog import EventLogError, log_stats, write_csv, write_xes
from .features import FeatureLayout
from .pipeline import PipelineConfig, StageError
from .synthetic import (
    GRAMMARS,
    InvalidSpecError,
    SyntheticLogSpec,
    deterministic_chain,
    generate_synthetic_log,
    uniform_chain,
)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with the config-error exit code instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(pl.EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _csv_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


# -- parser -----------------------------------------------------------------


def _input_args(p):
    p.add_argument("input", nargs="?", help="event log (.csv, .xes, optionally .gz)")
    p.add_argument("--format", choices=["csv", "xes"], help="override suffix detection")
    p.add_argument("--case-column", default="case_id")
    p.add_argument("--activity-column", default="activity")
    p.add_argument("--timestamp-column", default="timestamp")
    p.add_argument("--timestamp-format", help="strptime format for non-ISO timestamps")
    p.add_argument("--delimiter", default=",")


def _entropy_args(p):
    p.add_argument("--log-base", choices=["2", "e"], default="2")
    p.add_argument("--low-threshold", type=float, default=3.0)
    p.add_argument("--high-threshold", type=float, default=5.0)
    p.add_argument("--top-transitions", type=int, default=10)


def _policy_args(p):
    p.add_argument("--medium-target", choices=["Transformer", "Trees"], default="Transformer")
    p.add_argument("--prefer-interpretable", action="store_true")
    p.add_argument("--imbalance-ratio-warn", type=float, default=10.0)


def _prepare_args(p):
    p.add_argument("--attributes", type=_csv_list,
                   help="comma-separated attributes (activity is always included)")
    p.add_argument("--window", default="dynamic", help="'dynamic' or 'fixed:K'")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--validation-fraction", type=float, default=0.2)
    p.add_argument("--undersample", action="store_true",
                   help="balance training classes down to the rarest class")


def _train_args(p):
    p.add_argument("--model", choices=list(pl.MODELS),
                   help="skip routing and train this model family")
    p.add_argument("--profile", choices=sorted(pl.PROFILES), default="desk")
    p.add_argument("--epochs", type=int, help="override the profile's epoch budget")
    p.add_argument("--n-trees", type=int, default=100)


def _common(p, out_required=False):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0, help="root seed for every stage")
    p.add_argument("-o", "--out", dest="output", required=out_required,
                   help="run directory for artifacts")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nextact", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("entropy", help="process entropy of a log")
    _input_args(p)
    _entropy_args(p)
    _common(p)

    p = sub.add_parser("route", help="choose a model family from the entropy band")
    _input_args(p)
    _entropy_args(p)
    _policy_args(p)
    _common(p)

    p = sub.add_parser("prepare", help="encode prefixes and split by case")
    _input_args(p)
    _prepare_args(p)
    _common(p, out_required=True)

    p = sub.add_parser("train", help="train on a prepared run directory")
    _entropy_args(p)
    _train_args(p)
    _common(p, out_required=True)

    p = sub.add_parser("evaluate", help="score a trained model on the test split")
    _entropy_args(p)
    _common(p, out_required=True)
    p.add_argument("--model-file", help="defaults to the run directory's model")
    p.add_argument("--csv", action="store_true", help="also write confusion-matrix CSVs")
    p.add_argument("--heat", action="store_true", help="print a plain-text heat table")

    p = sub.add_parser("pipeline", help="entropy -> route -> prepare -> train -> evaluate")
    _input_args(p)
    _entropy_args(p)
    _policy_args(p)
    _prepare_args(p)
    _train_args(p)
    _common(p, out_required=True)

    p = sub.add_parser("predict", help="rank next activities for one prepared sample")
    _common(p, out_required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--explain", action="store_true",
                   help="print the decision path (tree models only)")

    p = sub.add_parser("synth", help="write a synthetic event log")
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--grammar", choices=GRAMMARS)
    kind.add_argument("--uniform", type=int, metavar="N", help="uniform N-state chain")
    kind.add_argument("--deterministic", type=int, metavar="N",
                      help="deterministic N-state chain")
    p.add_argument("--n-traces", type=int, default=100)
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--n-starts", type=int, default=2)
    p.add_argument("--alphabet-size", type=int, default=5)
    p.add_argument("--balanced-starts", action="store_true")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", dest="output", help="destination .csv or .xes (default stdout)")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("stats", help="case/event/activity counts")
    _input_args(p)
    _common(p)
    return parser


def _subparsers(parser) -> dict[str, argparse.ArgumentParser]:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return dict(action.choices)


def _apply_config(parser: argparse.ArgumentParser, command: str,
                  values: dict[str, str]) -> None:
    """Install config-file values as defaults of ``command``'s parser.

    One file may serve every subcommand: keys that only other subcommands
    understand are ignored, keys no subcommand understands are an error.
    """
    subs = _subparsers(parser)
    everywhere = {a.dest for p in subs.values() for a in p._actions}
    sub = subs[command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        if key == "config":
            continue
        if key not in everywhere:
            raise ConfigError(f"unknown config key {key!r}")
        action = known.get(key)
        if action is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            low = value.lower()
            if low not in _TRUE | _FALSE:
                raise ConfigError(f"{key}: expected a boolean, got {value!r}")
            defaults[key] = low in _TRUE
        else:
            # argparse runs `type` on string defaults, so conversion and
            # validation match the command-line path
            defaults[key] = value
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in _subparsers(parser):
        _apply_config(parser, known.command, read_config_file(known.config))
    args = parser.parse_args(argv)
    for action in _subparsers(parser)[args.command]._actions:
        value = getattr(args, action.dest, None)
        if action.choices is not None and value is not None and value not in action.choices:
            raise ConfigError(f"{action.dest}: {value!r} is not one of {list(action.choices)}")
    return args


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    names = {f.name for f in dataclasses.fields(PipelineConfig)}
    values = {k: v for k, v in vars(args).items() if k in names and v is not None}
    return PipelineConfig(**values)


# -- commands ---------------------------------------------------------------


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def _run_dir(config: PipelineConfig, create: bool = True) -> Path:
    out = Path(config.output)
    if create:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _need_input(config: PipelineConfig) -> None:
    if not config.input:
        raise ConfigError("an input log is required")


def _optional_dir(config: PipelineConfig) -> Path | None:
    return _run_dir(config) if config.output else None


def cmd_entropy(config: PipelineConfig, args) -> int:
    _need_input(config)
    log = pl.load_input(config)
    _emit(pl.run_entropy(log, config, _optional_dir(config)))
    return pl.EXIT_OK


def cmd_route(config: PipelineConfig, args) -> int:
    _need_input(config)
    log = pl.load_input(config)
    out = _optional_dir(config)
    ent = pl.run_entropy(log, config, out)
    _emit(pl.run_route(log, config, out, ent))
    return pl.EXIT_OK


def cmd_prepare(config: PipelineConfig, args) -> int:
    _need_input(config)
    log = pl.load_input(config)
    _emit(pl.run_prepare(log, config, _run_dir(config)))
    return pl.EXIT_OK


def cmd_train(config: PipelineConfig, args) -> int:
    _emit(pl.run_train(config, _run_dir(config, create=False)))
    return pl.EXIT_OK


def cmd_evaluate(config: PipelineConfig, args) -> int:
    from .evaluation import ConfusionMatrix, heat_table, matrix_csv

    out = _run_dir(config, create=False)
    model_path = Path(args.model_file) if args.model_file else None
    report = pl.run_evaluate(config, out, model_path)
    cm = ConfusionMatrix(np.asarray(report["confusion_matrix"]),
                         tuple(report["class_names"]))
    if args.csv:
        (out / "confusion.csv").write_text(matrix_csv(cm))
        (out / "confusion_normalized.csv").write_text(matrix_csv(cm, normalized=True))
    if args.heat:
        print(heat_table(cm), file=sys.stderr)
    _emit({k: report[k] for k in ("accuracy", "cm_entropy", "cm_entropy_unweighted",
                                  "log_base", "n_samples")})
    return pl.EXIT_OK


def cmd_pipeline(config: PipelineConfig, args) -> int:
    _need_input(config)
    code = pl.run_pipeline(config)
    if code == pl.EXIT_OK:
        _emit(pl.load_json(Path(config.output) / pl.SUMMARY_FILE))
    return code


def cmd_predict(config: PipelineConfig, args) -> int:
    from .features import manifest_hash

    out = _run_dir(config, create=False)
    manifest = pl.load_json(out / pl.MANIFEST_FILE)
    data = pl.load_samples(out)
    X = data[f"X_{args.split}"]
    if not 0 <= args.index < len(X):
        raise ConfigError(f"--index must lie in [0, {len(X)}) for the {args.split} split")
    model = pl.load_model(out / pl.MODEL_FILE, manifest_hash(manifest))
    names = manifest["class_names"]
    x = X[args.index]
    proba = model.predict_proba(x[None, :])[0]
    order = np.argsort(-proba, kind="stable")[: args.top]
    result = {
        "case_id": str(data[f"case_{args.split}"][args.index]),
        "position": int(data[f"position_{args.split}"][args.index]),
        "true": names[int(data[f"y_{args.split}"][args.index])],
        "ranked": [{"activity": names[int(model.classes_[i])],
                    "probability": float(proba[i])} for i in order],
    }
    if args.explain:
        if not hasattr(model, "explain"):
            raise ConfigError("--explain needs a tree or forest model")
        layout = FeatureLayout.from_dict(manifest["layout"])
        label_names = {c: names[int(c)] for c in model.classes_.tolist()}
        result["decision_path"] = model.explain(x, layout.feature_names(),
                                                label_names=label_names)
    _emit(result)
    return pl.EXIT_OK


def cmd_synth(config: PipelineConfig, args) -> int:
    spec = SyntheticLogSpec(n_traces=args.n_traces, seed=args.seed, min_len=args.min_len,
                            max_len=args.max_len, n_starts=args.n_starts,
                            alphabet_size=args.alphabet_size,
                            balanced_starts=args.balanced_starts)
    if args.uniform:
        spec.transitions = uniform_chain(args.uniform)
    elif args.deterministic:
        spec.transitions = deterministic_chain(args.deterministic)
    else:
        spec.grammar = args.grammar or "two-branch"
    try:
        log = generate_synthetic_log(spec)
    except InvalidSpecError as exc:
        raise ConfigError(str(exc)) from exc
    if args.output:
        path = Path(args.output)
        xes = path.name.lower().removesuffix(".gz").endswith(".xes")
        path.write_bytes(write_xes(log) if xes else write_csv(log))
    else:
        sys.stdout.write(write_csv(log).decode("utf-8"))
    return pl.EXIT_OK


def cmd_stats(config: PipelineConfig, args) -> int:
    _need_input(config)
    log = pl.load_input(config)
    stats = dataclasses.asdict(log_stats(log))
    stats["rejected_rows"] = len(log.rejected)
    stats["attributes"] = dict(log.schema.attributes)
    _emit(stats)
    return pl.EXIT_OK


COMMANDS = {
    "entropy": cmd_entropy,
    "route": cmd_route,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "predict": cmd_predict,
    "synth": cmd_synth,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # --help, or an argparse error
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return pl.EXIT_CONFIG
    try:
        config = config_from_args(args)
        if args.command != "synth":
            config.validate()
    except (ConfigError, ValueError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return pl.EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](config, args)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return pl.EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"{args.command}: missing artifact {exc.filename}", file=sys.stderr)
        return pl.STAGE_EXIT.get(args.command, pl.EXIT_CONFIG)
    except EventLogError as exc:
        print(f"parse: {exc}", file=sys.stderr)
        return pl.EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
