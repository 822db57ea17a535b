"""Acceptance suite: one group of tests per numbered criterion.

Each test carries ``@pytest.mark.criterion(n, title)``; the terminal summary
(see ``conftest.py``) prints one PASS/FAIL/SKIP line per criterion. Each test
also prints its measured values, visible with ``pytest -s``.

Criteria 3 and the real-log half of 11 need the public event logs; point
``NEXTACT_DATA_DIR`` at a directory holding them (XES or CSV, optionally
gzipped) to enable those checks.
"""

import math
import os
import re
import time
from pathlib import Path

import numpy as np
import pytest

from nextact import pipeline as pl
from nextact.baselines import (
    ForestConfig,
    fit_forest,
    fit_tree,
    node_to_dict,
    predict_forest,
    predict_tree,
)
from nextact.cli import main
from nextact.entropy import (
    EntropyReport,
    complexity_class,
    count_transitions,
    log_entropy,
    normalize_entropies,
    process_entropy,
)
from nextact.evaluation import cm_entropy
from nextact.eventlog import ColumnMapping, MissingColumnError, log_stats, read_log
from nextact.features import Window, fit_encoders, generate_prefix_samples, undersample_indices
from nextact.router import DAW_TRANSFORMER, RANDOM_FOREST, route
from nextact.synthetic import (
    SyntheticLogSpec,
    bundled_log_path,
    deterministic_chain,
    generate_synthetic_log,
)
from nextact.transformer import DAWTransformerClassifier, forward, init_params
from nextact.transformer.model import Batch

from .conftest import make_log
from .oracles import finite_difference_errors, flat_histogram_entropy, random_batch, tiny_config

criterion = pytest.mark.criterion

# Published per-log figures: cases, events, activities, entropy, normalized entropy.
PUBLISHED = {
    "Helpdesk": (3804, 13710, 9, 2.6, 0.51),
    "Road Traffic Fine": (150370, 561470, 11, 2.96, 0.58),
    "BPI_2020_Request for Payment": (6886, 36795, 18, 3.21, 0.63),
    "BPI_2017_O": (31509, 193849, 8, 3.24, 0.64),
    "BPI_2020_Prepaid Travel Cost": (2092, 18017, 18, 3.64, 0.72),
    "Sepsis": (781, 9165, 15, 5.07, 1.0),
}
EXPECTED_BANDS = ["Low", "Low", "Medium", "Medium", "Medium", "High"]

# Activity counts of the Road Traffic Fine log.
ROAD_TRAFFIC_COUNTS = {
    "Create Fine": 150370, "Send Fine": 103987, "Insert Fine Notification": 79860,
    "Add penalty": 79860, "Payment": 77601, "Send for Credit Collection": 59013,
    "Insert Date Appeal to Prefecture": 4188, "Send Appeal to Prefecture": 4141,
    "Receive Result Appeal from Prefecture": 999,
    "Notify Result Appeal to Offender": 896, "Appeal to Judge": 555,
}

# File-name patterns (lower-cased, non-alphanumerics removed) for each log.
FILE_PATTERNS = {
    "Helpdesk": r"helpdesk",
    "Road Traffic Fine": r"roadtraffic",
    "BPI_2020_Request for Payment": r"requestforpayment",
    "BPI_2017_O": r"2017(o$|offer)",
    "BPI_2020_Prepaid Travel Cost": r"prepaidtravel",
    "Sepsis": r"sepsis",
}
CSV_MAPPINGS = [
    ColumnMapping(),
    ColumnMapping("Case ID", "Activity", "Complete Timestamp"),
    ColumnMapping("CaseID", "ActivityID", "CompleteTimestamp"),
    ColumnMapping("case:concept:name", "concept:name", "time:timestamp"),
]


def _stem(path: Path) -> str:
    name = path.name.lower()
    for suffix in (".gz", ".xes", ".csv"):
        name = name.removesuffix(suffix)
    return re.sub(r"[^a-z0-9]", "", name)


def find_dataset(name: str) -> Path | None:
    root = os.environ.get("NEXTACT_DATA_DIR")
    if not root or not Path(root).is_dir():
        return None
    for path in sorted(Path(root).iterdir()):
        if re.search(FILE_PATTERNS[name], _stem(path)):
            return path
    return None


def load_dataset(path: Path):
    if ".xes" in path.name.lower():
        return read_log(path)
    for mapping in CSV_MAPPINGS:
        try:
            return read_log(path, mapping)
        except MissingColumnError:
            continue
    raise AssertionError(f"no known column layout fits {path}")


def _elapsed(start: float) -> float:
    return time.perf_counter() - start


# -- 1 ------------------------------------------------------------------------


@criterion(1, "entropy matches flat-histogram oracle on 500 random logs")
def test_entropy_oracle_equivalence():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(500):
        rng = np.random.default_rng(seed)
        alphabet = "ABCDE"[: rng.integers(1, 6)]
        n_traces = rng.integers(1, 11)
        traces = [list(rng.choice(list(alphabet), size=rng.integers(1, 9)))
                  for _ in range(n_traces)]
        if all(len(t) < 2 for t in traces):
            traces[0] = traces[0] + traces[0][:1]
        log = make_log({f"c{i}": t for i, t in enumerate(traces)})
        for base in (2, "e"):
            got = process_entropy(count_transitions(log), base=base).entropy
            want = flat_histogram_entropy(traces, 2 if base == 2 else "e")
            worst = max(worst, abs(got - want))
    elapsed = _elapsed(start)
    print(f"criterion 1: max |diff| = {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-12
    assert elapsed < 5.0


# -- 2 ------------------------------------------------------------------------


@criterion(2, "analytic entropy cases")
def test_deterministic_chain_has_zero_entropy():
    for n_states in (1, 2):
        initial = np.eye(n_states)[0]
        spec = SyntheticLogSpec(n_traces=25, transitions=deterministic_chain(n_states),
                                initial=initial, min_len=2, max_len=2 if n_states == 2 else 6)
        h = log_entropy(generate_synthetic_log(spec)).entropy
        print(f"criterion 2: deterministic {n_states}-state chain H = {h}")
        assert h == 0.0


@criterion(2, "analytic entropy cases")
def test_four_equiprobable_pairs_give_two_bits():
    log = make_log({"c1": ["A", "B"], "c2": ["B", "C"], "c3": ["C", "D"], "c4": ["D", "A"]})
    h = log_entropy(log).entropy
    print(f"criterion 2: uniform over 4 pairs H = {h!r} bits")
    assert abs(h - 2.0) <= 1e-9


# -- 3 ------------------------------------------------------------------------


@criterion(3, "published per-log statistics and entropies (needs NEXTACT_DATA_DIR)")
@pytest.mark.slow
def test_published_log_statistics():
    paths = {name: find_dataset(name) for name in PUBLISHED}
    missing = sorted(n for n, p in paths.items() if p is None)
    if missing:
        pytest.skip(f"public logs not supplied: {', '.join(missing)}")
    matches = {"2": True, "e": True}
    for name, path in paths.items():
        cases, events, activities, h_pub, _ = PUBLISHED[name]
        log = load_dataset(path)
        stats = log_stats(log)
        model = count_transitions(log)
        h = {b: process_entropy(model, base=b).entropy for b in ("2", "e")}
        print(f"criterion 3: {name}: {stats}, H2 = {h['2']:.4f}, He = {h['e']:.4f}")
        assert (stats.cases, stats.events, stats.distinct_activities) == \
            (cases, events, activities)
        for b in matches:
            matches[b] &= abs(h[b] - h_pub) <= 0.05
    print(f"criterion 3: bases reproducing the published entropies: "
          f"{[b for b, ok in matches.items() if ok]}")
    assert any(matches.values())


# -- 4 ------------------------------------------------------------------------


@criterion(4, "normalization reproduces the published column")
def test_normalization_column():
    reports = [EntropyReport(v[3], "2", complexity_class(v[3]), 1, 1)
               for v in PUBLISHED.values()]
    got = [r.normalized for r in normalize_entropies(reports)]
    want = [v[4] for v in PUBLISHED.values()]
    print(f"criterion 4: normalized {np.round(got, 4).tolist()}")
    assert all(abs(g - w) <= 0.005 for g, w in zip(got, want))


# -- 5 ------------------------------------------------------------------------


def _report(h):
    return EntropyReport(h, "2", complexity_class(h), 1, 1)


@criterion(5, "routing golden test")
def test_bands_of_published_entropies():
    bands = [complexity_class(v[3]) for v in PUBLISHED.values()]
    print(f"criterion 5: bands {bands}")
    assert bands == EXPECTED_BANDS


@criterion(5, "routing golden test")
def test_sepsis_and_road_traffic_routes():
    sepsis = route(_report(PUBLISHED["Sepsis"][3]), {"a": 10, "b": 9})
    road = route(_report(PUBLISHED["Road Traffic Fine"][3]), ROAD_TRAFFIC_COUNTS)
    print(f"criterion 5: Sepsis -> {sepsis.chosen}; Road Traffic Fine -> {road.chosen}, "
          f"ratio {road.imbalance_ratio:.2f}, warnings {list(road.warnings)}")
    assert sepsis.chosen == DAW_TRANSFORMER and sepsis.complexity == "High"
    assert road.chosen == RANDOM_FOREST and road.complexity == "Low"
    assert road.imbalance_ratio == pytest.approx(150370 / 555, rel=1e-12)
    assert round(road.imbalance_ratio) == 271
    assert len(road.warnings) == 1 and "imbalance" in road.warnings[0]


# -- 6 ------------------------------------------------------------------------


@criterion(6, "reverse-mode gradients match central differences")
def test_gradient_check():
    start = time.perf_counter()
    config = tiny_config()
    params = init_params(config, seed=0)
    rng = np.random.default_rng(0)
    batch = random_batch(config, 5, rng)
    labels = rng.integers(0, config.num_classes, size=5)
    errors = finite_difference_errors(batch, labels, params, config)
    elapsed = _elapsed(start)
    print(f"criterion 6: worst relative error {max(errors.values()):.2e} "
          f"over {len(errors)} tensors, {elapsed:.1f} s")
    assert set(errors) == set(params)
    assert max(errors.values()) <= 1e-4
    assert elapsed < 60.0


# -- 7 ------------------------------------------------------------------------


@criterion(7, "masked positions do not affect outputs")
def test_mask_invariance():
    config = tiny_config()
    params = init_params(config, seed=1)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        batch = random_batch(config, 1, rng)
        hidden = ~batch.mask[0]
        cat, num = batch.cat.copy(), batch.num.copy()
        for a, (_, vocab, _) in enumerate(config.categorical):
            cat[0, a, hidden] = rng.integers(0, vocab, size=hidden.sum())
        num[0, :, hidden] = rng.normal(scale=50.0, size=(hidden.sum(), num.shape[1]))
        noisy = Batch(cat, num, batch.mask, batch.scalars)
        diff = np.abs(forward(noisy, params, config) - forward(batch, params, config)).max()
        worst = max(worst, float(diff))
    print(f"criterion 7: worst output change {worst:.2e}")
    assert worst <= 1e-6


# -- 8 ------------------------------------------------------------------------


@criterion(8, "softmax rows sum to one")
def test_softmax_contract():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        config = tiny_config(dropout=0.3 if seed % 2 else 0.0)
        params = init_params(config, seed=seed)
        batch = random_batch(config, int(rng.integers(1, 20)), rng)
        for train in (False, True):
            probs = forward(batch, params, config, train, rng)
            assert (probs >= 0).all()
            worst = max(worst, float(np.abs(probs.sum(axis=1) - 1).max()))
    print(f"criterion 8: worst |row sum - 1| = {worst:.2e}")
    assert worst <= 1e-6


# -- 9 ------------------------------------------------------------------------


@criterion(9, "transformer overfits a deterministic grammar")
@pytest.mark.slow
def test_overfit_deterministic_grammar():
    start = time.perf_counter()
    log = generate_synthetic_log(SyntheticLogSpec(n_traces=200, seed=0, grammar="first-event"))
    ds = generate_prefix_samples(log, fit_encoders(log, ["activity"]))
    X, y = ds.to_matrix(), ds.targets
    est = DAWTransformerClassifier.from_profile(
        "desk", layout=ds.layout, classes=np.arange(len(ds.class_names)), epochs=100,
        patience=None, validation_fraction=0.0, random_state=0)
    est.fit(X, y)
    acc = est.score(X, y)
    elapsed = _elapsed(start)
    print(f"criterion 9: train accuracy {acc:.4f} on {len(X)} samples, "
          f"{len(est.history_['train_loss'])} epochs, {elapsed:.1f} s")
    assert acc >= 0.99
    assert elapsed < 180.0


# -- 10 -----------------------------------------------------------------------


def _final_positions(ds) -> np.ndarray:
    """Index of each case's last prefix sample (the one whose label hinges on
    the first event)."""
    last = {}
    for i, s in enumerate(ds.samples):
        if s.case_id not in last or s.position > ds.samples[last[s.case_id]].position:
            last[s.case_id] = i
    return np.array(sorted(last.values()))


def _long_range_accuracy(seed: int, window: Window):
    spec = dict(grammar="long-range", balanced_starts=True)
    train = generate_synthetic_log(SyntheticLogSpec(n_traces=400, seed=seed, **spec))
    test = generate_synthetic_log(SyntheticLogSpec(n_traces=200, seed=1000 + seed, **spec))
    encoders = fit_encoders(train, ["activity"])
    tr = generate_prefix_samples(train, encoders, window)
    te = generate_prefix_samples(test, encoders, window, max_len=tr.max_len)
    est = DAWTransformerClassifier.from_profile(
        "desk", layout=tr.layout, classes=np.arange(len(tr.class_names)), epochs=30,
        random_state=seed)
    est.fit(tr.to_matrix(), tr.targets, groups=[s.case_id for s in tr.samples])
    idx = _final_positions(te)
    X, y = te.to_matrix()[idx], te.targets[idx]
    majority = np.bincount(y).max() / len(y)
    return est.score(X, y), majority


@criterion(10, "dynamic window separates where Fixed(1) cannot")
@pytest.mark.slow
def test_dynamic_window_separation():
    start = time.perf_counter()
    for seed in range(3):
        dynamic, majority = _long_range_accuracy(seed, Window())
        fixed, _ = _long_range_accuracy(seed, Window(1))
        print(f"criterion 10: seed {seed}: dynamic {dynamic:.3f}, fixed(1) {fixed:.3f}, "
              f"majority {majority:.3f}")
        assert dynamic >= 0.95
        assert abs(fixed - majority) <= 0.1
    elapsed = _elapsed(start)
    print(f"criterion 10: {elapsed:.1f} s")
    assert elapsed < 300.0


# -- 11 -----------------------------------------------------------------------


@criterion(11, "under-sampling cuts every class to the minority count")
def test_undersampling_synthetic():
    rng = np.random.default_rng(0)
    labels = rng.permutation(np.repeat([0, 1, 2, 3], [500, 120, 37, 9]))
    kept = np.bincount(labels[undersample_indices(labels, seed=1)])
    print(f"criterion 11: synthetic counts after sampling {kept.tolist()}")
    assert kept.tolist() == [9, 9, 9, 9]


@criterion(11, "under-sampling cuts every class to the minority count")
def test_undersampling_road_traffic_counts():
    names = list(ROAD_TRAFFIC_COUNTS)
    labels = np.repeat(np.arange(len(names)), list(ROAD_TRAFFIC_COUNTS.values()))
    kept = np.bincount(labels[undersample_indices(labels, seed=0)], minlength=len(names))
    print(f"criterion 11: Road Traffic Fine counts after sampling {sorted(set(kept))}")
    assert set(kept.tolist()) == {555}


@criterion(11, "under-sampling cuts every class to the minority count")
@pytest.mark.slow
def test_undersampling_road_traffic_log():
    path = find_dataset("Road Traffic Fine")
    if path is None:
        pytest.skip("Road Traffic Fine log not supplied")
    log = load_dataset(path)
    labels = np.array([e.activity for t in log.traces for e in t.events])
    _, counts = np.unique(labels, return_counts=True)
    assert sorted(counts.tolist()) == sorted(ROAD_TRAFFIC_COUNTS.values())
    _, kept = np.unique(labels[undersample_indices(labels, seed=0)], return_counts=True)
    assert set(kept.tolist()) == {555}


# -- 12 -----------------------------------------------------------------------


@criterion(12, "forest invariants")
def test_forest_vote_is_mode_of_trees():
    rng = np.random.default_rng(12)
    X, y = rng.normal(size=(300, 6)), rng.integers(0, 5, size=300)
    forest = fit_forest(X, y, ForestConfig(n_trees=25, seed=4))
    probe = rng.normal(size=(1000, 6))
    per_tree = np.stack([predict_tree(t, probe) for t in forest.trees])
    mismatches = 0
    for i, x in enumerate(probe):
        mode = int(np.argmax(np.bincount(per_tree[:, i], minlength=5)))
        mismatches += predict_forest(forest, x)[0] != mode
    print(f"criterion 12: {mismatches} mismatches against the tree mode on 1000 inputs")
    assert mismatches == 0


@criterion(12, "forest invariants")
def test_degenerate_forest_equals_tree():
    rng = np.random.default_rng(13)
    X, y = rng.integers(0, 4, size=(200, 5)).astype(float), rng.integers(0, 3, size=200)
    forest = fit_forest(X, y, ForestConfig(n_trees=1, bootstrap=False, feature_fraction=1.0))
    tree = fit_tree(X, y)
    probe = rng.integers(0, 4, size=(1000, 5)).astype(float)
    same = all(predict_forest(forest, x)[0] == p
               for x, p in zip(probe, predict_tree(tree, probe)))
    print(f"criterion 12: degenerate forest identical to tree: {same}")
    assert node_to_dict(forest.trees[0]) == node_to_dict(tree)
    assert same


# -- 13 -----------------------------------------------------------------------


@criterion(13, "confusion-matrix entropy")
def test_confusion_matrix_entropy():
    assert cm_entropy(np.diag([5, 3, 8])) == 0.0
    for C in (2, 3, 7):
        for base, log in (("2", math.log2), ("e", math.log)):
            assert abs(cm_entropy(np.full((C, C), 6), base=base) - log(C)) <= 1e-9
    h = cm_entropy(np.array([[8, 2], [1, 9]]), base=2)
    print(f"criterion 13: two-class example {h:.6f} bits")
    assert abs(h - 0.5955) <= 1e-4


# -- 14 -----------------------------------------------------------------------


@criterion(14, "end-to-end pipeline on the bundled log")
def test_pipeline_end_to_end(tmp_path):
    start = time.perf_counter()
    out = tmp_path / "run"
    code = main(["pipeline", str(bundled_log_path()), "-o", str(out)])
    elapsed = _elapsed(start)
    assert code == pl.EXIT_OK
    summary = pl.load_json(out / pl.SUMMARY_FILE)
    print(f"criterion 14: exit {code}, {summary['complexity']} -> {summary['chosen']}, "
          f"accuracy {summary['accuracy']}, {elapsed:.1f} s")
    for name in (pl.ENTROPY_FILE, pl.ROUTING_FILE, pl.MANIFEST_FILE, pl.SAMPLES_FILE,
                 pl.MODEL_FILE, pl.EVAL_FILE):
        assert (out / name).is_file()
    assert summary["accuracy"] == 1.0
    assert elapsed < 120.0


# -- helpers used by the conditional checks -----------------------------------


def test_dataset_discovery(tmp_path, monkeypatch):
    for name in ("Helpdesk.csv", "BPI Challenge 2017 - Offer log.xes.gz", "Sepsis Cases.xes",
                 "BPI_2020_RequestForPayment.xes", "PrepaidTravelCost.xes.gz",
                 "Road_Traffic_Fine_Management_Process.xes.gz", "notes.txt"):
        (tmp_path / name).write_text("")
    monkeypatch.setenv("NEXTACT_DATA_DIR", str(tmp_path))
    found = {n: find_dataset(n).name for n in PUBLISHED}
    assert found["BPI_2017_O"] == "BPI Challenge 2017 - Offer log.xes.gz"
    assert found["Road Traffic Fine"].startswith("Road_Traffic")
    assert len(set(found.values())) == 6
    monkeypatch.delenv("NEXTACT_DATA_DIR")
    assert find_dataset("Sepsis") is None


def test_csv_layout_fallback(tmp_path):
    path = tmp_path / "Helpdesk.csv"
    path.write_text("CaseID,ActivityID,CompleteTimestamp\n"
                    "1,A,2012-10-09 14:50:17\n1,B,2012-10-09 14:51:01\n")
    assert log_stats(load_dataset(path)).events == 2
