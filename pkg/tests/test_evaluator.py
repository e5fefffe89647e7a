import itertools
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leafbg.corpus import LABELS
from leafbg.errors import DataError
from leafbg.evaluator import (ConfusionMatrix, Report, build_report, confusion, evaluate_cell, metrics,
                              write_report)

cells_strategy = st.lists(st.integers(0, 200), min_size=9, max_size=9).filter(lambda c: sum(c) > 0)


def scalar_oracle(cm):
    """Per-class formulas applied one class at a time from raw cell lists."""
    k = len(cm)
    total = sum(sum(r) for r in cm)
    out = {"precision": [], "recall": [], "f1": [], "support": []}
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(k)) - tp
        fn = sum(cm[c]) - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        out["precision"].append(p)
        out["recall"].append(r)
        out["f1"].append(2 * p * r / (p + r) if p + r else 0.0)
        out["support"].append(sum(cm[c]))
    out["accuracy"] = sum(cm[c][c] for c in range(k)) / total
    return out, total


def test_perfect_diagonal():
    cm = confusion([l for l in LABELS for _ in range(103)], [l for l in LABELS for _ in range(103)])
    assert cm.cells.tolist() == [[103, 0, 0], [0, 103, 0], [0, 0, 103]]
    m = metrics(cm)
    assert m.accuracy == m.weighted_precision == m.weighted_recall == m.weighted_f1 == 1.0


def test_scab_row_example():
    true = ["scab"] * 103
    pred = ["healthy"] * 2 + ["scab"] * 101
    cm = confusion(true, pred)
    assert cm.cells[2].tolist() == [2, 0, 101]


def test_hand_example():
    cm = ConfusionMatrix(np.array([[50, 0, 0], [0, 50, 0], [10, 0, 40]]))
    m = metrics(cm)
    assert m.accuracy == pytest.approx(140 / 150, abs=1e-15)
    assert m.precision == pytest.approx({"healthy": 50 / 60, "rust": 1.0, "scab": 1.0})
    assert m.recall == pytest.approx({"healthy": 1.0, "rust": 1.0, "scab": 0.8})
    assert m.f1["healthy"] == pytest.approx(2 * (5 / 6) / (5 / 6 + 1))
    assert m.f1["scab"] == pytest.approx(2 * 0.8 / 1.8)


def test_confusion_against_tally():
    rng = np.random.default_rng(11)
    true = [LABELS[i] for i in rng.integers(0, 3, 30)]
    pred = [LABELS[i] for i in rng.integers(0, 3, 30)]
    cm = confusion(true, pred)
    for i, a in enumerate(LABELS):
        for j, b in enumerate(LABELS):
            assert cm.cells[i, j] == sum(1 for t, p in zip(true, pred) if t == a and p == b)
    assert cm.total == 30


def test_confusion_errors():
    with pytest.raises(DataError):
        confusion(["rust"], ["rust", "scab"])
    with pytest.raises(DataError):
        confusion(["rust"], ["multiple_diseases"])
    with pytest.raises(DataError):
        metrics(ConfusionMatrix(np.zeros((3, 3), int)))


def test_zero_division_flagged():
    cm = ConfusionMatrix(np.array([[5, 0, 0], [3, 0, 0], [0, 0, 4]]))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        m = metrics(cm)
    assert caught and "precision:rust" in m.zero_division
    assert m.precision["rust"] == 0.0 and m.f1["rust"] == 0.0


@settings(max_examples=300, deadline=None)
@given(cells_strategy)
def test_metrics_match_scalar_oracle(cells):
    raw = [cells[0:3], cells[3:6], cells[6:9]]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = metrics(ConfusionMatrix(np.array(raw)))
    o, total = scalar_oracle(raw)
    assert abs(m.accuracy - o["accuracy"]) < 1e-12
    for name in ("precision", "recall", "f1"):
        for c, label in enumerate(LABELS):
            assert abs(getattr(m, name)[label] - o[name][c]) < 1e-12
        weighted = sum(s * v for s, v in zip(o["support"], o[name])) / total
        assert abs(getattr(m, f"weighted_{name}") - weighted) < 1e-12
        assert abs(getattr(m, f"macro_{name}") - sum(o[name]) / 3) < 1e-12
    assert m.weighted_recall == m.accuracy


@settings(max_examples=200, deadline=None)
@given(cells_strategy)
def test_count_identities(cells):
    cm = ConfusionMatrix(np.array(cells).reshape(3, 3))
    assert cm.tp.sum() == np.trace(cm.cells)
    assert (cm.tp + cm.fp + cm.fn + cm.tn).sum() == 3 * cm.total
    assert (cm.tn >= 0).all()


@settings(max_examples=100, deadline=None)
@given(cells_strategy, st.permutations(range(3)))
def test_class_permutation(cells, perm):
    cm = ConfusionMatrix(np.array(cells).reshape(3, 3))
    perm = list(perm)
    permuted = ConfusionMatrix(cm.cells[np.ix_(perm, perm)], tuple(LABELS[i] for i in perm))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a, b = metrics(cm), metrics(permuted)
    assert a.accuracy == b.accuracy
    for name in ("weighted_precision", "weighted_recall", "weighted_f1", "macro_precision", "macro_recall", "macro_f1"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), abs=1e-15)
    assert a.precision == pytest.approx(b.precision)


def _cell(dataset, optimizer, pred, test_ids=("t1", "t2", "t3")):
    return evaluate_cell(dataset, optimizer, list(LABELS), pred, "cfg", test_ids)


def test_report_symmetry_and_round_trip(tmp_path):
    cells = [_cell(d, o, list(LABELS)) for d in ("dataset_1", "dataset_2") for o in ("adam", "rmsprop")]
    report = build_report(cells)
    assert report.delta_accuracy == {"adam": 0.0, "rmsprop": 0.0}
    assert Report.from_json(report.to_json()) == report
    write_report(report, tmp_path)
    pngs = sorted(tmp_path.glob("confusion_*.png"))
    assert len(pngs) == 4 and len({p.read_bytes() for p in pngs}) == 1
    assert len(list(tmp_path.glob("confusion_*.txt"))) == 4
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert len(rows) == 5 and "delta_accuracy_vs_dataset_1" in rows[0]
    data = json.loads((tmp_path / "report.json").read_text())
    assert set(data["cells"]["dataset_2_adam"]) >= {"dataset", "optimizer", "confusion", "metrics", "config_digest"}


def test_report_delta_and_manifest_check():
    worse = _cell("dataset_1", "adam", ["healthy", "rust", "healthy"])
    better = _cell("dataset_2", "adam", list(LABELS))
    assert build_report([worse, better]).delta_accuracy["adam"] == pytest.approx(1 / 3)
    with pytest.raises(DataError):
        build_report([worse, _cell("dataset_2", "adam", list(LABELS), test_ids=("other",))])
