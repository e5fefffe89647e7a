"""Confusion matrices, accuracy / precision / recall / F1, and the comparison report.

Per-class metrics are computed as exact fractions and rounded once, so the
support-weighted recall is bit-identical to the accuracy.
"""
from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import LABELS
from .errors import DataError

METRIC_NAMES = ("precision", "recall", "f1")
SUMMARY_COLUMNS = ("cell", "dataset", "optimizer", "accuracy", "precision", "recall", "f1",
                   "delta_accuracy_vs_dataset_1")


@dataclass(frozen=True)
class ConfusionMatrix:
    cells: np.ndarray  # rows = true class, columns = predicted class
    classes: tuple[str, ...] = LABELS

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        k = len(self.classes)
        if cells.shape != (k, k):
            raise DataError(f"confusion matrix must be {k}x{k}, got {cells.shape}")
        if (cells < 0).any():
            raise DataError("confusion matrix cells must be non-negative")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def total(self) -> int:
        return int(self.cells.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.cells).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.cells.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.cells.sum(axis=1) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn

    @property
    def support(self) -> np.ndarray:
        return self.cells.sum(axis=1)

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and self.classes == other.classes
                and np.array_equal(self.cells, other.cells))

    def to_text(self) -> str:
        width = max(len(c) for c in self.classes) + 2
        lines = ["true \\ pred".ljust(width) + "".join(c.rjust(width) for c in self.classes)]
        for name, row in zip(self.classes, self.cells):
            lines.append(name.ljust(width) + "".join(str(v).rjust(width) for v in row))
        return "\n".join(lines) + "\n"


def confusion(true_labels: Sequence[str], predicted_labels: Sequence[str], classes=LABELS) -> ConfusionMatrix:
    if len(true_labels) != len(predicted_labels):
        raise DataError("true and predicted label sequences differ in length")
    index = {c: i for i, c in enumerate(classes)}
    cells = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        if t not in index or p not in index:
            raise DataError(f"unknown label in pair ({t!r}, {p!r})")
        cells[index[t], index[p]] += 1
    return ConfusionMatrix(cells, tuple(classes))


def labels_from_probabilities(probs: np.ndarray, classes=LABELS) -> list[str]:
    return [classes[i] for i in np.asarray(probs).argmax(axis=1)]


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    zero_division: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zero_division"] = list(self.zero_division)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{**d, "zero_division": tuple(d.get("zero_division", ()))})


def _ratio(num: int, den: int, flag: str, flags: list) -> Fraction:
    if den == 0:
        flags.append(flag)
        return Fraction(0)
    return Fraction(num, den)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    total = cm.total
    if total == 0:
        raise DataError("cannot compute metrics of an empty confusion matrix")
    flags: list[str] = []
    per = {name: {} for name in METRIC_NAMES}
    tp, fp, fn, support = cm.tp, cm.fp, cm.fn, cm.support
    for k, c in enumerate(cm.classes):
        t, p, n = int(tp[k]), int(fp[k]), int(fn[k])
        prec = _ratio(t, t + p, f"precision:{c}", flags)
        rec = _ratio(t, t + n, f"recall:{c}", flags)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else _ratio(0, 0, f"f1:{c}", flags)
        per["precision"][c], per["recall"][c], per["f1"][c] = prec, rec, f1
    if flags:
        warnings.warn(f"zero denominators set to 0: {', '.join(flags)}", RuntimeWarning, stacklevel=2)

    def weighted(values):
        return float(sum(int(support[k]) * values[c] for k, c in enumerate(cm.classes)) / total)

    def macro(values):
        return float(sum(values.values(), Fraction(0)) / len(values))

    as_float = {name: {c: float(v) for c, v in vals.items()} for name, vals in per.items()}
    return MetricsReport(
        accuracy=float(Fraction(int(tp.sum()), total)),
        precision=as_float["precision"], recall=as_float["recall"], f1=as_float["f1"],
        weighted_precision=weighted(per["precision"]), weighted_recall=weighted(per["recall"]),
        weighted_f1=weighted(per["f1"]),
        macro_precision=macro(per["precision"]), macro_recall=macro(per["recall"]), macro_f1=macro(per["f1"]),
        zero_division=tuple(flags),
    )


# -- report --------------------------------------------------------------------

@dataclass
class CellResult:
    dataset: str
    optimizer: str
    confusion: ConfusionMatrix
    metrics: MetricsReport
    config_digest: str = ""
    test_digest: str = ""

    @property
    def name(self) -> str:
        return f"{self.dataset}_{self.optimizer}"


def digest(obj) -> str:
    """sha256 of the canonical JSON encoding."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def evaluate_cell(dataset: str, optimizer: str, true_labels, predicted_labels,
                  config_digest: str = "", test_ids: Sequence[str] = ()) -> CellResult:
    cm = confusion(true_labels, predicted_labels)
    return CellResult(dataset, optimizer, cm, metrics(cm), config_digest, digest(list(test_ids)))


@dataclass
class Report:
    cells: dict[str, CellResult]
    delta_accuracy: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cells": {
                name: {
                    "dataset": c.dataset,
                    "optimizer": c.optimizer,
                    "classes": list(c.confusion.classes),
                    "confusion": c.confusion.cells.tolist(),
                    "metrics": c.metrics.to_dict(),
                    "config_digest": c.config_digest,
                    "test_digest": c.test_digest,
                }
                for name, c in self.cells.items()
            },
            "delta_accuracy": dict(self.delta_accuracy),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        cells = {}
        for name, c in d["cells"].items():
            cm = ConfusionMatrix(np.array(c["confusion"]), tuple(c["classes"]))
            cells[name] = CellResult(c["dataset"], c["optimizer"], cm, MetricsReport.from_dict(c["metrics"]),
                                     c["config_digest"], c["test_digest"])
        return cls(cells, dict(d.get("delta_accuracy", {})))

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        return isinstance(other, Report) and self.to_dict() == other.to_dict()

    def summary_rows(self) -> list[dict]:
        base = {c.optimizer: c.metrics.accuracy for c in self.cells.values() if c.dataset == "dataset_1"}
        rows = []
        for name, c in sorted(self.cells.items()):
            m = c.metrics
            delta = m.accuracy - base[c.optimizer] if c.optimizer in base else None
            rows.append({"cell": name, "dataset": c.dataset, "optimizer": c.optimizer,
                         "accuracy": m.accuracy, "precision": m.weighted_precision,
                         "recall": m.weighted_recall, "f1": m.weighted_f1,
                         "delta_accuracy_vs_dataset_1": delta})
        return rows

    def summary_table(self) -> str:
        lines = [f"{'cell':<20}{'Accuracy':>10}{'Precision':>11}{'Recall':>9}{'F1':>9}{'dAcc':>9}"]
        for r in self.summary_rows():
            d = "" if r["delta_accuracy_vs_dataset_1"] is None else f"{100 * r['delta_accuracy_vs_dataset_1']:+.2f}"
            lines.append(f"{r['cell']:<20}{100 * r['accuracy']:>9.2f}%{100 * r['precision']:>10.2f}%"
                         f"{100 * r['recall']:>8.2f}%{100 * r['f1']:>8.2f}%{d:>9}")
        return "\n".join(lines) + "\n"


def build_report(cells: Mapping[str, CellResult] | Sequence[CellResult]) -> Report:
    if not isinstance(cells, Mapping):
        cells = {c.name: c for c in cells}
    if len({c.test_digest for c in cells.values()}) > 1:
        raise DataError("cells were evaluated on different test manifests")
    acc = {(c.dataset, c.optimizer): c.metrics.accuracy for c in cells.values()}
    delta = {opt: acc[("dataset_2", opt)] - acc[("dataset_1", opt)]
             for (ds, opt) in sorted(acc) if ds == "dataset_1" and ("dataset_2", opt) in acc}
    return Report(dict(cells), delta)


def plot_confusion(cm: ConfusionMatrix, path) -> None:
    """Annotated heat map; no title, so identical matrices give identical files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.2, 3.6), dpi=100)
    ax.imshow(cm.cells, cmap="Blues")
    k = len(cm.classes)
    ax.set_xticks(range(k), cm.classes)
    ax.set_yticks(range(k), cm.classes)
    ax.set_xlabel("Predicted label")
    ax.set_ylabel("True label")
    thresh = cm.cells.max() / 2 if cm.cells.size else 0
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(cm.cells[i, j]), ha="center", va="center",
                    color="white" if cm.cells[i, j] > thresh else "black")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def write_report(report: Report, out_dir, figures: bool = True) -> Path:
    """``report.json``, ``summary.csv`` and ``confusion_<cell>.{txt,png}``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in report.summary_rows():
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    for name, cell in report.cells.items():
        (out_dir / f"confusion_{name}.txt").write_text(cell.confusion.to_text())
        if figures:
            plot_confusion(cell.confusion, out_dir / f"confusion_{name}.png")
    return out_dir / "report.json"
