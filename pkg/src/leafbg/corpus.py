"""Corpus ingestion, class balancing and stratified splitting.

The label table follows the Kaggle Plant Pathology 2020 layout: one row per
image, one-hot integer columns ``healthy, multiple_diseases, rust, scab``.
"""
from __future__ import annotations

import csv
import json
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import DataError

LABELS = ("healthy", "rust", "scab")
DROPPED_LABEL = "multiple_diseases"
TABLE_COLUMNS = ("image_id", "healthy", "multiple_diseases", "rust", "scab")
MANIFEST_COLUMNS = ("image_id", "path", "label", "split")
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (Fraction(3, 5), Fraction(1, 5), Fraction(1, 5))
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


@dataclass(frozen=True)
class LabeledImageRecord:
    image_id: str
    path: str
    label: str
    split: str = "unassigned"

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r} for {self.image_id}")
        if self.split not in SPLITS + ("unassigned",):
            raise DataError(f"unknown split {self.split!r} for {self.image_id}")


@dataclass(frozen=True)
class CorpusSummary:
    per_class_counts: dict[str, int]
    total: int
    seed: int | None = None
    dropped: int = 0

    @classmethod
    def from_records(cls, records: Iterable[LabeledImageRecord], seed=None, dropped=0):
        counts = Counter(r.label for r in records)
        per_class = {label: counts.get(label, 0) for label in LABELS}
        return cls(per_class, sum(per_class.values()), seed, dropped)

    def __str__(self):
        parts = ", ".join(f"{k}={v}" for k, v in self.per_class_counts.items())
        return f"{self.total} images ({parts}); {self.dropped} dropped"


@dataclass(frozen=True)
class SplitManifest:
    records: tuple[LabeledImageRecord, ...]
    ratios: tuple[Fraction, Fraction, Fraction] = DEFAULT_RATIOS
    seed: int = 0
    per_class_split_counts: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    def partition(self, name: str) -> list[LabeledImageRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    @property
    def train(self):
        return self.partition("train")

    @property
    def val(self):
        return self.partition("val")

    @property
    def test(self):
        return self.partition("test")


def derive_seed(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one named consumer of a master seed."""
    return np.random.default_rng([zlib.crc32(stream.encode()), int(seed)])


def _find_image(image_dir: Path, image_id: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        candidate = image_dir / f"{image_id}{suffix}"
        if candidate.is_file():
            return candidate
    return None


def ingest(label_table, image_dir, verify_images: bool = True):
    """Read the one-hot label table and resolve image files.

    Rows labelled ``multiple_diseases`` are dropped and counted.
    Returns ``(CorpusSummary, records)`` with records in table order.
    """
    label_table, image_dir = Path(label_table), Path(image_dir)
    with open(label_table, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        if header and set(header) != set(TABLE_COLUMNS):
            raise DataError(f"{label_table}: expected columns {TABLE_COLUMNS}, got {header}")
        rows = list(reader)

    records, dropped, bad_rows, missing = [], 0, [], []
    seen = set()
    for row in rows:
        image_id = row["image_id"].strip()
        if image_id in seen:
            raise DataError(f"duplicate image_id {image_id!r}")
        seen.add(image_id)
        try:
            hot = [name for name in TABLE_COLUMNS[1:] if int(row[name]) == 1]
        except (TypeError, ValueError):
            bad_rows.append(image_id)
            continue
        if len(hot) != 1:
            bad_rows.append(image_id)
            continue
        if hot[0] == DROPPED_LABEL:
            dropped += 1
            continue
        path = _find_image(image_dir, image_id)
        if path is None:
            missing.append(image_id)
            continue
        records.append(LabeledImageRecord(image_id, str(path), hot[0]))

    if bad_rows:
        raise DataError(f"rows without exactly one label: {', '.join(bad_rows)}")
    if missing:
        raise DataError(f"missing image files in {image_dir}: {', '.join(missing)}")
    if verify_images:
        _verify_rgb(records)
    return CorpusSummary.from_records(records, dropped=dropped), records


def _verify_rgb(records):
    bad = []
    for rec in records:
        try:
            with Image.open(rec.path) as im:
                if im.mode != "RGB":
                    bad.append(f"{rec.image_id} (mode {im.mode})")
        except OSError:
            bad.append(f"{rec.image_id} (undecodable)")
    if bad:
        raise DataError(f"images that are not decodable RGB: {', '.join(bad)}")


def _by_label(records):
    groups: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        groups.setdefault(rec.label, []).append(i)
    return groups


def balance(records: Sequence[LabeledImageRecord], seed: int) -> list[LabeledImageRecord]:
    """Downsample every class to the size of the smallest one.

    Selection is uniform without replacement; the output keeps input order.
    """
    groups = _by_label(records)
    missing = [label for label in LABELS if label not in groups]
    if missing:
        raise DataError(f"cannot balance without records for: {', '.join(missing)}")
    target = min(len(idx) for idx in groups.values())
    rng = derive_seed(seed, "balance")
    keep = set()
    for label in sorted(groups):
        idx = groups[label]
        chosen = rng.choice(len(idx), size=target, replace=False)
        keep.update(idx[j] for j in chosen)
    return [rec for i, rec in enumerate(records) if i in keep]


def _as_ratios(ratios) -> tuple[Fraction, Fraction, Fraction]:
    if len(ratios) != 3:
        raise DataError(f"need three ratios (train, val, test), got {ratios!r}")
    out = tuple(r if isinstance(r, Fraction) else Fraction(str(r)) for r in ratios)
    if any(r < 0 for r in out) or sum(out) != 1:
        raise DataError(f"split ratios must be non-negative and sum to 1, got {ratios!r}")
    return out


def split_counts(n: int, ratios=DEFAULT_RATIOS) -> tuple[int, int, int]:
    """Floor the val/test shares; train takes the remainder."""
    _, r_val, r_test = _as_ratios(ratios)
    n_val = int(r_val * n)
    n_test = int(r_test * n)
    return n - n_val - n_test, n_val, n_test


def split(records: Sequence[LabeledImageRecord], ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitManifest:
    ratios = _as_ratios(ratios)
    groups = _by_label(records)
    rng = derive_seed(seed, "split")
    assignment: dict[int, str] = {}
    counts = {}
    for label in sorted(groups):
        idx = groups[label]
        n_train, n_val, n_test = split_counts(len(idx), ratios)
        perm = rng.permutation(len(idx))
        names = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
        for j, name in zip(perm, names):
            assignment[idx[j]] = name
        counts[label] = (n_train, n_val, n_test)
    out = tuple(replace(rec, split=assignment[i]) for i, rec in enumerate(records))
    return SplitManifest(out, ratios, int(seed), counts)


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def write_split_manifest(manifest: SplitManifest, path) -> Path:
    """Write the CSV manifest plus a JSON sidecar holding ratios, seed and counts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest.records:
            writer.writerow((rec.image_id, rec.path, rec.label, rec.split))
    meta = {
        "ratios": [str(r) for r in manifest.ratios],
        "seed": manifest.seed,
        "per_class_split_counts": {k: list(v) for k, v in sorted(manifest.per_class_split_counts.items())},
    }
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_split_manifest(path) -> SplitManifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise DataError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)}")
        records = tuple(LabeledImageRecord(r["image_id"], r["path"], r["label"], r["split"]) for r in reader)
    meta_file = _meta_path(path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        ratios = tuple(Fraction(r) for r in meta["ratios"])
        counts = {k: tuple(v) for k, v in meta["per_class_split_counts"].items()}
        return SplitManifest(records, ratios, meta["seed"], counts)
    counts = {}
    for label in sorted({r.label for r in records}):
        c = Counter(r.split for r in records if r.label == label)
        counts[label] = tuple(c.get(s, 0) for s in SPLITS)
    return SplitManifest(records, DEFAULT_RATIOS, 0, counts)
