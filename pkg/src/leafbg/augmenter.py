"""Training manifests for the two arms of the experiment.

``dataset_1`` holds the raw training images. ``dataset_2`` adds one
background-removed copy of every training image whose mask passed the gate.
"""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .corpus import LABELS, SplitManifest
from .errors import DataError
from .segmenter import GateVerdict, segmented_path

VARIANTS = ("raw", "background_removed")
DATASET_NAMES = ("dataset_1", "dataset_2")
MANIFEST_COLUMNS = ("image_id", "path", "label", "variant")


@dataclass(frozen=True)
class DatasetEntry:
    image_id: str
    path: str
    label: str
    variant: str = "raw"


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    entries: tuple[DatasetEntry, ...]

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise DataError(f"unknown dataset name {self.name!r}")
        for e in self.entries:
            if e.variant not in VARIANTS:
                raise DataError(f"unknown variant {e.variant!r} for {e.image_id}")
            if e.label not in LABELS:
                raise DataError(f"unknown label {e.label!r} for {e.image_id}")
        if self.name == "dataset_1" and any(e.variant != "raw" for e in self.entries):
            raise DataError("dataset_1 may only contain raw entries")
        raw = {e.image_id: e.label for e in self.entries if e.variant == "raw"}
        for e in self.entries:
            if e.variant == "background_removed" and raw.get(e.image_id) != e.label:
                raise DataError(f"background-removed entry {e.image_id} has no matching raw entry")

    @property
    def counts(self) -> dict[tuple[str, str], int]:
        return dict(sorted(Counter((e.label, e.variant) for e in self.entries).items()))

    def __len__(self):
        return len(self.entries)


def build_dataset_1(split: SplitManifest) -> DatasetManifest:
    train = split.train
    if not train:
        raise DataError("split manifest has an empty train partition")
    return DatasetManifest("dataset_1", tuple(DatasetEntry(r.image_id, r.path, r.label) for r in train))


def build_dataset_2(split: SplitManifest, verdicts: Mapping[str, GateVerdict], seg_dir) -> DatasetManifest:
    """Raw train entries, then accepted background-removed copies in image_id order.

    ``seg_dir`` holds the ``<image_id>_fg.png`` cut-outs.
    """
    raw = build_dataset_1(split).entries
    missing_verdicts = [e.image_id for e in raw if e.image_id not in verdicts]
    if missing_verdicts:
        raise DataError(f"no segmentation verdict for: {', '.join(missing_verdicts)}")
    extra, missing_files = [], []
    for e in sorted(raw, key=lambda e: e.image_id):
        if not verdicts[e.image_id].accepted:
            continue
        path = segmented_path(seg_dir, e.image_id)
        if not path.is_file():
            missing_files.append(str(path))
            continue
        extra.append(DatasetEntry(e.image_id, str(path), e.label, "background_removed"))
    if missing_files:
        raise DataError(f"accepted segmentations missing on disk: {', '.join(missing_files)}")
    return DatasetManifest("dataset_2", raw + tuple(extra))


def write_dataset_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow((e.image_id, e.path, e.label, e.variant))
    return path


def read_dataset_manifest(path, name: str | None = None) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise DataError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)}")
        entries = tuple(DatasetEntry(r["image_id"], r["path"], r["label"], r["variant"]) for r in reader)
    return DatasetManifest(name or path.stem, entries)


def entries_from_records(records) -> tuple[DatasetEntry, ...]:
    """Raw entries for evaluation sets (validation/test are never augmented)."""
    return tuple(DatasetEntry(r.image_id, r.path, r.label) for r in records)
