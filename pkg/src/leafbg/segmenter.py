"""Foreground masks, background suppression and the segmentation quality gate.

Two backends produce masks:

* ``salient_model``: a pretrained salient-object network (U2-Net style)
  loaded from an ONNX file and run with onnxruntime.
* ``color_index_baseline``: excess-green index, Otsu threshold, largest
  connected component, one morphological closing. Deterministic and offline.
"""
from __future__ import annotations

import csv
import enum
import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import ConfigError, DataError, ModelError

MIN_SIDE = 8
DEFAULT_BOUNDS = (0.05, 0.95)
BLACK = (0, 0, 0)
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
SALIENT_INPUT_SIZE = 320


class GateReason(str, enum.Enum):
    EMPTY_FOREGROUND = "empty_foreground"
    FULL_FOREGROUND = "full_foreground"
    FRACTION_OUT_OF_BOUNDS = "fraction_out_of_bounds"
    MANUAL_REJECT = "manual_reject"


@dataclass(frozen=True)
class ForegroundMask:
    values: np.ndarray  # H x W uint8, 1 = foreground
    source_image_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")
        object.__setattr__(self, "values", v.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def foreground_fraction(self) -> float:
        return int(self.values.sum()) / self.values.size


@dataclass(frozen=True)
class GateVerdict:
    reasons: tuple[GateReason, ...] = ()

    @property
    def accepted(self) -> bool:
        return not self.reasons


@dataclass(frozen=True)
class SegmenterBackendId:
    kind: str
    model_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("salient_model", "color_index_baseline"):
            raise ConfigError(f"unknown segmentation backend {self.kind!r}")
        if self.kind == "salient_model" and not self.model_path:
            raise ConfigError("salient_model backend requires model_path")


BASELINE = SegmenterBackendId("color_index_baseline")


def as_rgb_array(image) -> np.ndarray:
    """Accept a PIL image or an H x W x 3 uint8 array; reject anything else."""
    if isinstance(image, Image.Image):
        if image.mode != "RGB":
            raise DataError(f"expected an RGB image, got mode {image.mode}")
        image = np.asarray(image)
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise DataError(f"expected H x W x 3 uint8 RGB data, got {arr.shape} {arr.dtype}")
    return arr


def excess_green(image: np.ndarray) -> np.ndarray:
    rgb = image.astype(np.int32)
    return 2 * rgb[..., 1] - rgb[..., 0] - rgb[..., 2]


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == sizes.argmax()


def _baseline_mask(image: np.ndarray) -> np.ndarray:
    # negative index values are never vegetation; clipping keeps Otsu bimodal
    exg = np.clip(excess_green(image), 0, None)
    if exg.min() == exg.max():
        return np.zeros(exg.shape, dtype=bool)
    mask = exg > threshold_otsu(exg)
    mask = _largest_component(mask)
    radius = max(1, round(0.01 * min(mask.shape)))
    yy, xx = np.mgrid[-radius: radius + 1, -radius: radius + 1]
    disk = xx * xx + yy * yy <= radius * radius
    # pad so the closing does not erode along the image border
    padded = np.pad(mask, radius + 1, mode="edge")
    closed = ndimage.binary_closing(padded, structure=disk)[radius + 1: -radius - 1, radius + 1: -radius - 1]
    # lesions inside the leaf have low excess green; they belong to the foreground
    return ndimage.binary_fill_holes(closed)


class SalientModel:
    """onnxruntime session around a salient-object network.

    Input is a 1 x 3 x S x S ImageNet-normalized tensor; the first output's
    first channel is taken as the saliency map and min-max normalized.
    """

    def __init__(self, model_path):
        path = Path(model_path)
        if not path.is_file():
            raise ModelError(f"saliency model not found: {path}")
        try:
            import onnxruntime as ort
        except ImportError as exc:
            raise ModelError("onnxruntime is required for the salient_model backend") from exc
        try:
            self.session = ort.InferenceSession(str(path), providers=["CPUExecutionProvider"])
        except Exception as exc:  # onnxruntime raises its own exception types
            raise ModelError(f"cannot load saliency model {path}: {exc}") from exc
        inp = self.session.get_inputs()[0]
        self.input_name = inp.name
        dims = inp.shape[-2:]
        self.size = tuple(d if isinstance(d, int) else SALIENT_INPUT_SIZE for d in dims)

    def saliency(self, image: np.ndarray) -> np.ndarray:
        h, w = image.shape[:2]
        resized = Image.fromarray(image).resize((self.size[1], self.size[0]), Image.BILINEAR)
        x = np.asarray(resized, dtype=np.float32) / 255.0
        x = ((x - IMAGENET_MEAN) / IMAGENET_STD).transpose(2, 0, 1)[None]
        out = self.session.run(None, {self.input_name: x.astype(np.float32)})[0]
        sal = np.asarray(out, dtype=np.float32).reshape(-1, *out.shape[-2:])[0]
        lo, hi = float(sal.min()), float(sal.max())
        sal = (sal - lo) / (hi - lo) if hi > lo else np.zeros_like(sal)
        back = Image.fromarray(sal.astype(np.float32), "F").resize((w, h), Image.BILINEAR)
        return np.asarray(back, dtype=np.float32)


@functools.lru_cache(maxsize=4)
def load_salient_model(model_path: str) -> SalientModel:
    return SalientModel(model_path)


def segment(image, backend: SegmenterBackendId = BASELINE, threshold: float = 0.5,
            image_id: str = "") -> ForegroundMask:
    arr = as_rgb_array(image)
    if min(arr.shape[:2]) < MIN_SIDE:
        raise DataError(f"image {image_id or ''} is smaller than {MIN_SIDE}x{MIN_SIDE}: {arr.shape[:2]}")
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    if backend.kind == "color_index_baseline":
        mask = _baseline_mask(arr)
    else:
        mask = load_salient_model(str(backend.model_path)).saliency(arr) > threshold
    return ForegroundMask(mask.astype(np.uint8), image_id)


def apply_mask(image, mask: ForegroundMask, fill=BLACK) -> np.ndarray:
    arr = as_rgb_array(image)
    if arr.shape[:2] != mask.values.shape:
        raise DataError(f"mask {mask.values.shape} does not match image {arr.shape[:2]}")
    fill = np.asarray(fill, dtype=np.uint8).reshape(1, 1, 3)
    return np.where(mask.values[..., None].astype(bool), arr, fill)


def gate(mask: ForegroundMask, bounds=DEFAULT_BOUNDS, manual_rejects: Iterable[str] = ()) -> GateVerdict:
    lo, hi = bounds
    if lo >= hi:
        raise ConfigError(f"gate bounds need min < max, got {bounds}")
    frac = mask.foreground_fraction
    reasons = []
    if frac == 0.0:
        reasons.append(GateReason.EMPTY_FOREGROUND)
    if frac == 1.0:
        reasons.append(GateReason.FULL_FOREGROUND)
    if not lo <= frac <= hi:
        reasons.append(GateReason.FRACTION_OUT_OF_BOUNDS)
    if mask.source_image_id in set(manual_rejects):
        reasons.append(GateReason.MANUAL_REJECT)
    return GateVerdict(tuple(reasons))


# -- file formats ------------------------------------------------------------

def mask_path(out_dir, image_id: str) -> Path:
    return Path(out_dir) / f"{image_id}_mask.png"


def segmented_path(out_dir, image_id: str) -> Path:
    return Path(out_dir) / f"{image_id}_fg.png"


def save_mask(mask: ForegroundMask, path) -> None:
    Image.fromarray(mask.values * 255, "L").save(path)


def load_mask(path, image_id: str = "") -> ForegroundMask:
    with Image.open(path) as im:
        if im.mode != "L":
            raise DataError(f"{path}: mask must be 8-bit single channel, got {im.mode}")
        return ForegroundMask((np.asarray(im) > 127).astype(np.uint8), image_id)


def read_manual_rejects(path) -> frozenset[str]:
    if path is None:
        return frozenset()
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return frozenset(s.strip() for s in lines if s.strip() and not s.lstrip().startswith("#"))


VERDICT_COLUMNS = ("image_id", "fraction", "accepted", "reasons")


@dataclass(frozen=True)
class VerdictRow:
    image_id: str
    fraction: float
    verdict: GateVerdict


def write_verdicts(rows: Iterable[VerdictRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(VERDICT_COLUMNS)
        for row in rows:
            reasons = ";".join(r.value for r in row.verdict.reasons)
            writer.writerow((row.image_id, repr(row.fraction), int(row.verdict.accepted), reasons))


def read_verdicts(path) -> dict[str, GateVerdict]:
    verdicts = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            reasons = tuple(GateReason(r) for r in row["reasons"].split(";") if r)
            verdicts[row["image_id"]] = GateVerdict(reasons)
    return verdicts


def load_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise DataError(f"{path}: expected RGB image, got mode {im.mode}")
            return np.asarray(im).copy()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def segment_records(records, out_dir, backend: SegmenterBackendId = BASELINE, threshold: float = 0.5,
                    bounds=DEFAULT_BOUNDS, manual_rejects=frozenset(), force: bool = False
                    ) -> list[VerdictRow]:
    """Mask, cut out and gate every record; write files under ``out_dir``.

    Masks already on disk are reused unless ``force`` is set. Rows come back
    sorted by image_id and are also written to ``verdicts.csv``.
    """
    out_dir = Path(out_dir)
    mask_dir, fg_dir = out_dir / "masks", out_dir / "fg"
    if backend.kind == "salient_model":
        load_salient_model(str(backend.model_path))  # fail before touching outputs
    mask_dir.mkdir(parents=True, exist_ok=True)
    fg_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for rec in sorted(records, key=lambda r: r.image_id):
        mfile, ffile = mask_path(mask_dir, rec.image_id), segmented_path(fg_dir, rec.image_id)
        image = None
        if mfile.exists() and not force:
            mask = load_mask(mfile, rec.image_id)
        else:
            image = load_rgb(rec.path)
            mask = segment(image, backend, threshold, rec.image_id)
            save_mask(mask, mfile)
        verdict = gate(mask, bounds, manual_rejects)
        if verdict.accepted and (force or not ffile.exists()):
            image = load_rgb(rec.path) if image is None else image
            Image.fromarray(apply_mask(image, mask), "RGB").save(ffile)
        elif not verdict.accepted and ffile.exists():
            ffile.unlink()
        rows.append(VerdictRow(rec.image_id, mask.foreground_fraction, verdict))
    write_verdicts(rows, out_dir / "verdicts.csv")
    return rows


def rejected_per_class(rows: Iterable[VerdictRow], labels: Mapping[str, str]) -> dict[str, tuple[int, int]]:
    """``label -> (images, rejected)`` in the layout of a segmentation results table."""
    table: dict[str, list[int]] = {}
    for row in rows:
        entry = table.setdefault(labels[row.image_id], [0, 0])
        entry[0] += 1
        entry[1] += int(not row.verdict.accepted)
    return {k: (v[0], v[1]) for k, v in sorted(table.items())}
