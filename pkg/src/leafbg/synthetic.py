"""Hermetic synthetic leaf corpus.

Each image is a green leaf-like ellipse on a cluttered non-green background.
The class is encoded by a spot pattern: none (healthy), saturated orange round
spots (rust) or dark olive-brown blotches (scab).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import LABELS, TABLE_COLUMNS, CorpusSummary, derive_seed
from .errors import DataError

IMAGE_SIZE = (320, 240)  # width, height

LEAF_RGB_LOW = (50, 130, 30)
LEAF_RGB_HIGH = (90, 185, 75)
RUST_RGB_LOW = (225, 110, 0)
RUST_RGB_HIGH = (255, 150, 35)
SCAB_DARKNESS = (48, 80)  # red channel; green and blue sit a bounded step below it

# HSV band (hue in degrees, saturation in [0, 1]) that only rust spots fall into
RUST_HUE_BAND = (15.0, 45.0)
RUST_MIN_SATURATION = 0.7


@dataclass
class SyntheticSample:
    image: np.ndarray  # H x W x 3 uint8
    leaf_mask: np.ndarray  # H x W uint8 {0, 1}
    spot_mask: np.ndarray  # H x W uint8 {0, 1}
    label: str


def _ellipse(shape, cy, cx, ry, rx, angle):
    out = np.zeros(shape, dtype=bool)
    # only the bounding square of the ellipse can be inside it
    r = max(rx, ry) + 1
    y0, y1 = max(0, int(np.floor(cy - r))), min(shape[0], int(np.ceil(cy + r)) + 1)
    x0, x1 = max(0, int(np.floor(cx - r))), min(shape[1], int(np.ceil(cx + r)) + 1)
    if y0 >= y1 or x0 >= x1:
        return out
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    out[y0:y1, x0:x1] = u * u + v * v <= 1.0
    return out


def _color(rng, low, high):
    return rng.integers(low, np.asarray(high) + 1, size=3)


def _scab_color(rng):
    d = rng.integers(SCAB_DARKNESS[0], SCAB_DARKNESS[1] + 1)
    return np.array([d, d - rng.integers(2, 10), d - rng.integers(14, 25)])


def _background(rng, shape):
    h, w = shape
    r, b = rng.integers(90, 151), rng.integers(80, 151)
    base = (r, rng.integers(70, max(71, (r + b) // 2 - 5)), b)
    img = np.broadcast_to(base, (h, w, 3)).astype(np.float64).copy()
    for _ in range(rng.integers(6, 12)):
        # browns, grays and blue-ish patches: G never exceeds the R/B mean
        r = rng.integers(60, 200)
        b = rng.integers(40, 220)
        g = rng.integers(30, max(31, (r + b) // 2 - 10))
        patch = _ellipse(shape, rng.uniform(0, h), rng.uniform(0, w),
                         rng.uniform(0.05, 0.25) * h, rng.uniform(0.05, 0.25) * w,
                         rng.uniform(0, np.pi))
        img[patch] = (r, g, b)
    return img


def render_sample(label: str, rng: np.random.Generator, size=IMAGE_SIZE) -> SyntheticSample:
    if label not in LABELS:
        raise DataError(f"unknown label {label!r}")
    w, h = size
    shape = (h, w)
    img = _background(rng, shape)

    cy = h / 2 + rng.uniform(-0.08, 0.08) * h
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    ry = rng.uniform(0.25, 0.34) * h
    rx = rng.uniform(0.32, 0.42) * w
    angle = rng.uniform(-0.4, 0.4)
    leaf = _ellipse(shape, cy, cx, ry, rx, angle)
    leaf_rgb = _color(rng, LEAF_RGB_LOW, LEAF_RGB_HIGH)
    yy = np.mgrid[: h, : w][0]
    shade = 1.0 + 0.12 * (yy - cy) / ry
    img[leaf] = (leaf_rgb * shade[leaf][:, None]).clip(0, 255)

    spots = np.zeros(shape, dtype=bool)
    if label != "healthy":
        n_spots = rng.integers(25, 35) if label == "rust" else rng.integers(20, 27)
        for _ in range(n_spots):
            # keep spot centres well inside the leaf outline
            t = rng.uniform(0, 2 * np.pi)
            rho = np.sqrt(rng.uniform(0, 1)) * (0.7 if label == "rust" else 0.6)
            u, v = rho * np.cos(t) * rx, rho * np.sin(t) * ry
            sy = cy + u * np.sin(angle) + v * np.cos(angle)
            sx = cx + u * np.cos(angle) - v * np.sin(angle)
            if label == "rust":
                r = rng.uniform(0.12, 0.2) * ry
                blob = _ellipse(shape, sy, sx, r, r, 0.0)
            else:
                blob = np.zeros(shape, dtype=bool)
                for _ in range(3):
                    blob |= _ellipse(shape, sy + rng.normal(0, 0.06 * ry), sx + rng.normal(0, 0.06 * rx),
                                     rng.uniform(0.08, 0.14) * ry, rng.uniform(0.08, 0.14) * rx,
                                     rng.uniform(0, np.pi))
            blob &= leaf
            img[blob] = _color(rng, RUST_RGB_LOW, RUST_RGB_HIGH) if label == "rust" else _scab_color(rng)
            spots |= blob

    noise = rng.normal(0.0, 4.0, size=img.shape)
    out = np.clip(np.rint(img + noise), 0, 255).astype(np.uint8)
    if label != "healthy":
        # noise must not push rust out of, or scab into, the rust hue band
        out[spots] = np.clip(np.rint(img[spots]), 0, 255).astype(np.uint8)
    return SyntheticSample(out, leaf.astype(np.uint8), spots.astype(np.uint8), label)


def rust_band_pixels(image: np.ndarray) -> np.ndarray:
    """Boolean map of pixels inside the rust hue/saturation band."""
    rgb = image.astype(np.float64) / 255.0
    mx, mn = rgb.max(axis=2), rgb.min(axis=2)
    delta = mx - mn
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1), 0.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.where(delta > 0, delta, 1)
    hue = np.where(mx == r, ((g - b) / safe) % 6,
                   np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4)) * 60.0
    hue = np.where(delta > 0, hue, 0.0)
    return (hue >= RUST_HUE_BAND[0]) & (hue <= RUST_HUE_BAND[1]) & (sat >= RUST_MIN_SATURATION)


def generate_synthetic_corpus(n_per_class: int, seed: int, out_dir, size=IMAGE_SIZE) -> CorpusSummary:
    """Write ``n_per_class`` images per class plus ``labels.csv``.

    Layout: ``images/<id>.png``, ``gt_masks/<id>_leaf.png`` (255 = leaf) and a
    one-hot ``labels.csv`` in the Plant Pathology column layout.
    """
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "gt_masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write synthetic corpus to {out_dir}: {exc}") from exc

    labels = [label for label in LABELS for _ in range(n_per_class)]
    order = derive_seed(seed, "synthetic-order").permutation(len(labels))
    rows = []
    for k, j in enumerate(order):
        label = labels[j]
        image_id = f"Synth_{k}"
        sample = render_sample(label, derive_seed(seed, f"synthetic-{image_id}"), size)
        Image.fromarray(sample.image, "RGB").save(out_dir / "images" / f"{image_id}.png")
        Image.fromarray(sample.leaf_mask * 255, "L").save(out_dir / "gt_masks" / f"{image_id}_leaf.png")
        rows.append([image_id] + [int(col == label) for col in TABLE_COLUMNS[1:]])

    with open(out_dir / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        writer.writerows(rows)
    per_class = {label: n_per_class for label in LABELS}
    return CorpusSummary(per_class, 3 * n_per_class, seed, 0)


def load_gt_mask(corpus_dir, image_id: str) -> np.ndarray:
    with Image.open(Path(corpus_dir) / "gt_masks" / f"{image_id}_leaf.png") as im:
        return (np.asarray(im) > 127).astype(np.uint8)
