"""Background removal on synthetic leaves, step by step.

Writes segmentation_walkthrough.png next to this script.
"""
# %%
import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from pathlib import Path

from leafbg.corpus import LABELS, derive_seed
from leafbg.segmenter import apply_mask, excess_green, gate, segment
from leafbg.synthetic import render_sample

# %% one leaf per class, drawn from fixed generator streams
samples = [render_sample(label, derive_seed(7, label)) for label in LABELS]

# %% excess-green index, the mask it yields, and the cut-out
fig, axes = plt.subplots(len(samples), 4, figsize=(12, 7))
for row, s in zip(axes, samples):
    mask = segment(s.image, image_id=s.label)
    inter = (mask.values & s.leaf_mask).sum()
    union = (mask.values | s.leaf_mask).sum()
    verdict = gate(mask)
    print(f"{s.label:8s} foreground {mask.foreground_fraction:.3f}  IoU {inter / union:.4f}  "
          f"accepted {verdict.accepted}")
    panels = [s.image, np.clip(excess_green(s.image), 0, None), mask.values, apply_mask(s.image, mask)]
    titles = ["image", "ExG (clipped)", "mask", "background removed"]
    for ax, img, title in zip(row, panels, titles):
        ax.imshow(img, cmap="gray" if img.ndim == 2 else None)
        ax.set_title(f"{s.label}: {title}", fontsize=8)
        ax.axis("off")
fig.tight_layout()
out = Path(__file__).with_suffix(".png")
fig.savefig(out)
print("wrote", out)

# %% a flat image has no contrast, so the gate throws its mask away
flat = np.full((120, 160, 3), 110, np.uint8)
print("flat image verdict:", gate(segment(flat)).reasons)
