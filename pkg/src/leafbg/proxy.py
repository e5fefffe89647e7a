"""Offline stand-in for ImageNet pretraining.

Trains a MobileNetV2 from scratch on synthetic leaves drawn from generator
streams that never overlap a synthetic corpus, at low resolution. Every
other image has its background blacked out with the generator's leaf mask. The saved
weights load through ``BackboneSpec(weights=<path>)`` like any checkpoint.
Only meant for hermetic runs; real experiments use ImageNet weights.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torchvision.models import mobilenet_v2

from .corpus import LABELS, derive_seed
from .synthetic import render_sample

log = logging.getLogger(__name__)


def proxy_images(n_images: int, seed: int, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for i in range(n_images):
        k = i % len(LABELS)
        sample = render_sample(LABELS[k], derive_seed(seed, f"proxy-{i}"))
        image = sample.image
        if i % 2:
            # pretrained features should cover background-removed inputs too
            image = image * sample.leaf_mask[..., None]
        small = Image.fromarray(image, "RGB").resize((size, size), Image.BILINEAR)
        xs.append(np.asarray(small, dtype=np.float32) / 255.0)
        ys.append(k)
    x = torch.from_numpy(np.stack(xs).transpose(0, 3, 1, 2).copy())
    return x, torch.tensor(ys)


def pretrain_proxy_backbone(path, seed: int = 0, n_images: int = 1500, size: int = 96, epochs: int = 2,
                            batch_size: int = 32, learning_rate: float = 1e-3, force: bool = False) -> Path:
    """Write a full MobileNetV2 state dict to ``path`` (reused if present)."""
    path = Path(path)
    if path.is_file() and not force:
        return path
    x, y = proxy_images(n_images, seed, size)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = mobilenet_v2(weights=None, num_classes=len(LABELS))
        opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
        net.train()
        for epoch in range(epochs):
            perm = torch.from_numpy(derive_seed(seed, f"proxy-epoch-{epoch}").permutation(n_images))
            correct = 0
            for i in range(0, n_images, batch_size):
                idx = perm[i: i + batch_size]
                logits = net(x[idx])
                loss = F.cross_entropy(logits, y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                correct += int((logits.argmax(1) == y[idx]).sum())
            log.info("proxy pretraining epoch %d/%d accuracy %.3f", epoch + 1, epochs, correct / n_images)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), path)
    return path
