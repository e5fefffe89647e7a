"""Training loop and the dataset x optimizer experiment matrix."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import LABELS, derive_seed
from .classifier import (LeafClassifier, ModelCard, PreprocessSpec, preprocess_uint8, save_model,
                         to_tensor)
from .errors import ConfigError, DataError, TrainingError
from .segmenter import load_rgb

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "rmsprop")
LOG_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str
    learning_rate: float
    epsilon: float
    beta_1: float = 0.9
    beta_2: float = 0.99
    amsgrad: bool = False
    rho: float = 0.98
    momentum: float = 0.2

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0 or not self.epsilon > 0:
            raise ConfigError("learning_rate and epsilon must be positive")
        for name in ("beta_1", "beta_2", "rho"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def default_optimizer(kind: str) -> OptimizerConfig:
    if kind == "adam":
        return OptimizerConfig("adam", learning_rate=2e-5, epsilon=1e-8, beta_1=0.9, beta_2=0.99, amsgrad=False)
    if kind == "rmsprop":
        return OptimizerConfig("rmsprop", learning_rate=2e-5, epsilon=1e-9, rho=0.98, momentum=0.2)
    raise ConfigError(f"unknown optimizer {kind!r}")


def make_optimizer(params, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    if cfg.kind == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta_1, cfg.beta_2),
                                eps=cfg.epsilon, amsgrad=cfg.amsgrad)
    return torch.optim.RMSprop(params, lr=cfg.learning_rate, alpha=cfg.rho, eps=cfg.epsilon,
                               momentum=cfg.momentum)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    shuffle_seed: int = 0
    dataset: str = "dataset_1"
    optimizer: OptimizerConfig = field(default_factory=lambda: default_optimizer("adam"))
    # run the frozen backbone prefix once per image instead of once per epoch
    cache_frozen: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    @property
    def cell(self) -> str:
        return f"{self.dataset}_{self.optimizer.kind}"


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainLog:
    rows: list[EpochRecord]
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    best_epoch: int | None = None

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for r in self.rows:
                writer.writerow((r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.val_loss),
                                 repr(r.val_acc), f"{r.seconds:.3f}"))
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                                float(r["val_loss"]), float(r["val_acc"]), float(r["seconds"]))
                    for r in csv.DictReader(fh)]
        return cls(rows)


def categorical_cross_entropy(logits: torch.Tensor, one_hot: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -sum(y * log softmax(logits))."""
    return -(one_hot * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def one_hot(labels: Sequence[str]) -> torch.Tensor:
    idx = torch.tensor([LABELS.index(label) for label in labels])
    return F.one_hot(idx, len(LABELS)).float()


def _entries(manifest):
    return tuple(getattr(manifest, "entries", manifest))


def load_images(entries, spec: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """Decode and resize every entry; N x H x W x 3 uint8."""
    out, bad = [], []
    for e in entries:
        try:
            out.append(preprocess_uint8(load_rgb(e.path), spec))
        except DataError:
            bad.append(e.path)
    if bad:
        raise TrainingError(f"unreadable images: {', '.join(bad)}")
    h, w = spec.target_size
    return np.stack(out) if out else np.zeros((0, h, w, 3), np.uint8)


def _frozen_batches(model: LeafClassifier, images: np.ndarray, batch_size: int = 32) -> torch.Tensor:
    parts = [model.frozen_features(to_tensor(images[i: i + batch_size].astype(np.float32) / 255.0))
             for i in range(0, len(images), batch_size)]
    return torch.cat(parts)


class _Inputs:
    """Yields model inputs for index batches, from cached frozen features or pixels."""

    def __init__(self, model: LeafClassifier, images: np.ndarray, cache: bool):
        self.model = model
        self.images = images
        self.cached = _frozen_batches(model, images) if cache and len(images) else None

    def logits(self, idx) -> torch.Tensor:
        if self.cached is not None:
            return self.model.forward_from_frozen(self.cached[idx])
        x = to_tensor(self.images[idx].astype(np.float32) / 255.0)
        return self.model(x)


def evaluate_loss(model: LeafClassifier, inputs: _Inputs, targets: torch.Tensor, batch_size: int = 64):
    model.eval()
    total_loss, correct, n = 0.0, 0, len(targets)
    with torch.no_grad():
        for i in range(0, n, batch_size):
            idx = np.arange(i, min(n, i + batch_size))
            logits = inputs.logits(idx)
            total_loss += float(categorical_cross_entropy(logits, targets[idx])) * len(idx)
            correct += int((logits.argmax(1) == targets[idx].argmax(1)).sum())
    return (total_loss / n, correct / n) if n else (float("nan"), float("nan"))


def train(model: LeafClassifier, manifest, val_manifest, config: TrainConfig, out_dir,
          card: ModelCard | None = None, resume: bool = False,
          epoch_callback: Callable[[int, EpochRecord], None] | None = None,
          preprocess_spec: PreprocessSpec = PreprocessSpec()) -> TrainLog:
    """Train ``model`` in place for ``config.epochs`` epochs.

    Writes under ``out_dir``: ``model_<cell>.pt`` (final weights),
    ``model_<cell>.best.pt`` (best validation accuracy), ``train_log_<cell>.csv``
    and a resumable ``checkpoints/<cell>/last.pt`` after every epoch.
    """
    entries, val_entries = _entries(manifest), _entries(val_manifest)
    if not entries or not val_entries:
        raise DataError("training and validation manifests must be non-empty")
    out_dir = Path(out_dir)
    cell = config.cell
    ckpt_dir = out_dir / "checkpoints" / cell
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_path = ckpt_dir / "last.pt"
    card = card or ModelCard(preprocess=preprocess_spec)
    card = replace(card, extra={**card.extra, "train": {**asdict(config), "optimizer": asdict(config.optimizer)}})

    images = load_images(entries, preprocess_spec)
    targets = one_hot([e.label for e in entries])
    val_targets = one_hot([e.label for e in val_entries])
    train_in = _Inputs(model, images, config.cache_frozen)
    val_in = _Inputs(model, load_images(val_entries, preprocess_spec), config.cache_frozen)

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(params, config.optimizer)
    torch.manual_seed(config.shuffle_seed)

    rows: list[EpochRecord] = []
    best_acc, best_epoch, best_state = -1.0, None, None
    start = 0
    if resume and last_path.exists():
        state = torch.load(last_path, map_location="cpu", weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["rng"])
        rows = [EpochRecord(**r) for r in state["rows"]]
        best_acc, best_epoch, best_state = state["best_acc"], state["best_epoch"], state["best_state"]
        start = len(rows)
        log.info("%s: resuming after epoch %d", cell, start)

    n = len(entries)
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        model.train()
        perm = derive_seed(config.shuffle_seed, f"epoch-{epoch}").permutation(n)
        loss_sum, correct = 0.0, 0
        for b, i in enumerate(range(0, n, config.batch_size)):
            idx = perm[i: i + config.batch_size]
            logits = train_in.logits(idx)
            loss = categorical_cross_entropy(logits, targets[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"{cell}: non-finite loss at epoch {epoch + 1}, batch {b}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(idx)
            correct += int((logits.argmax(1) == targets[idx].argmax(1)).sum())
        val_loss, val_acc = evaluate_loss(model, val_in, val_targets)
        row = EpochRecord(epoch + 1, loss_sum / n, correct / n, val_loss, val_acc, time.perf_counter() - t0)
        rows.append(row)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch + 1
            best_state = copy.deepcopy(model.state_dict())
        torch.save({"model": model.state_dict(), "optimizer": optimizer.state_dict(),
                    "rng": torch.get_rng_state(), "rows": [asdict(r) for r in rows],
                    "best_acc": best_acc, "best_epoch": best_epoch, "best_state": best_state}, last_path)
        log.info("%s epoch %d/%d loss %.4f acc %.3f val_loss %.4f val_acc %.3f", cell, epoch + 1,
                 config.epochs, row.train_loss, row.train_acc, val_loss, val_acc)
        if epoch_callback is not None:
            epoch_callback(epoch + 1, row)

    model.eval()
    final_path = save_model(model, out_dir / f"model_{cell}.pt", card)
    best_model = copy.deepcopy(model)
    best_model.load_state_dict(best_state)
    best_card = replace(card, extra={**card.extra, "best_epoch": best_epoch})
    best_path = save_model(best_model, out_dir / f"model_{cell}.best.pt", best_card)
    result = TrainLog(rows, final_path, best_path, best_epoch)
    result.write_csv(out_dir / f"train_log_{cell}.csv")
    return result


@dataclass
class MatrixResult:
    logs: dict[str, TrainLog]
    failures: dict[str, str]
    val_ids: tuple[str, ...]


def run_matrix(model_factory: Callable[[], LeafClassifier], dataset_1, dataset_2, val_manifest,
               base_config: TrainConfig, optimizers: Mapping[str, OptimizerConfig] | None = None,
               out_dir=".", card: ModelCard | None = None, resume: bool = False,
               epoch_callback=None, preprocess_spec: PreprocessSpec = PreprocessSpec()) -> MatrixResult:
    """Train every dataset x optimizer cell from identical initial weights.

    A failing cell is recorded and the remaining cells still run.
    """
    optimizers = dict(optimizers or {k: default_optimizer(k) for k in OPTIMIZERS})
    datasets = {"dataset_1": dataset_1, "dataset_2": dataset_2}
    logs, failures = {}, {}
    for name, manifest in datasets.items():
        for kind in OPTIMIZERS:
            config = replace(base_config, dataset=name, optimizer=optimizers[kind])
            try:
                model = model_factory()
                logs[config.cell] = train(model, manifest, val_manifest, config, out_dir, card, resume,
                                          epoch_callback, preprocess_spec)
            except (TrainingError, DataError) as exc:
                log.error("%s failed: %s", config.cell, exc)
                failures[config.cell] = str(exc)
    val_ids = tuple(e.image_id for e in _entries(val_manifest))
    return MatrixResult(logs, failures, val_ids)


def loss_is_finite(log_: TrainLog) -> bool:
    return all(math.isfinite(r.train_loss) and r.train_loss >= 0 for r in log_.rows)
