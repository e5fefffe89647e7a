"""Apple-leaf disease classification with background-removal augmentation."""
from .corpus import LABELS, balance, ingest, split
from .segmenter import apply_mask, gate, segment
from .augmenter import build_dataset_1, build_dataset_2
from .classifier import build_model, predict
from .trainer import run_matrix, train
from .evaluator import confusion, metrics

__version__ = "0.1.0"
__all__ = ["LABELS", "apply_mask", "balance", "build_dataset_1", "build_dataset_2", "build_model",
           "confusion", "gate", "ingest", "metrics", "predict", "run_matrix", "segment", "split", "train"]
