"""Transfer-learning classifier: MobileNetV2 feature extractor plus custom head.

Head layer order: GAP -> BatchNorm -> Dense(128, ReLU) -> Dropout(0.5)
-> Dense(64, ReLU) -> Dropout(0.5) -> Dense(3, softmax). The module returns
logits; :func:`predict` applies the softmax.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn
from torchvision.models import MobileNet_V2_Weights, mobilenet_v2

from .corpus import LABELS
from .errors import DataError, ModelError
from .segmenter import as_rgb_array

FEATURE_CHANNELS = 1280
FEATURE_GRID = 7
N_BACKBONE_BLOCKS = 19  # stem conv, 17 inverted-residual blocks, final 1x1 conv

_INTERPOLATION = {
    "nearest": Image.NEAREST,
    "bilinear": Image.BILINEAR,
    "bicubic": Image.BICUBIC,
    "lanczos": Image.LANCZOS,
}


@dataclass(frozen=True)
class PreprocessSpec:
    target_size: tuple[int, int] = (224, 224)  # height, width
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.interpolation not in _INTERPOLATION:
            raise DataError(f"unknown interpolation {self.interpolation!r}")


@dataclass(frozen=True)
class HeadSpec:
    in_features: int = FEATURE_CHANNELS
    dense_units: tuple[int, ...] = (128, 64)
    dropout_rate: float = 0.5
    n_classes: int = len(LABELS)
    batch_norm: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1


@dataclass(frozen=True)
class BackboneSpec:
    """``weights`` is ``"imagenet"``, ``"random"`` or a path to a state dict.

    ``freeze_boundary`` counts trailing feature blocks left trainable; the
    default keeps the last inverted-residual block and the final 1x1
    convolution trainable.
    """
    weights: str = "imagenet"
    freeze_boundary: int = 2

    def __post_init__(self):
        if not 0 <= self.freeze_boundary <= N_BACKBONE_BLOCKS:
            raise ModelError(f"freeze_boundary must lie in [0, {N_BACKBONE_BLOCKS}]")


def preprocess_uint8(image, spec: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """Resize to the target size, still as uint8 (used for compact caching)."""
    arr = as_rgb_array(image)
    h, w = spec.target_size
    if arr.shape[:2] == (h, w):
        return arr.copy()
    resized = Image.fromarray(arr, "RGB").resize((w, h), _INTERPOLATION[spec.interpolation])
    return np.asarray(resized)


def preprocess(image, spec: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """H x W x 3 float32 array in [0, 1]; no ImageNet mean/std normalization."""
    return preprocess_uint8(image, spec).astype(np.float32) / 255.0


def build_head(spec: HeadSpec) -> nn.Sequential:
    layers: list[nn.Module] = [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    if spec.batch_norm:
        layers.append(nn.BatchNorm1d(spec.in_features, eps=spec.bn_eps, momentum=spec.bn_momentum))
    width = spec.in_features
    for units in spec.dense_units:
        layers += [_dense(width, units), nn.ReLU(), nn.Dropout(spec.dropout_rate)]
        width = units
    layers.append(_dense(width, spec.n_classes))
    return nn.Sequential(*layers)


def _dense(n_in: int, n_out: int) -> nn.Linear:
    # Keras Dense defaults: Glorot-uniform kernel, zero bias
    layer = nn.Linear(n_in, n_out)
    nn.init.xavier_uniform_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


def _load_backbone(weights: str) -> nn.Sequential:
    net = mobilenet_v2(weights=None)
    if weights == "random":
        return net.features
    if weights == "imagenet":
        try:
            state = MobileNet_V2_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
        except Exception as exc:
            raise ModelError(
                "could not obtain ImageNet MobileNetV2 weights "
                f"({exc}); download {MobileNet_V2_Weights.IMAGENET1K_V1.url} and set "
                "backbone.weights to the local file, or pass weights='random' explicitly"
            ) from exc
    else:
        path = Path(weights)
        if not path.is_file():
            raise ModelError(f"backbone weights not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ModelError(f"cannot read backbone weights {path}: {exc}") from exc
    # full-network checkpoints carry a classifier we do not use
    if any(k.startswith("features.") for k in state):
        state = {k.removeprefix("features."): v for k, v in state.items() if k.startswith("features.")}
    try:
        net.features.load_state_dict(state)
    except RuntimeError as exc:
        raise ModelError(f"backbone weights do not fit MobileNetV2: {exc}") from exc
    return net.features


class LeafClassifier(nn.Module):
    def __init__(self, backbone: nn.Sequential, head: nn.Sequential, freeze_boundary: int):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.n_frozen = len(backbone) - freeze_boundary
        for block in list(backbone)[: self.n_frozen]:
            block.requires_grad_(False)
        self.train(False)

    @property
    def frozen(self) -> nn.Sequential:
        return self.backbone[: self.n_frozen]

    @property
    def tail(self) -> nn.Sequential:
        return self.backbone[self.n_frozen:]

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen blocks always run with inference batch-norm statistics
        self.frozen.eval()
        return self

    def frozen_features(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.frozen(x)

    def forward_from_frozen(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(self.tail(z))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.tail(self.frozen_features(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_from_frozen(self.frozen_features(x))


def build_model(backbone: BackboneSpec = BackboneSpec(), head: HeadSpec = HeadSpec(), seed: int = 0) -> LeafClassifier:
    """Compose backbone and head. Layer initialization is seeded by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        features = _load_backbone(backbone.weights)
        head_net = build_head(head)
    return LeafClassifier(features, head_net, backbone.freeze_boundary)


def trainable_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def to_tensor(images) -> torch.Tensor:
    """N x H x W x 3 float array in [0, 1] -> N x 3 x H x W float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DataError(f"expected N x H x W x 3 images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def predict(model: LeafClassifier, images, batch_size: int = 32, spec: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """Class probabilities in inference mode, one row per image."""
    x = to_tensor(images)
    if tuple(x.shape[2:]) != spec.target_size:
        raise DataError(f"expected {spec.target_size} inputs, got {tuple(x.shape[2:])}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = [torch.softmax(model(x[i: i + batch_size]), dim=1) for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out).numpy() if out else np.zeros((0, len(LABELS)), np.float32)


@dataclass
class ModelCard:
    """JSON sidecar stored next to every exported model."""
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    head: HeadSpec = field(default_factory=HeadSpec)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    seeds: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "classes": list(LABELS),
            "backbone": asdict(self.backbone),
            "head": asdict(self.head),
            "freeze_boundary": self.backbone.freeze_boundary,
            "preprocess": asdict(self.preprocess),
            "seeds": dict(self.seeds),
            **self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelCard":
        head = dict(d["head"])
        head["dense_units"] = tuple(head["dense_units"])
        pre = dict(d["preprocess"])
        pre["target_size"] = tuple(pre["target_size"])
        known = {"classes", "backbone", "head", "freeze_boundary", "preprocess", "seeds"}
        return cls(BackboneSpec(**d["backbone"]), HeadSpec(**head), PreprocessSpec(**pre),
                   d.get("seeds", {}), {k: v for k, v in d.items() if k not in known})


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_model(model: LeafClassifier, path, card: ModelCard) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar_path(path).write_text(json.dumps(card.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> tuple[LeafClassifier, ModelCard]:
    path = Path(path)
    if not path.is_file() or not sidecar_path(path).is_file():
        raise ModelError(f"model file or sidecar missing: {path}")
    card = ModelCard.from_dict(json.loads(sidecar_path(path).read_text()))
    skeleton = BackboneSpec("random", card.backbone.freeze_boundary)
    model = build_model(skeleton, card.head)
    try:
        model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    except Exception as exc:
        raise ModelError(f"cannot load model {path}: {exc}") from exc
    model.eval()
    return model, card
