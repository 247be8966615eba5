"""Backbone, classification/embedding heads, forward passes and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import zipfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import N_PATHOLOGIES, PreprocessConfig

CHECKPOINT_FORMAT_VERSION = 1
EMBED_DIM = 128


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or structurally invalid."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class ConvBackbone(nn.Module):
    """Small 3-block convolutional feature extractor (desk-scale default).

    The final feature map is average-pooled onto a pool_grid x pool_grid
    layout and flattened, so features keep coarse location information.
    Any module mapping (B, 3, H, W) -> (B, feature_dim) can stand in for it,
    including a DenseNet-class network at full scale.
    """

    def __init__(self, feature_dim: int = 64, channels: tuple[int, int] = (16, 32),
                 pool_grid: int = 4):
        super().__init__()
        if feature_dim % (pool_grid * pool_grid) != 0:
            raise ValueError(f"feature_dim {feature_dim} must be divisible by pool_grid^2")
        c1, c2 = channels
        c_out = feature_dim // (pool_grid * pool_grid)
        self.feature_dim = feature_dim
        self.channels = tuple(channels)
        self.pool_grid = pool_grid
        self.blocks = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c2, c_out, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(pool_grid),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).flatten(1)


class ClassifierHead(nn.Module):
    """Linear map feature_dim -> 14 with per-output sigmoid."""

    def __init__(self, feature_dim: int, n_outputs: int = N_PATHOLOGIES):
        super().__init__()
        self.linear = nn.Linear(feature_dim, n_outputs)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.linear(features))


class EmbeddingHead(nn.Module):
    """Linear map feature_dim -> 128 followed by PReLU (learnable slope)."""

    def __init__(self, feature_dim: int, embed_dim: int = EMBED_DIM, prelu_init: float = 0.25):
        super().__init__()
        self.linear = nn.Linear(feature_dim, embed_dim)
        self.prelu = nn.PReLU(num_parameters=1, init=prelu_init)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.prelu(self.linear(features))


class ClassifierModel(nn.Module):
    """Backbone + classification head; forward yields 14 probabilities."""

    def __init__(self, backbone: ConvBackbone, head: ClassifierHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


class EmbeddingModel(nn.Module):
    """Backbone + embedding head, with the classification head retained.

    The retained head keeps baseline decisions recomputable after the
    embedding branch (and, by default, the backbone) is retrained.
    """

    def __init__(self, backbone: ConvBackbone, embed_head: EmbeddingHead,
                 classifier_head: ClassifierHead):
        super().__init__()
        self.backbone = backbone
        self.embed_head = embed_head
        self.classifier_head = classifier_head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.embed_head(self.backbone(x))
        assert out.shape[-1] == self.embed_head.linear.out_features
        return out


def build_classifier(backbone: ConvBackbone, head: ClassifierHead) -> ClassifierModel:
    """Assemble a classifier, checking head/backbone dimension agreement."""
    if head.linear.in_features != backbone.feature_dim:
        raise ValueError(
            f"head expects {head.linear.in_features} features, "
            f"backbone provides {backbone.feature_dim}"
        )
    return ClassifierModel(backbone, head)


def new_classifier(feature_dim: int = 64, seed: int = 0) -> ClassifierModel:
    """Fresh classifier with seeded initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        backbone = ConvBackbone(feature_dim=feature_dim)
        head = ClassifierHead(feature_dim)
    return build_classifier(backbone, head)


def swap_embedding_head(classifier: ClassifierModel, seed: int = 0,
                        embed_dim: int = EMBED_DIM) -> EmbeddingModel:
    """Replace the output layer with a fresh 128-unit linear + PReLU head.

    The backbone (and the retained classification head) are copied verbatim;
    only the new head's linear weights are randomly initialized under ``seed``.
    """
    backbone = copy.deepcopy(classifier.backbone)
    retained = copy.deepcopy(classifier.head)
    head = EmbeddingHead(backbone.feature_dim, embed_dim)
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(backbone.feature_dim)
    with torch.no_grad():
        head.linear.weight.uniform_(-bound, bound, generator=gen)
        head.linear.bias.uniform_(-bound, bound, generator=gen)
    return EmbeddingModel(backbone, head, retained)


def shift_classifier_bias(model: ClassifierModel, delta: float) -> None:
    """Add ``delta`` to every output logit (in place).

    Negative deltas under-call positives; used to produce a deliberately
    weakened baseline with an FN-heavy decision profile.
    """
    with torch.no_grad():
        model.head.linear.bias += delta


def _as_batch(pixels: np.ndarray | torch.Tensor) -> tuple[torch.Tensor, bool]:
    if isinstance(pixels, np.ndarray):
        if not np.all(np.isfinite(pixels)):
            raise ValueError("pixels contain non-finite values")
        pixels = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))
    elif not torch.all(torch.isfinite(pixels)):
        raise ValueError("pixels contain non-finite values")
    if pixels.dim() == 3:
        return pixels.unsqueeze(0), True
    if pixels.dim() == 4:
        return pixels, False
    raise ValueError(f"expected (3,H,W) or (B,3,H,W) pixels, got {tuple(pixels.shape)}")


def embed_image(model: EmbeddingModel, pixels: np.ndarray | torch.Tensor) -> np.ndarray:
    """Embed one image (3,H,W) or a batch (B,3,H,W) into 128-d vectors."""
    batch, single = _as_batch(pixels)
    model.eval()
    with torch.no_grad():
        out = model(batch)
    vec = out.numpy().astype(np.float32)
    return vec[0] if single else vec


def classify_image(model: ClassifierModel, pixels: np.ndarray | torch.Tensor,
                   threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-pathology decisions and probabilities for one image or a batch.

    A probability exactly equal to the threshold decides positive.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    batch, single = _as_batch(pixels)
    model.eval()
    with torch.no_grad():
        probs = model(batch).numpy().astype(np.float64)
    decisions = (probs >= threshold).astype(np.int8)
    if single:
        return decisions[0], probs[0]
    return decisions, probs


def _model_meta(model: nn.Module) -> dict:
    if isinstance(model, ClassifierModel):
        return {
            "head_kind": "classifier",
            "feature_dim": model.backbone.feature_dim,
            "backbone_channels": list(model.backbone.channels),
            "pool_grid": model.backbone.pool_grid,
            "n_outputs": model.head.linear.out_features,
        }
    if isinstance(model, EmbeddingModel):
        return {
            "head_kind": "embedding",
            "feature_dim": model.backbone.feature_dim,
            "backbone_channels": list(model.backbone.channels),
            "pool_grid": model.backbone.pool_grid,
            "embed_dim": model.embed_head.linear.out_features,
            "n_outputs": model.classifier_head.linear.out_features,
        }
    raise TypeError(f"unsupported model type: {type(model).__name__}")


def checkpoint_fingerprint(model: nn.Module) -> str:
    """Content hash of the parameter tensors (stable across runs)."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.detach().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(model: nn.Module, path: str | Path,
                    preprocess: PreprocessConfig | None = None,
                    seed: int | None = None,
                    train_fingerprint: dict | None = None) -> str:
    """Write a versioned archive (meta.json + params.pt); returns its id."""
    meta = _model_meta(model)
    meta.update(
        format_version=CHECKPOINT_FORMAT_VERSION,
        preprocess=(preprocess or PreprocessConfig()).to_dict(),
        seed=seed,
        train_fingerprint=train_fingerprint,
        checkpoint_id=checkpoint_fingerprint(model),
    )
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        zf.writestr("params.pt", buf.getvalue())
    return meta["checkpoint_id"]


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    """Load a checkpoint archive; round-trips forward outputs bit-exactly."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            params = zf.read("params.pt")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format_version {version}, "
            f"reader supports {CHECKPOINT_FORMAT_VERSION}"
        )
    backbone = ConvBackbone(meta["feature_dim"], tuple(meta["backbone_channels"]), meta.get("pool_grid", 4))
    if meta["head_kind"] == "classifier":
        model: nn.Module = ClassifierModel(backbone, ClassifierHead(meta["feature_dim"], meta["n_outputs"]))
    elif meta["head_kind"] == "embedding":
        model = EmbeddingModel(
            backbone,
            EmbeddingHead(meta["feature_dim"], meta["embed_dim"]),
            ClassifierHead(meta["feature_dim"], meta["n_outputs"]),
        )
    else:
        raise CheckpointError(f"unknown head_kind {meta['head_kind']!r}")
    try:
        state = torch.load(io.BytesIO(params), weights_only=True)
        model.load_state_dict(state)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return model, meta
