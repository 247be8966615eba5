"""Margin-based triplet training, prototype classification and failure repair."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .data import PATHOLOGIES, ImageRecord
from .evaluation import NEGATIVE, POSITIVE, ConfusionPartition, cell_for
from .models import EmbeddingModel, embed_image
from .triplets import ImageTriplet

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

LOSS_KINDS = ("margin_ranking", "triplet_margin")


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; carries the failing epoch/batch."""

    def __init__(self, epoch: int, batch: int, value: float) -> None:
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    margin: float = 1.0
    loss_kind: str = "margin_ranking"
    batch_size: int = 16
    seed: int = 0
    backbone_trainable: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def euclidean_distance(a, b):
    """L2 distance between two equal-length vectors.

    Accepts torch tensors (returns a differentiable tensor) or any 1-D
    numeric sequence (returns a float).
    """
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        if a.shape != b.shape:
            raise ValueError(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        return torch.sqrt(((a - b) ** 2).sum(dim=-1))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("vectors must be finite")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def margin_ranking_loss(x1, x2, y, margin: float = 1.0):
    """Hinge on two ranked distances: max(0, -y*(x1-x2) + margin).

    y = -1 pushes x1 below x2 by at least the margin; y = +1 the reverse.
    """
    if isinstance(x1, torch.Tensor) or isinstance(x2, torch.Tensor):
        y_t = torch.as_tensor(y, dtype=x1.dtype if isinstance(x1, torch.Tensor) else x2.dtype)
        if not torch.all((y_t == 1) | (y_t == -1)):
            raise ValueError("y must be -1 or +1")
        return torch.clamp(-y_t * (x1 - x2) + margin, min=0.0)
    if y not in (-1, 1):
        raise ValueError(f"y must be -1 or +1, got {y!r}")
    return max(0.0, -y * (x1 - x2) + margin)


def triplet_margin_loss(d_ap, d_an, margin: float = 1.0):
    """Hinge on anchor-positive vs anchor-negative distances."""
    if isinstance(d_ap, torch.Tensor) or isinstance(d_an, torch.Tensor):
        return torch.clamp(d_ap - d_an + margin, min=0.0)
    return max(0.0, d_ap - d_an + margin)


def train_fingerprint(cfg: TrainConfig) -> dict:
    """Full optimizer settings for checkpoint metadata, Adam constants included."""
    return {**cfg.to_dict(), "adam_betas": list(ADAM_BETAS), "adam_eps": ADAM_EPS}


@dataclass
class TrainedEmbeddingModel:
    model: EmbeddingModel
    config: TrainConfig
    loss_trace: list[float]
    duration_seconds: float = 0.0
    checkpoint_id: str | None = None

    def job_record(self) -> dict:
        return {
            "config": train_fingerprint(self.config),
            "epoch_losses": list(self.loss_trace),
            "checkpoint_id": self.checkpoint_id,
            "duration_seconds": self.duration_seconds,
        }


def _records_by_id(records) -> dict[str, ImageRecord]:
    if isinstance(records, dict):
        return records
    return {r.image_id: r for r in records}


def _stack_pixels(ids: list[str], by_id: dict[str, ImageRecord]) -> torch.Tensor:
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise KeyError(f"records missing for image ids: {missing[:5]}")
    return torch.from_numpy(np.stack([by_id[i].pixels for i in ids]))


def _batch_losses(model: EmbeddingModel, anchors: torch.Tensor, tps: torch.Tensor,
                  tns: torch.Tensor, y: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    e_a = model(anchors)
    e_tp = model(tps)
    e_tn = model(tns)
    x1 = euclidean_distance(e_a, e_tp)
    x2 = euclidean_distance(e_a, e_tn)
    if cfg.loss_kind == "margin_ranking":
        return margin_ranking_loss(x1, x2, y, cfg.margin)
    # Positive reference is the one the anchor belongs near: TP for FN
    # anchors (y = -1), TN for FP anchors (y = +1).
    fn_mask = y < 0
    d_ap = torch.where(fn_mask, x1, x2)
    d_an = torch.where(fn_mask, x2, x1)
    return triplet_margin_loss(d_ap, d_an, cfg.margin)


def _train(model: EmbeddingModel, triplets: list[ImageTriplet], records,
           cfg: TrainConfig) -> TrainedEmbeddingModel:
    if not triplets:
        raise ValueError("cannot train on an empty triplet list")
    by_id = _records_by_id(records)
    start = time.monotonic()

    anchors = _stack_pixels([t.anchor_id for t in triplets], by_id)
    tps = _stack_pixels([t.tp_id for t in triplets], by_id)
    tns = _stack_pixels([t.tn_id for t in triplets], by_id)
    y = torch.tensor([t.checking_label for t in triplets], dtype=torch.float32)

    model.train()
    for p in model.backbone.parameters():
        p.requires_grad_(cfg.backbone_trainable)
    for p in model.classifier_head.parameters():
        p.requires_grad_(False)  # retained head stays as the baseline left it
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
        betas=ADAM_BETAS, eps=ADAM_EPS,
    )

    rng = np.random.default_rng(cfg.seed)
    n = len(triplets)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss_sum = 0.0
        for batch_no, start_idx in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(perm[start_idx : start_idx + cfg.batch_size])
            losses = _batch_losses(model, anchors[idx], tps[idx], tns[idx], y[idx], cfg)
            loss = losses.mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, batch_no, float(loss.detach()))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss_sum += float(losses.detach().sum())
        trace.append(epoch_loss_sum / n)
    model.eval()
    return TrainedEmbeddingModel(model, cfg, trace, duration_seconds=time.monotonic() - start)


def train_tfsl(model: EmbeddingModel, triplets: list[ImageTriplet], records,
               cfg: TrainConfig) -> TrainedEmbeddingModel:
    """Per-pathology training: all triplets must target one pathology."""
    pathologies = {t.pathology for t in triplets}
    if len(pathologies) > 1:
        raise ValueError(f"tfsl training expects a single pathology, got {sorted(pathologies)}")
    return _train(model, triplets, records, cfg)


def train_incremental(model: EmbeddingModel, triplets: list[ImageTriplet], records,
                      cfg: TrainConfig) -> TrainedEmbeddingModel:
    """Pooled training over triplets from any number of pathologies at once."""
    return _train(model, triplets, records, cfg)


@dataclass
class PrototypeSet:
    pathology: str
    tp_prototype: np.ndarray
    tn_prototype: np.ndarray
    tp_support_ids: list[str] = field(default_factory=list)
    tn_support_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.tp_prototype = np.asarray(self.tp_prototype, dtype=np.float32)
        self.tn_prototype = np.asarray(self.tn_prototype, dtype=np.float32)
        if not (np.all(np.isfinite(self.tp_prototype)) and np.all(np.isfinite(self.tn_prototype))):
            raise ValueError("prototypes must be finite")


def _sample_support(pool: list[str], size: int, rng: np.random.Generator) -> list[str]:
    pool = sorted(pool)
    if len(pool) <= size:
        return pool
    idx = rng.permutation(len(pool))[:size]
    return [pool[i] for i in sorted(idx)]


def compute_prototypes(model: EmbeddingModel, partition: ConfusionPartition, pathology: str,
                       records, support_size: int = 20, seed: int = 0) -> PrototypeSet:
    """Mean embeddings of sampled baseline-correct TP and TN support images."""
    by_id = _records_by_id(records)
    tp_pool = partition.ids(pathology, "TP")
    tn_pool = partition.ids(pathology, "TN")
    if not tp_pool or not tn_pool:
        raise UnsatisfiablePrototypeError(pathology, tp=len(tp_pool), tn=len(tn_pool))
    rng = np.random.default_rng([seed, PATHOLOGIES.index(pathology)])
    tp_ids = _sample_support(tp_pool, support_size, rng)
    tn_ids = _sample_support(tn_pool, support_size, rng)
    tp_vecs = embed_image(model, np.stack([by_id[i].pixels for i in tp_ids]))
    tn_vecs = embed_image(model, np.stack([by_id[i].pixels for i in tn_ids]))
    return PrototypeSet(
        pathology=pathology,
        tp_prototype=tp_vecs.mean(axis=0),
        tn_prototype=tn_vecs.mean(axis=0),
        tp_support_ids=tp_ids,
        tn_support_ids=tn_ids,
    )


class UnsatisfiablePrototypeError(ValueError):
    def __init__(self, pathology: str, tp: int, tn: int) -> None:
        super().__init__(
            f"cannot build prototypes for {pathology!r}: TP pool {tp}, TN pool {tn}"
        )
        self.pathology = pathology


def decide_from_embedding(embedding: np.ndarray, prototypes: PrototypeSet) -> str:
    """Positive iff strictly closer to the TP prototype; ties decide negative."""
    d_tp = euclidean_distance(embedding, prototypes.tp_prototype)
    d_tn = euclidean_distance(embedding, prototypes.tn_prototype)
    return POSITIVE if d_tp < d_tn else NEGATIVE


def classify_by_prototype(model: EmbeddingModel, anchor_pixels: np.ndarray,
                          prototypes: PrototypeSet) -> str:
    return decide_from_embedding(embed_image(model, anchor_pixels), prototypes)


def reclassify_failures(model: EmbeddingModel, partition: ConfusionPartition, pathology: str,
                        prototypes: PrototypeSet, validation_anchor_ids: list[str],
                        records) -> ConfusionPartition:
    """Re-decide validation anchors by prototype distance and move their cells.

    Training anchors (failures outside the validation set) are dropped from
    the returned partition; baseline-correct records stay untouched.
    """
    by_id = _records_by_id(records)
    failed = set(partition.failed(pathology))
    outside = [a for a in validation_anchor_ids if a not in failed]
    if outside:
        raise ValueError(f"anchors not in the failed set for {pathology!r}: {outside[:5]}")
    fn_ids = set(partition.ids(pathology, "FN"))
    updated = partition.copy()
    for trained_anchor in sorted(failed - set(validation_anchor_ids)):
        updated.remove(pathology, trained_anchor)
    for anchor in sorted(validation_anchor_ids):
        truth = POSITIVE if anchor in fn_ids else NEGATIVE
        decision = classify_by_prototype(model, by_id[anchor].pixels, prototypes)
        updated.move(pathology, anchor, cell_for(decision, truth))
    updated.validate()
    return updated
