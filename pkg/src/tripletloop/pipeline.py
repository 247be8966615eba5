"""Orchestration of the repair workflow: baseline, triplets, train, reclassify."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import PATHOLOGIES, ImageRecord
from .evaluation import (
    ConfusionPartition,
    InferenceRecord,
    MetricsReport,
    build_report,
    partition_confusion,
    run_inference,
)
from .models import (
    ClassifierModel,
    checkpoint_fingerprint,
    new_classifier,
    swap_embedding_head,
)
from .stats import compare_reports
from .training import (
    TrainConfig,
    TrainedEmbeddingModel,
    compute_prototypes,
    reclassify_failures,
    train_incremental,
    train_tfsl,
)
from .triplets import (
    ImageTriplet,
    TripletDatasetConfig,
    UnsatisfiableTripletError,
    build_training_triplets,
    build_validation_triplets,
)

MODES = ("tfsl", "incremental")


def pretrain_classifier(records: list[ImageRecord], epochs: int = 20,
                        learning_rate: float = 1e-3, batch_size: int = 32,
                        seed: int = 0) -> ClassifierModel:
    """Fit a fresh classifier on labeled records with BCE + Adam."""
    clf = new_classifier(seed=seed)
    if epochs == 0:
        return clf
    X = torch.from_numpy(np.stack([r.pixels for r in records]))
    Y = torch.from_numpy(np.stack([r.labels for r in records]).astype(np.float32))
    opt = torch.optim.Adam(clf.parameters(), lr=learning_rate)
    bce = torch.nn.BCELoss()
    clf.train()
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = torch.from_numpy(perm[start : start + batch_size])
            opt.zero_grad()
            loss = bce(clf(X[idx]), Y[idx])
            loss.backward()
            opt.step()
    clf.eval()
    return clf


def weaken_classifier(classifier: ClassifierModel, records: list[ImageRecord],
                      quantile: float = 0.8) -> None:
    """Deliberately degrade the decision layer into an FN-heavy profile.

    Per pathology, the ``quantile`` of that pathology's positive logits on
    ``records`` is subtracted from the output bias, so roughly that fraction
    of positives falls under the decision threshold while the feature
    extractor stays informative.
    """
    if not (0.0 < quantile < 1.0):
        raise ValueError("quantile must be in (0, 1)")
    classifier.eval()
    X = torch.from_numpy(np.stack([r.pixels for r in records]))
    Y = np.stack([r.labels for r in records])
    with torch.no_grad():
        logits = classifier.head.linear(classifier.backbone(X))
        for k in range(logits.shape[1]):
            pos = logits[Y[:, k] == 1, k]
            if len(pos) > 0:
                classifier.head.linear.bias[k] -= torch.quantile(pos, quantile)


def split_fingerprint(records: list[ImageRecord]) -> str:
    """Stable id for an evaluation split: hash of its sorted image ids."""
    digest = hashlib.sha256()
    for image_id in sorted(r.image_id for r in records):
        digest.update(image_id.encode())
        digest.update(b"\0")
    return digest.hexdigest()[:16]


@dataclass
class BaselineArtifacts:
    inference_records: list[InferenceRecord]
    partition: ConfusionPartition
    report: MetricsReport
    threshold: float
    split_id: str


def run_baseline(classifier: ClassifierModel, eval_records: list[ImageRecord],
                 threshold: float = 0.5, timestamp: str | None = None) -> BaselineArtifacts:
    """Baseline inference over the evaluation split plus partition and report."""
    inference = run_inference(classifier, eval_records, threshold)
    partition = partition_confusion(inference)
    split_id = split_fingerprint(eval_records)
    provenance = {"checkpoint_id": checkpoint_fingerprint(classifier), "split_id": split_id}
    if timestamp is not None:
        provenance["timestamp"] = timestamp
    report = build_report(partition, provenance)
    return BaselineArtifacts(inference, partition, report, threshold, split_id)


def resolve_pathologies(partition: ConfusionPartition, target: str,
                        skip_unsatisfiable: bool = False) -> tuple[list[str], dict[str, str]]:
    """Expand a pathology name or ``all`` into the list to repair.

    With ``skip_unsatisfiable``, pathologies lacking failures or reference
    pools are returned in the skipped map instead of raising later.
    """
    if target != "all":
        names = [target]
    else:
        names = [p for p in PATHOLOGIES if p in partition.cells]
    if not skip_unsatisfiable:
        return names, {}
    usable, skipped = [], {}
    for name in names:
        counts = partition.counts(name)
        if counts["FP"] + counts["FN"] == 0:
            skipped[name] = "no failed inferences"
        elif counts["TP"] == 0:
            skipped[name] = "TP pool is empty"
        elif counts["TN"] == 0:
            skipped[name] = "TN pool is empty"
        else:
            usable.append(name)
    return usable, skipped


@dataclass
class RepairResult:
    mode: str
    triplet_sets: dict[str, dict[str, list[ImageTriplet]]]
    trained: dict[str, TrainedEmbeddingModel]
    updated_partition: ConfusionPartition
    after_report: MetricsReport
    comparison: dict
    skipped: dict[str, str] = field(default_factory=dict)

    def job_records(self) -> dict[str, dict]:
        return {key: model.job_record() for key, model in self.trained.items()}


def repair(classifier: ClassifierModel, partition: ConfusionPartition,
           records: list[ImageRecord] | dict[str, ImageRecord], target: str,
           mode: str = "tfsl", triplet_cfg: TripletDatasetConfig | None = None,
           train_cfg: TrainConfig | None = None, head_seed: int = 0,
           support_size: int = 20, before_report: MetricsReport | None = None,
           skip_unsatisfiable: bool = False, timestamp: str | None = None) -> RepairResult:
    """Triplet build, embedding retraining and failure reclassification.

    ``mode`` selects per-pathology training (``tfsl``: one model per
    pathology) or pooled training over every target pathology at once
    (``incremental``: one shared model).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    triplet_cfg = triplet_cfg or TripletDatasetConfig()
    train_cfg = train_cfg or TrainConfig()
    by_id = records if isinstance(records, dict) else {r.image_id: r for r in records}
    names, skipped = resolve_pathologies(partition, target, skip_unsatisfiable)
    if not names:
        raise UnsatisfiableTripletError(target, "no repairable pathologies in partition")

    triplet_sets: dict[str, dict[str, list[ImageTriplet]]] = {}
    for name in names:
        train_set = build_training_triplets(partition, name, triplet_cfg)
        val_set = build_validation_triplets(
            partition, name, {t.anchor_id for t in train_set}, triplet_cfg
        )
        triplet_sets[name] = {"train": train_set, "val": val_set}

    trained: dict[str, TrainedEmbeddingModel] = {}
    if mode == "tfsl":
        for name in names:
            embedding = swap_embedding_head(classifier, seed=head_seed)
            trained[name] = train_tfsl(embedding, triplet_sets[name]["train"], by_id, train_cfg)
    else:
        pooled = [t for name in names for t in triplet_sets[name]["train"]]
        embedding = swap_embedding_head(classifier, seed=head_seed)
        trained["all"] = train_incremental(embedding, pooled, by_id, train_cfg)

    updated = partition.copy()
    for name in names:
        model = trained[name].model if mode == "tfsl" else trained["all"].model
        prototypes = compute_prototypes(model, partition, name, by_id,
                                        support_size=support_size, seed=train_cfg.seed)
        anchors = [t.anchor_id for t in triplet_sets[name]["val"]]
        updated = reclassify_failures(model, updated, name, prototypes, anchors, by_id)

    provenance = {
        "checkpoint_ids": {k: checkpoint_fingerprint(m.model) for k, m in trained.items()},
        "split_id": (before_report.provenance.get("split_id") if before_report else None),
        "mode": mode,
    }
    if timestamp is not None:
        provenance["timestamp"] = timestamp
    after_report = build_report(updated, provenance)
    comparison = compare_reports(before_report, after_report) if before_report else {}
    return RepairResult(mode, triplet_sets, trained, updated, after_report, comparison, skipped)
