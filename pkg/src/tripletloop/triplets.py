"""Construction of training/validation image triplets from a confusion partition."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import ConfusionPartition

CHECKING_LABELS = {"FN": -1, "FP": 1}


class UnsatisfiableTripletError(ValueError):
    """A pathology lacks the pools needed to form triplets."""

    def __init__(self, pathology: str, reason: str) -> None:
        super().__init__(f"cannot build triplets for {pathology!r}: {reason}")
        self.pathology = pathology
        self.reason = reason


def checking_label_for(cell: str) -> int:
    """-1 for an FN anchor, +1 for an FP anchor; only failures are anchors."""
    try:
        return CHECKING_LABELS[cell]
    except KeyError:
        raise ValueError(f"anchors must be FP or FN, got {cell!r}") from None


@dataclass(frozen=True)
class ImageTriplet:
    """(failed-inference anchor, TP reference, TN reference) with its sign label."""

    anchor_id: str
    tp_id: str
    tn_id: str
    pathology: str
    checking_label: int

    def __post_init__(self) -> None:
        if self.checking_label not in (-1, 1):
            raise ValueError(f"checking_label must be -1 or +1, got {self.checking_label}")
        if self.anchor_id in (self.tp_id, self.tn_id):
            raise ValueError("anchor must differ from both references")
        if self.tp_id == self.tn_id:
            raise ValueError("TP and TN references must differ")

    def to_dict(self, subset: str | None = None) -> dict:
        d = {
            "anchor_id": self.anchor_id,
            "tp_id": self.tp_id,
            "tn_id": self.tn_id,
            "pathology": self.pathology,
            "checking_label": self.checking_label,
        }
        if subset is not None:
            d["set"] = subset
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ImageTriplet":
        return cls(d["anchor_id"], d["tp_id"], d["tn_id"], d["pathology"], d["checking_label"])


@dataclass(frozen=True)
class TripletDatasetConfig:
    n_train: int = 150
    seed: int = 0
    reference_sampling: str = "fresh-per-triplet"

    def __post_init__(self) -> None:
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if self.reference_sampling != "fresh-per-triplet":
            raise ValueError(f"unsupported reference_sampling: {self.reference_sampling!r}")


def _pools(partition: ConfusionPartition, pathology: str) -> tuple[list[str], list[str], list[str]]:
    if pathology not in partition.cells:
        raise KeyError(f"unknown pathology: {pathology!r}")
    failed = partition.failed(pathology)
    tps = sorted(partition.ids(pathology, "TP"))
    tns = sorted(partition.ids(pathology, "TN"))
    if not failed:
        raise UnsatisfiableTripletError(pathology, "no failed inferences to anchor on")
    if not tps:
        raise UnsatisfiableTripletError(pathology, "TP pool is empty")
    if not tns:
        raise UnsatisfiableTripletError(pathology, "TN pool is empty")
    return failed, tps, tns


def _make_triplet(anchor: str, pathology: str, fn_ids: set[str],
                  tps: list[str], tns: list[str], rng: np.random.Generator) -> ImageTriplet:
    label = -1 if anchor in fn_ids else 1
    tp = tps[int(rng.integers(len(tps)))]
    tn = tns[int(rng.integers(len(tns)))]
    return ImageTriplet(anchor, tp, tn, pathology, label)


def build_training_triplets(partition: ConfusionPartition, pathology: str,
                            cfg: TripletDatasetConfig) -> list[ImageTriplet]:
    """Sample min(n_train, |failed|) triplets with distinct anchors.

    Anchors are drawn without replacement from FP ∪ FN; each triplet gets
    fresh TP/TN references drawn uniformly with replacement.
    """
    failed, tps, tns = _pools(partition, pathology)
    fn_ids = set(partition.ids(pathology, "FN"))
    rng = np.random.default_rng(cfg.seed)
    n = min(cfg.n_train, len(failed))
    anchor_idx = rng.permutation(len(failed))[:n]
    return [_make_triplet(failed[i], pathology, fn_ids, tps, tns, rng) for i in anchor_idx]


def build_validation_triplets(partition: ConfusionPartition, pathology: str,
                              training_anchor_ids: set[str] | list[str],
                              cfg: TripletDatasetConfig) -> list[ImageTriplet]:
    """One triplet per failed image left out of training (may be empty)."""
    failed, tps, tns = _pools(partition, pathology)
    fn_ids = set(partition.ids(pathology, "FN"))
    training = set(training_anchor_ids)
    anchors = [a for a in failed if a not in training]
    rng = np.random.default_rng([cfg.seed, 0x5A11DA])
    return [_make_triplet(a, pathology, fn_ids, tps, tns, rng) for a in anchors]


def write_triplets(sets: dict[str, list[ImageTriplet]], path: str | Path) -> None:
    """Serialize {"train": [...], "val": [...]} as JSON-lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for subset in ("train", "val"):
            for t in sets.get(subset, []):
                fh.write(json.dumps(t.to_dict(subset), sort_keys=True) + "\n")


def read_triplets(path: str | Path) -> dict[str, list[ImageTriplet]]:
    out: dict[str, list[ImageTriplet]] = {"train": [], "val": []}
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out[d["set"]].append(ImageTriplet.from_dict(d))
    return out
