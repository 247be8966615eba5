"""Baseline inference, confusion-cell bookkeeping and PPV/NPV reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .data import PATHOLOGIES, ImageRecord
from .models import ClassifierModel, classify_image

CELLS = ("TP", "FP", "TN", "FN")
FAILED_CELLS = ("FP", "FN")

POSITIVE = "positive"
NEGATIVE = "negative"


def cell_for(decision: str, truth: str) -> str:
    """Confusion cell as the unique function of (decision, truth)."""
    if decision == POSITIVE:
        return "TP" if truth == POSITIVE else "FP"
    return "FN" if truth == POSITIVE else "TN"


@dataclass(frozen=True)
class InferenceRecord:
    """One (image, pathology) prediction with its confusion-cell assignment."""

    image_id: str
    pathology: str
    probability: float
    decision: str
    truth: str
    cell: str

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "pathology": self.pathology,
            "probability": self.probability,
            "decision": self.decision,
            "truth": self.truth,
            "cell": self.cell,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceRecord":
        return cls(d["image_id"], d["pathology"], d["probability"], d["decision"],
                   d["truth"], d["cell"])


def run_inference(model: ClassifierModel, records: list[ImageRecord],
                  threshold: float = 0.5, batch_size: int = 64) -> list[InferenceRecord]:
    """Classify every record and emit one InferenceRecord per (image, pathology)."""
    out: list[InferenceRecord] = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        pixels = np.stack([r.pixels for r in chunk])
        decisions, probs = classify_image(model, pixels, threshold)
        for rec, dec_row, prob_row in zip(chunk, decisions, probs):
            for k, name in enumerate(PATHOLOGIES):
                decision = POSITIVE if dec_row[k] else NEGATIVE
                truth = POSITIVE if rec.labels[k] else NEGATIVE
                out.append(
                    InferenceRecord(
                        image_id=rec.image_id,
                        pathology=name,
                        probability=float(prob_row[k]),
                        decision=decision,
                        truth=truth,
                        cell=cell_for(decision, truth),
                    )
                )
    return out


def write_inference_log(records: Iterable[InferenceRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_inference_log(path: str | Path) -> list[InferenceRecord]:
    with Path(path).open() as fh:
        return [InferenceRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass
class ConfusionPartition:
    """Per-pathology disjoint id sets for the four confusion cells.

    Ids are kept as sorted lists so iteration order (and thus sampling under
    a fixed seed) is deterministic.
    """

    cells: dict[str, dict[str, list[str]]] = field(default_factory=dict)

    @classmethod
    def empty(cls, pathologies: Iterable[str] = PATHOLOGIES) -> "ConfusionPartition":
        return cls({p: {c: [] for c in CELLS} for p in pathologies})

    def ids(self, pathology: str, cell: str) -> list[str]:
        return self.cells[pathology][cell]

    def cell_of(self, pathology: str, image_id: str) -> str | None:
        for c in CELLS:
            if image_id in self.cells[pathology][c]:
                return c
        return None

    def failed(self, pathology: str) -> list[str]:
        """FP ∪ FN for one pathology, sorted."""
        return sorted(self.cells[pathology]["FP"] + self.cells[pathology]["FN"])

    def counts(self, pathology: str) -> dict[str, int]:
        return {c: len(self.cells[pathology][c]) for c in CELLS}

    def move(self, pathology: str, image_id: str, new_cell: str) -> None:
        old = self.cell_of(pathology, image_id)
        if old is None:
            raise KeyError(f"{image_id} not present for {pathology}")
        self.cells[pathology][old].remove(image_id)
        self.cells[pathology][new_cell].append(image_id)
        self.cells[pathology][new_cell].sort()

    def remove(self, pathology: str, image_id: str) -> None:
        old = self.cell_of(pathology, image_id)
        if old is None:
            raise KeyError(f"{image_id} not present for {pathology}")
        self.cells[pathology][old].remove(image_id)

    def copy(self) -> "ConfusionPartition":
        return ConfusionPartition(
            {p: {c: list(ids) for c, ids in cells.items()} for p, cells in self.cells.items()}
        )

    def validate(self) -> None:
        for pathology, cells in self.cells.items():
            seen: set[str] = set()
            for c in CELLS:
                ids = set(cells[c])
                if len(ids) != len(cells[c]):
                    raise ValueError(f"{pathology}/{c} holds duplicate ids")
                overlap = seen & ids
                if overlap:
                    raise ValueError(f"{pathology}: ids in multiple cells: {sorted(overlap)}")
                seen |= ids

    def to_dict(self) -> dict:
        return {p: {c: list(ids) for c, ids in cells.items()} for p, cells in self.cells.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionPartition":
        part = cls({p: {c: sorted(ids) for c, ids in cells.items()} for p, cells in d.items()})
        part.validate()
        return part


def partition_confusion(records: Iterable[InferenceRecord]) -> ConfusionPartition:
    """Group inference records into per-pathology TP/FP/TN/FN id sets."""
    part = ConfusionPartition.empty()
    seen: set[tuple[str, str]] = set()
    for rec in records:
        key = (rec.image_id, rec.pathology)
        if key in seen:
            raise ValueError(f"duplicate inference record for {key}")
        seen.add(key)
        if rec.pathology not in part.cells:
            part.cells[rec.pathology] = {c: [] for c in CELLS}
        part.cells[rec.pathology][rec.cell].append(rec.image_id)
    for cells in part.cells.values():
        for c in CELLS:
            cells[c].sort()
    part.validate()
    return part


class MetricValue(NamedTuple):
    value: float
    undefined: bool


def compute_ppv(tp: int, fp: int) -> MetricValue:
    """Positive predictive value as a percentage; 0.0 + flag when TP+FP = 0."""
    if tp < 0 or fp < 0:
        raise ValueError("counts must be non-negative")
    if tp + fp == 0:
        return MetricValue(0.0, True)
    return MetricValue(100.0 * tp / (tp + fp), False)


def compute_npv(tn: int, fn: int) -> MetricValue:
    """Negative predictive value as a percentage; 0.0 + flag when TN+FN = 0."""
    if tn < 0 or fn < 0:
        raise ValueError("counts must be non-negative")
    if tn + fn == 0:
        return MetricValue(0.0, True)
    return MetricValue(100.0 * tn / (tn + fn), False)


@dataclass(frozen=True)
class PathologyMetrics:
    name: str
    tp: int
    fp: int
    tn: int
    fn: int
    ppv: float
    npv: float
    ppv_undefined: bool
    npv_undefined: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "counts": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "ppv": self.ppv,
            "npv": self.npv,
            "ppv_undefined": self.ppv_undefined,
            "npv_undefined": self.npv_undefined,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PathologyMetrics":
        c = d["counts"]
        return cls(d["name"], c["tp"], c["fp"], c["tn"], c["fn"],
                   d["ppv"], d["npv"], d["ppv_undefined"], d["npv_undefined"])


@dataclass
class MetricsReport:
    """Per-pathology PPV/NPV with counts, plus provenance."""

    rows: list[PathologyMetrics]
    provenance: dict = field(default_factory=dict)

    def row(self, pathology: str) -> PathologyMetrics:
        for r in self.rows:
            if r.name == pathology:
                return r
        raise KeyError(pathology)

    def pathology_names(self) -> list[str]:
        return [r.name for r in self.rows]

    def to_dict(self, include_timestamp: bool = True) -> dict:
        provenance = dict(self.provenance)
        if not include_timestamp:
            provenance.pop("timestamp", None)
        return {"rows": [r.to_dict() for r in self.rows], "provenance": provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls([PathologyMetrics.from_dict(r) for r in d["rows"]], dict(d.get("provenance", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_report(partition: ConfusionPartition, provenance: dict | None = None) -> MetricsReport:
    """Metrics for every pathology in the partition, in canonical order."""
    partition.validate()
    rows = []
    for name in sorted(partition.cells, key=lambda p: PATHOLOGIES.index(p) if p in PATHOLOGIES else 99):
        counts = partition.counts(name)
        ppv = compute_ppv(counts["TP"], counts["FP"])
        npv = compute_npv(counts["TN"], counts["FN"])
        rows.append(
            PathologyMetrics(
                name=name,
                tp=counts["TP"], fp=counts["FP"], tn=counts["TN"], fn=counts["FN"],
                ppv=ppv.value, npv=npv.value,
                ppv_undefined=ppv.undefined, npv_undefined=npv.undefined,
            )
        )
    return MetricsReport(rows, dict(provenance or {}))


def render_report_table(report: MetricsReport) -> str:
    """Text table with two-decimal metric rendering."""
    width = max(len(r.name) for r in report.rows)
    lines = [f"{'Pathology':<{width}}  {'PPV':>7} {'NPV':>7}  {'TP':>5} {'FP':>5} {'TN':>5} {'FN':>5}"]
    for r in report.rows:
        ppv = f"{r.ppv:.2f}" + ("*" if r.ppv_undefined else "")
        npv = f"{r.npv:.2f}" + ("*" if r.npv_undefined else "")
        lines.append(
            f"{r.name:<{width}}  {ppv:>7} {npv:>7}  {r.tp:>5} {r.fp:>5} {r.tn:>5} {r.fn:>5}"
        )
    if any(r.ppv_undefined or r.npv_undefined for r in report.rows):
        lines.append("(*) metric undefined: zero denominator")
    return "\n".join(lines)
