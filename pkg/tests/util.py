"""Shared helpers for building random fixtures used across the test suite."""

from __future__ import annotations

import numpy as np
import torch

from tripletloop.data import PATHOLOGIES
from tripletloop.evaluation import CELLS, ConfusionPartition, InferenceRecord, cell_for
from tripletloop.training import euclidean_distance, margin_ranking_loss


def make_random_partition(rng: np.random.Generator, pathologies=PATHOLOGIES,
                          max_per_cell: int = 40, min_tp: int = 0, min_tn: int = 0,
                          min_failed: int = 0) -> ConfusionPartition:
    """Random per-pathology confusion partition with globally unique ids."""
    part = ConfusionPartition.empty(pathologies)
    counter = 0
    for name in pathologies:
        sizes = {c: int(rng.integers(0, max_per_cell + 1)) for c in CELLS}
        sizes["TP"] = max(sizes["TP"], min_tp)
        sizes["TN"] = max(sizes["TN"], min_tn)
        if min_failed and sizes["FP"] + sizes["FN"] < min_failed:
            sizes["FN"] = min_failed - sizes["FP"]
        for cell in CELLS:
            for _ in range(sizes[cell]):
                part.cells[name][cell].append(f"img-{counter:06d}")
                counter += 1
        for cell in CELLS:
            part.cells[name][cell].sort()
    return part


def loss_distance_gradient_errors(n_samples: int, seed: int, dim: int = 128,
                                  step: float = 1e-4) -> list[float]:
    """Relative errors between autograd and central-difference gradients.

    Gradients are taken through the loss-over-distances composition with
    respect to all three embeddings, skipping samples within 1e-3 of the
    hinge or of zero distance where the composition is not differentiable.
    """
    rng = np.random.default_rng(seed)
    errors: list[float] = []
    attempts = 0
    while len(errors) < n_samples and attempts < n_samples * 50:
        attempts += 1
        a, tp, tn = (rng.normal(size=dim) for _ in range(3))
        y = -1 if rng.random() < 0.5 else 1
        margin = float(rng.uniform(0.0, 2.0))
        x1 = float(np.linalg.norm(a - tp))
        x2 = float(np.linalg.norm(a - tn))
        if abs(-y * (x1 - x2) + margin) <= 1e-3 or x1 <= 1e-3 or x2 <= 1e-3:
            continue
        tensors = [torch.tensor(v, requires_grad=True, dtype=torch.float64) for v in (a, tp, tn)]
        loss = margin_ranking_loss(
            euclidean_distance(tensors[0], tensors[1]),
            euclidean_distance(tensors[0], tensors[2]),
            y, margin,
        )
        loss.backward()
        analytic = np.concatenate([t.grad.numpy() for t in tensors])

        def hinge(flat: np.ndarray) -> float:
            pa, ptp, ptn = flat[:dim], flat[dim : 2 * dim], flat[2 * dim :]
            d1 = np.linalg.norm(pa - ptp)
            d2 = np.linalg.norm(pa - ptn)
            return max(0.0, -y * (d1 - d2) + margin)

        base = np.concatenate([a, tp, tn])
        numeric = np.empty_like(base)
        for i in range(base.size):
            hi = base.copy()
            hi[i] += step
            lo = base.copy()
            lo[i] -= step
            numeric[i] = (hinge(hi) - hinge(lo)) / (2.0 * step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        errors.append(float(np.linalg.norm(analytic - numeric) / denom))
    if len(errors) < n_samples:
        raise RuntimeError("could not draw enough differentiable samples")
    return errors


def make_random_records(rng: np.random.Generator, n_images: int,
                        pathologies=PATHOLOGIES) -> list[InferenceRecord]:
    """One random inference record per (image, pathology)."""
    records = []
    for i in range(n_images):
        for name in pathologies:
            probability = float(rng.random())
            decision = "positive" if rng.random() < 0.5 else "negative"
            truth = "positive" if rng.random() < 0.5 else "negative"
            records.append(
                InferenceRecord(
                    image_id=f"img-{i:05d}",
                    pathology=name,
                    probability=probability,
                    decision=decision,
                    truth=truth,
                    cell=cell_for(decision, truth),
                )
            )
    return records
