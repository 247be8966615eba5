"""
The reviewer-in-the-loop: relabel queue, verdicts, serialized retrain jobs
==========================================================================

Drives the LoopService object directly (the HTTP API in
`tripletloop serve` wraps exactly these calls). Every relabel and job
transition lands in an append-only event log; replaying the log rebuilds
the same state.
"""

import json
import tempfile
from pathlib import Path

from tripletloop import SyntheticSpec, generate_synthetic_dataset, split_dataset
from tripletloop.pipeline import pretrain_classifier, run_baseline, weaken_classifier
from tripletloop.service import LoopService, ServiceContext

records = generate_synthetic_dataset(
    SyntheticSpec(image_size=64, n_pathologies=2, noise_sigma=0.08, prevalence=0.5, seed=7),
    400,
)
train_records, eval_records = split_dataset(records, (0.4, 0.6), seed=7)
classifier = pretrain_classifier(train_records, epochs=10, seed=7)
weaken_classifier(classifier, train_records, quantile=0.8)
baseline = run_baseline(classifier, eval_records, threshold=0.5)

state_dir = Path(tempfile.mkdtemp(prefix="review-loop-"))
service = LoopService(
    ServiceContext(
        records=eval_records,
        partition=baseline.partition,
        report=baseline.report,
        classifier=classifier,
        threshold=baseline.threshold,
        split_id=baseline.split_id,
        probabilities={(r.image_id, r.pathology): r.probability for r in baseline.inference_records},
        decisions={(r.image_id, r.pathology): r.decision for r in baseline.inference_records},
    ),
    state_dir,
)

page = service.list_failures("No Finding", page=1, page_size=3)
print(f"failure queue for 'No Finding': {page['total']} items, first page:")
for item in page["items"]:
    print(f"  {item['image_id']}  p={item['probability']:.3f}  cell={item['cell']}")

# the reviewer confirms the first failure and overturns the second
first, second = page["items"][0], page["items"][1]
service.submit_relabel(first["image_id"], "No Finding",
                       "confirm-FN" if first["cell"] == "FN" else "confirm-FP")
service.submit_relabel(second["image_id"], "No Finding", "baseline-correct")
print(f"\nafter relabels the queue holds {service.list_failures('No Finding')['total']} items "
      "(baseline-correct removed one)")

job_id = service.enqueue_retrain("No Finding", {"epochs": 2, "n_train": 60, "batch_size": 8})
print(f"queued {job_id}; worker runs triplet build -> train -> reclassify -> compare")
service.wait_idle()
job = service.job_status(job_id)
print(f"job status: {job['status']}")

latest = service.latest_report()
deltas = {d["pathology"]: d for d in latest["comparison"]["deltas"]}
d = deltas["No Finding"]
print(f"No Finding: PPV {d['ppv_before']:.2f} -> {d['ppv_after']:.2f}, "
      f"NPV {d['npv_before']:.2f} -> {d['npv_after']:.2f}")

replayed = LoopService.replay_log(service.state_dir / "events.jsonl")
print("replay reconstructs identical state:",
      json.dumps(replayed, sort_keys=True) == json.dumps(service.snapshot_state(), sort_keys=True))
service.stop()
