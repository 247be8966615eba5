"""
Baseline inference and the PPV/NPV report
=========================================

Pretrain a small classifier, deliberately weaken its decision layer into an
FN-heavy profile, then partition every (image, pathology) decision into
TP/FP/TN/FN and print the per-pathology report.
"""

from tripletloop import SyntheticSpec, generate_synthetic_dataset, split_dataset
from tripletloop.evaluation import render_report_table
from tripletloop.pipeline import pretrain_classifier, run_baseline, weaken_classifier

records = generate_synthetic_dataset(
    SyntheticSpec(image_size=64, n_pathologies=2, noise_sigma=0.08, prevalence=0.5, seed=7),
    600,
)
train_records, eval_records = split_dataset(records, (0.4, 0.6), seed=7)

print("pretraining classifier (a couple of seconds on CPU)...")
classifier = pretrain_classifier(train_records, epochs=12, seed=7)

# Subtract the 0.8-quantile of each pathology's positive logits: ~80% of
# positives now fall below the decision threshold and become FNs.
weaken_classifier(classifier, train_records, quantile=0.8)

baseline = run_baseline(classifier, eval_records, threshold=0.5)
print(render_report_table(baseline.report))
print()

for name in ("No Finding", "Enlarged Cardiomediastinum"):
    counts = baseline.partition.counts(name)
    failed = baseline.partition.failed(name)
    print(f"{name}: {len(failed)} failed inferences "
          f"(FP {counts['FP']}, FN {counts['FN']}), TP pool {counts['TP']}, TN pool {counts['TN']}")
