"""
The repair loop: triplets -> margin ranking loss -> prototypes -> new report
============================================================================

Anchors are failed inferences. A triplet pairs each anchor with a baseline
TP and a baseline TN for the same pathology, plus a sign label: -1 for FN
anchors (pull toward the TP), +1 for FP anchors (pull toward the TN). The
loss ranks the two anchor-reference distances:

    loss(x1, x2, y) = max(0, -y*(x1 - x2) + margin)

After five epochs, held-out failures are re-decided by their distance to
class prototypes (mean embeddings of TP/TN support images).
"""

from tripletloop import (
    SyntheticSpec,
    TrainConfig,
    generate_synthetic_dataset,
    margin_ranking_loss,
    split_dataset,
)
from tripletloop.pipeline import pretrain_classifier, repair, run_baseline, weaken_classifier
from tripletloop.stats import render_comparison_table
from tripletloop.triplets import TripletDatasetConfig

# the hinge by hand: an FN anchor (y = -1) must sit closer to the TP by the margin
print("loss(x1=0.5, x2=1.5, y=-1, margin=0)  =", margin_ranking_loss(0.5, 1.5, -1, 0.0))
print("loss(x1=2.0, x2=1.0, y=-1, margin=.5) =", margin_ranking_loss(2.0, 1.0, -1, 0.5))
print("loss(x1=x2, any y, margin=1)          =", margin_ranking_loss(1.0, 1.0, 1, 1.0))
print()

records = generate_synthetic_dataset(
    SyntheticSpec(image_size=64, n_pathologies=2, noise_sigma=0.08, prevalence=0.5, seed=7),
    600,
)
train_records, eval_records = split_dataset(records, (0.4, 0.6), seed=7)
classifier = pretrain_classifier(train_records, epochs=12, seed=7)
weaken_classifier(classifier, train_records, quantile=0.8)
baseline = run_baseline(classifier, eval_records, threshold=0.5)

result = repair(
    classifier,
    baseline.partition,
    eval_records,
    "all",
    mode="tfsl",
    triplet_cfg=TripletDatasetConfig(n_train=100, seed=7),
    train_cfg=TrainConfig(epochs=5, learning_rate=1e-4, weight_decay=1e-5, seed=7),
    head_seed=7,
    before_report=baseline.report,
    skip_unsatisfiable=True,
)

for name, trained in result.trained.items():
    print(f"{name}: per-epoch mean loss {[round(v, 4) for v in trained.loss_trace]}")
print()
print(render_comparison_table(result.comparison))
