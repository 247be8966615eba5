import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tripletloop.data import SyntheticSpec, generate_synthetic_dataset, split_dataset
from tripletloop.pipeline import pretrain_classifier, run_baseline, weaken_classifier


@pytest.fixture(scope="session")
def small_records():
    spec = SyntheticSpec(image_size=64, n_pathologies=2, noise_sigma=0.08,
                         prevalence=0.5, seed=7)
    return generate_synthetic_dataset(spec, 400)


@pytest.fixture(scope="session")
def small_setup(small_records):
    """Pretrained + weakened classifier with baseline artifacts on 240 eval images."""
    train_records, eval_records = split_dataset(small_records, (0.4, 0.6), seed=7)
    classifier = pretrain_classifier(train_records, epochs=8, seed=7)
    weaken_classifier(classifier, train_records, quantile=0.8)
    baseline = run_baseline(classifier, eval_records, threshold=0.5)
    return {
        "train_records": train_records,
        "eval_records": eval_records,
        "by_id": {r.image_id: r for r in eval_records},
        "classifier": classifier,
        "baseline": baseline,
    }
