"""Triplet-based repair of a multi-label chest-radiograph classifier.

The workflow: run baseline inference, partition every (image, pathology)
pair into confusion cells, build image triplets anchored on failures, retrain
a 128-d embedding head with a margin ranking loss, reclassify the held-out
failures by prototype distance, and compare PPV/NPV before and after with a
paired t-test. A small HTTP service exposes the failure queue for reviewer
relabeling and serialized retraining jobs.
"""

from .data import (
    N_PATHOLOGIES,
    PATHOLOGIES,
    ImageRecord,
    PreprocessConfig,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_manifest,
    pathology_index,
    pathology_name,
    preprocess_array,
    preprocess_image,
    split_dataset,
)
from .evaluation import (
    ConfusionPartition,
    InferenceRecord,
    MetricsReport,
    build_report,
    compute_npv,
    compute_ppv,
    partition_confusion,
    render_report_table,
    run_inference,
)
from .models import (
    ClassifierHead,
    ClassifierModel,
    ConvBackbone,
    EmbeddingHead,
    EmbeddingModel,
    build_classifier,
    classify_image,
    embed_image,
    load_checkpoint,
    new_classifier,
    save_checkpoint,
    swap_embedding_head,
)
from .stats import TTestResult, compare_reports, paired_t_test
from .training import (
    PrototypeSet,
    TrainConfig,
    TrainedEmbeddingModel,
    classify_by_prototype,
    compute_prototypes,
    euclidean_distance,
    margin_ranking_loss,
    reclassify_failures,
    train_incremental,
    train_tfsl,
    triplet_margin_loss,
)
from .triplets import (
    ImageTriplet,
    TripletDatasetConfig,
    UnsatisfiableTripletError,
    build_training_triplets,
    build_validation_triplets,
    checking_label_for,
)

__version__ = "0.1.0"
