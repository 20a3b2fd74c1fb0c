"""CleanNet label-noise detection and sample reweighting on precomputed features."""

from .autograd import Graph, Tensor, backward, grad_check, sgd_step
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import (
    Classifier,
    ClassifierConfig,
    alternating_train,
    train_classifier,
    weight_hard,
    weight_soft,
    weighted_nll,
)
from .data import (
    Hyperparams,
    NoisyDataset,
    ReferenceSet,
    load_dataset,
    load_features,
    load_labels,
    save_features,
    save_labels,
    split_dataset,
)
from .detection import (
    DetectionReport,
    average_error_rate,
    baseline_average,
    baseline_classification_filtering,
    baseline_naive,
    detect,
    select_threshold,
)
from .model import CleanNet, loss_total, train_cleannet
from .references import build_reference_sets, kmeans, kmeans_select, random_select
from .synthetic import SyntheticSpec, generate_dataset, make_transfer_split

__version__ = "0.1.0"
