"""
Detecting mislabeled samples with CleanNet
==========================================

A synthetic dataset with 25% planted label noise, a CleanNet trained on the
30% of samples that carry a human verification label, and a comparison with
the simpler detectors.
"""

import warnings

import numpy as np

from cleannet.bench import bench_hyperparams
from cleannet.classifier import ClassifierConfig, train_classifier
from cleannet.data import split_dataset, split_indices
from cleannet.detection import (
    average_baseline_scores,
    average_error_rate,
    baseline_classification_filtering,
    detect,
    select_threshold,
)
from cleannet.model import train_cleannet
from cleannet.references import build_reference_sets
from cleannet.synthetic import SyntheticSpec, generate_dataset

warnings.simplefilter("ignore", RuntimeWarning)

# 20 Gaussian classes in 32 dims; `true` is kept aside and only used for scoring
ds, true = generate_dataset(SyntheticSpec(seed=0))
train, val, test = split_dataset(ds, (0.6, 0.2, 0.2), seed=0)
print(f"{len(ds)} samples, {np.mean(ds.noisy_labels != true):.1%} mislabeled")

# each class is summarised by K k-means centroids of its noisy samples
hp = bench_hyperparams(seed=0)
refs = build_reference_sets(train, hp.K, "kmeans", seed=0)

# train the joint embedding; the log has one row per epoch
model, log = train_cleannet(train, refs, hp)
print(f"loss {log[0]['loss']:.3f} -> {log[-1]['loss']:.3f} over {len(log)} epochs")

# a sample is kept when cos(query, class) >= delta, with delta picked on validation
emb = model.class_embeddings(refs)
delta = select_threshold(model.score(val.features, val.noisy_labels, refs, emb),
                         val.verification_labels, val.noisy_labels, default=hp.rho)

# score the test split against ground truth, including its unverified samples
test_idx = split_indices(len(ds), (0.6, 0.2, 0.2), 0)[2]
relevant = (test.noisy_labels == true[test_idx]).astype(int)


def error(scores, d):
    return average_error_rate(detect(scores, d), relevant, test.noisy_labels)[1]


scores = model.score(test.features, test.noisy_labels, refs, emb)
print(f"delta {delta:.2f}, CleanNet error {error(scores, delta):.2%}")

# naive: every label is trusted
print(f"naive error {error(np.ones(len(test)), -1.0):.2%}")

# average baseline: cosine to the mean reference vector, no learning
avg_val = average_baseline_scores(val.features, val.noisy_labels, refs)
avg_delta = select_threshold(avg_val, val.verification_labels, val.noisy_labels)
print(f"average baseline error {error(average_baseline_scores(test.features, test.noisy_labels, refs), avg_delta):.2%}")

# classification filtering: keep a sample if its label is in the classifier's top-K
clf, _ = train_classifier(train, None, ClassifierConfig(seed=0))
filt = baseline_classification_filtering(clf, test, val=val)
print(f"classification filtering (top-{int(1 - filt.delta)}) error {error(filt.scores, filt.delta):.2%}")
