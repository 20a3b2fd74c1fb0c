"""End-to-end synthetic experiments: detection (with transfer) and weighted classification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .classifier import ClassifierConfig, train_classifier, weight_hard, weight_soft
from .data import Hyperparams, NoisyDataset, split_indices
from .detection import (
    average_baseline_scores,
    average_error_rate,
    baseline_classification_filtering,
    detect,
    select_threshold,
)
from .model import train_cleannet
from .references import build_reference_sets
from .synthetic import AuditedLabels, SyntheticSpec, generate_dataset

DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)


def bench_hyperparams(**overrides) -> Hyperparams:
    """CleanNet settings used by the desk-scale benchmarks (K=10 reference vectors)."""
    return replace(Hyperparams(K=10, epochs=15, batch_size=64), **overrides)


@dataclass
class ExperimentReport:
    detection: dict[str, dict[str, float]] = field(default_factory=dict)
    accuracies: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def rows(self):
        for method in self.detection:
            for subset, value in self.detection[method].items():
                yield ("detection_error", method, subset, value)
        for mode, value in self.accuracies.items():
            yield ("test_accuracy", mode, "all", value)
        for key, value in self.extras.items():
            yield ("extra", key, "", value)
        for key, value in sorted(self.config.items()):
            yield ("config", key, "", value)

    def to_tsv(self) -> str:
        lines = ["section\tname\tsubset\tvalue"]
        for section, name, subset, value in self.rows():
            text = repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)
            lines.append(f"{section}\t{name}\t{subset}\t{text}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        out = []
        if self.detection:
            subsets = sorted({s for m in self.detection.values() for s in m})
            out.append("average detection error (%)")
            out.append(f"  {'method':<26}" + "".join(f"{s:>18}" for s in subsets))
            for method, vals in self.detection.items():
                cells = "".join(
                    f"{100 * vals[s]:>18.2f}" if s in vals and not math.isnan(vals[s]) else f"{'-':>18}"
                    for s in subsets)
                out.append(f"  {method:<26}{cells}")
        if self.accuracies:
            out.append("clean test accuracy (%)")
            for mode, acc in self.accuracies.items():
                out.append(f"  {mode:<26}{100 * acc:>8.2f}")
        return "\n".join(out)


@dataclass
class _Setup:
    spec: SyntheticSpec
    hp: Hyperparams
    train: NoisyDataset
    val: NoisyDataset
    test: NoisyDataset
    truth: AuditedLabels
    parts: list


def _prepare(spec: SyntheticSpec, hp: Hyperparams, fractions) -> _Setup:
    ds, true = generate_dataset(spec)
    if hp.l2_normalize:
        ds = ds.l2_normalized()
    parts = split_indices(len(ds), fractions, spec.seed)
    train, val, test = (ds.subset(p) for p in parts)
    return _Setup(spec, hp, train, val, test, AuditedLabels(true), parts)


def _errors(scores, delta, ds: NoisyDataset, relevance, held_out) -> dict[str, float]:
    dec = detect(scores, delta)
    in_held = np.isin(ds.noisy_labels, list(held_out))
    out = {}
    for name, mask in (("overall", np.ones(len(ds), bool)), ("verified_classes", ~in_held),
                       ("held_out", in_held)):
        if mask.any():
            _, err, _ = average_error_rate(dec[mask], relevance[mask], ds.noisy_labels[mask])
        else:
            err = math.nan
        out[name] = err
    return out


def run_detection_experiment(spec: SyntheticSpec, hp: Hyperparams | None = None,
                             clf_config: ClassifierConfig | None = None,
                             fractions=DEFAULT_FRACTIONS, ref_method: str = "kmeans") -> ExperimentReport:
    """Generate, select references, train CleanNet and baselines, then score the test split.

    Thresholds and top-K are chosen on the verified validation samples.
    Errors on the test split are measured against ground truth for every
    sample, so held-out classes are scored on labels training never saw.
    """
    hp = hp or bench_hyperparams(seed=spec.seed)
    clf_config = clf_config or ClassifierConfig(seed=spec.seed)
    s = _prepare(spec, hp, fractions)
    refs = build_reference_sets(s.train, hp.K, ref_method, seed=hp.seed)
    cleannet, cn_log = train_cleannet(s.train, refs, hp)
    clf, _ = train_classifier(s.train, None, clf_config)
    reads_during_training = s.truth.reads

    val, test = s.val, s.test
    emb = cleannet.class_embeddings(refs)
    val_scores = cleannet.score(val.features, val.noisy_labels, refs, emb)
    delta = select_threshold(val_scores, val.verification_labels, val.noisy_labels, default=hp.rho)
    avg_val = average_baseline_scores(val.features, val.noisy_labels, refs)
    avg_delta = select_threshold(avg_val, val.verification_labels, val.noisy_labels, default=hp.rho)
    filt = baseline_classification_filtering(clf, test, val=val)

    relevance = (test.noisy_labels == s.truth.read()[s.parts[2]]).astype(np.int64)
    held = spec.held_out_classes
    report = ExperimentReport(config={**{f"spec.{k}": v for k, v in spec.to_dict().items()},
                                      **{f"hp.{k}": v for k, v in hp.to_dict().items()}})
    report.detection["cleannet"] = _errors(cleannet.score(test.features, test.noisy_labels, refs, emb),
                                           delta, test, relevance, held)
    report.detection["classification_filtering"] = _errors(filt.scores, filt.delta, test, relevance, held)
    report.detection["average_baseline"] = _errors(
        average_baseline_scores(test.features, test.noisy_labels, refs), avg_delta, test, relevance, held)
    report.detection["naive"] = _errors(np.ones(len(test)), -1.0, test, relevance, held)
    report.extras.update({"delta": delta, "average_baseline_delta": avg_delta,
                          "top_k": int(1 - filt.delta), "cleannet_final_loss": cn_log[-1]["loss"]
                          if cn_log else math.nan,
                          "truth_reads_during_training": reads_during_training})
    return report


def run_classification_experiment(spec: SyntheticSpec, hp: Hyperparams | None = None,
                                  clf_config: ClassifierConfig | None = None,
                                  fractions=DEFAULT_FRACTIONS, ref_method: str = "kmeans") -> ExperimentReport:
    """Unweighted vs hard- vs soft-weighted classifiers, scored on the clean test split."""
    hp = hp or bench_hyperparams(seed=spec.seed)
    clf_config = clf_config or ClassifierConfig(seed=spec.seed)
    s = _prepare(spec, hp, fractions)
    refs = build_reference_sets(s.train, hp.K, ref_method, seed=hp.seed)
    cleannet, _ = train_cleannet(s.train, refs, hp)
    emb = cleannet.class_embeddings(refs)
    val_scores = cleannet.score(s.val.features, s.val.noisy_labels, refs, emb)
    delta = select_threshold(val_scores, s.val.verification_labels, s.val.noisy_labels, default=hp.rho)
    weights = {
        "unweighted": None,
        "hard": weight_hard(s.train.features, s.train.noisy_labels, cleannet, refs, delta, emb),
        "soft": weight_soft(s.train.features, s.train.noisy_labels, cleannet, refs, emb),
    }
    models = {mode: train_classifier(s.train, w, clf_config)[0] for mode, w in weights.items()}
    reads_during_training = s.truth.reads
    test_truth = s.truth.read()[s.parts[2]]
    report = ExperimentReport(config={**{f"spec.{k}": v for k, v in spec.to_dict().items()},
                                      **{f"hp.{k}": v for k, v in hp.to_dict().items()}})
    for mode, clf in models.items():
        report.accuracies[mode] = clf.accuracy(s.test.features, test_truth)
    report.extras.update({"delta": delta,
                          "hard_kept_fraction": float(weights["hard"].mean()),
                          "soft_mean_weight": float(weights["soft"].mean()),
                          "truth_reads_during_training": reads_during_training})
    return report
