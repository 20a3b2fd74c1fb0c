"""Label-noise detection by thresholding cosine scores, its evaluation, and baselines."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .data import NoisyDataset, ReferenceSet
from .errors import DegenerateInputError, FormatError, UnknownClassError, ValidationError

THRESHOLD_GRID = np.round(np.arange(-100, 101) / 100.0, 2)


def detect(score, delta: float):
    """1 where ``score >= delta`` (relevant), else 0 (mislabeled)."""
    out = (np.asarray(score) >= delta).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def score_query(v, class_id: int, model, refs: Mapping[int, ReferenceSet]) -> float:
    if int(class_id) not in refs:
        raise UnknownClassError(f"no reference set for class {class_id}")
    return float(model.score(np.atleast_2d(v), [class_id], {int(class_id): refs[int(class_id)]})[0])


def score_dataset(model, ds: NoisyDataset, refs: Mapping[int, ReferenceSet]) -> np.ndarray:
    return model.score(ds.features, ds.noisy_labels, refs)


def average_error_rate(decisions, verification_labels, class_ids):
    """Per-class error on verified samples and their unweighted mean.

    Returns ``(per_class, average, excluded)``; classes with no verified
    sample are excluded from the mean and listed in ``excluded``.
    """
    dec = np.asarray(decisions)
    lab = np.asarray(verification_labels)
    cls = np.asarray(class_ids)
    per_class, excluded = {}, []
    for c in np.unique(cls):
        mask = (cls == c) & (lab >= 0)
        if not mask.any():
            excluded.append(int(c))
            continue
        per_class[int(c)] = float((dec[mask] != lab[mask]).mean())
    average = float(np.mean(list(per_class.values()))) if per_class else math.nan
    return per_class, average, excluded


def _grid_errors(scores, labels, class_ids, grid):
    """Average error rate for every threshold in ``grid`` (vectorised over the grid)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    keep = labels >= 0
    scores, labels, class_ids = scores[keep], labels[keep], np.asarray(class_ids)[keep]
    _, cls_idx = np.unique(class_ids, return_inverse=True)
    n_cls = int(cls_idx.max()) + 1
    counts = np.bincount(cls_idx, minlength=n_cls).astype(np.float64)
    wrong = (scores[None, :] >= grid[:, None]).astype(np.int64) != labels[None, :]
    per_class = np.zeros((grid.size, n_cls))
    for k in range(n_cls):
        per_class[:, k] = wrong[:, cls_idx == k].sum(axis=1)
    return (per_class / counts).mean(axis=1)


def select_threshold(scores, verification_labels, class_ids=None, default: float = 0.1,
                     grid=THRESHOLD_GRID) -> float:
    """Uniform threshold minimising average error rate over ``grid``; ties go to the smallest.

    Needs both verification outcomes among the samples; otherwise warns and
    returns ``default``.
    """
    labels = np.asarray(verification_labels)
    if class_ids is None:
        class_ids = np.zeros(labels.shape, dtype=np.int64)
    verified = labels[labels >= 0]
    if not (np.any(verified == 0) and np.any(verified == 1)):
        warnings.warn("threshold selection needs both relevant and mislabeled samples; "
                      f"using default {default}", RuntimeWarning, stacklevel=2)
        return float(default)
    grid = np.asarray(grid, dtype=np.float64)
    errors = _grid_errors(scores, labels, class_ids, grid)
    return float(grid[int(np.argmin(errors))])


def select_class_thresholds(scores, verification_labels, class_ids, default: float = 0.1,
                            grid=THRESHOLD_GRID) -> dict[int, float]:
    """Per-class variant of :func:`select_threshold`, kept for ablations."""
    scores, labels, cls = (np.asarray(a) for a in (scores, verification_labels, class_ids))
    out = {}
    for c in np.unique(cls):
        m = cls == c
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out[int(c)] = select_threshold(scores[m], labels[m], None, default, grid)
    return out


@dataclass
class DetectionReport:
    scores: np.ndarray
    decisions: np.ndarray
    class_ids: np.ndarray
    verification_labels: np.ndarray
    delta: float
    per_class_error: dict[int, float] = field(default_factory=dict)
    average_error: float = math.nan
    excluded_classes: list[int] = field(default_factory=list)
    sample_index: np.ndarray | None = None
    method: str = "cleannet"

    def __post_init__(self):
        if self.sample_index is None:
            self.sample_index = np.arange(len(self.scores))

    def is_consistent(self) -> bool:
        return bool(np.array_equal(detect(self.scores, self.delta), self.decisions))

    def to_tsv(self) -> str:
        lines = ["sample_index\tclass\tscore\tdecision\tverification_label"]
        for i, c, s, d, l in zip(self.sample_index, self.class_ids, self.scores, self.decisions,
                                 self.verification_labels):
            lines.append(f"{int(i)}\t{int(c)}\t{float(s)!r}\t{int(d)}\t{int(l)}")
        lines.append(f"# method\t{self.method}")
        lines.append(f"# delta\t{float(self.delta)!r}")
        lines.append(f"# average_error\t{float(self.average_error)!r}")
        for c in sorted(self.per_class_error):
            lines.append(f"# class_error\t{c}\t{self.per_class_error[c]!r}")
        lines.append("# excluded_classes\t" + ",".join(str(c) for c in self.excluded_classes))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def make_report(scores, class_ids, verification_labels, delta: float, method="cleannet",
                sample_index=None) -> DetectionReport:
    scores = np.asarray(scores, dtype=np.float64)
    decisions = detect(scores, delta)
    decisions = np.atleast_1d(decisions)
    per_class, avg, excluded = average_error_rate(decisions, verification_labels, class_ids)
    return DetectionReport(scores, decisions, np.asarray(class_ids), np.asarray(verification_labels),
                           float(delta), per_class, avg, excluded, sample_index, method)


def read_report(path) -> DetectionReport:
    idx, cls, scores, dec, lab = [], [], [], [], []
    meta = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line or line.startswith("sample_index"):
            continue
        parts = line.split("\t")
        if line.startswith("# "):
            meta[parts[0][2:]] = parts[1:]
            continue
        if len(parts) != 5:
            raise FormatError(f"{path}: expected 5 fields", offset=lineno)
        try:
            idx.append(int(parts[0]))
            cls.append(int(parts[1]))
            scores.append(float(parts[2]))
            dec.append(int(parts[3]))
            lab.append(int(parts[4]))
        except ValueError:
            raise FormatError(f"{path}: malformed record", offset=lineno) from None
    if "delta" not in meta:
        raise FormatError(f"{path}: missing summary block")
    report = make_report(np.array(scores), np.array(cls, dtype=np.int64), np.array(lab, dtype=np.int64),
                         float(meta["delta"][0]), method=meta.get("method", ["cleannet"])[0],
                         sample_index=np.array(idx, dtype=np.int64))
    if not np.array_equal(report.decisions, np.array(dec, dtype=np.int64)):
        raise FormatError(f"{path}: stored decisions disagree with scores and delta")
    return report


def detection_report(model, ds: NoisyDataset, refs, delta: float, labels=None) -> DetectionReport:
    """CleanNet report on ``ds``; ``labels`` overrides the verification labels used for scoring errors."""
    scores = score_dataset(model, ds, refs)
    lab = ds.verification_labels if labels is None else labels
    return make_report(scores, ds.noisy_labels, lab, delta)


# ----------------------------------------------------------------- baselines


def baseline_naive(ds: NoisyDataset, labels=None) -> DetectionReport:
    """Every label is treated as correct."""
    lab = ds.verification_labels if labels is None else labels
    return make_report(np.ones(len(ds)), ds.noisy_labels, lab, -1.0, method="naive")


def average_baseline_scores(features, class_ids, refs: Mapping[int, ReferenceSet]) -> np.ndarray:
    """Cosine between each raw feature and the mean of its class's reference vectors."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    class_ids = np.asarray(class_ids)
    means = {}
    for c in np.unique(class_ids):
        if int(c) not in refs:
            raise UnknownClassError(f"no reference set for class {int(c)}")
        mu = refs[int(c)].vectors.mean(axis=0)
        if not np.linalg.norm(mu) > 0:
            raise DegenerateInputError(f"class {int(c)} reference mean is the zero vector")
        means[int(c)] = mu
    if features.shape[0] == 0:
        return np.zeros(0)
    return ag.cosine(features, np.stack([means[int(c)] for c in class_ids])).data


def baseline_average(ds: NoisyDataset, refs, delta: float, labels=None) -> DetectionReport:
    lab = ds.verification_labels if labels is None else labels
    scores = average_baseline_scores(ds.features, ds.noisy_labels, refs)
    return make_report(scores, ds.noisy_labels, lab, delta, method="average")


def label_ranks(probs, class_ids) -> np.ndarray:
    """0-based rank of each sample's (1-based) noisy class among the classifier's predictions."""
    probs = np.asarray(probs)
    own = probs[np.arange(probs.shape[0]), np.asarray(class_ids) - 1]
    # ties count in the label's favour
    return (probs > own[:, None]).sum(axis=1)


def select_top_k(ranks, verification_labels, class_ids, L: int) -> int:
    best_k, best_err = L, math.inf
    for k in range(1, L + 1):
        dec = (np.asarray(ranks) < k).astype(np.int64)
        _, err, _ = average_error_rate(dec, verification_labels, class_ids)
        if err < best_err:
            best_k, best_err = k, err
    return best_k


def baseline_classification_filtering(classifier, ds: NoisyDataset, K: int | None = None,
                                      val: NoisyDataset | None = None, labels=None) -> DetectionReport:
    """Relevant iff the noisy class is among the classifier's top-K predictions.

    With ``K=None`` it is chosen on ``val`` by average error rate.  Scores
    are negated ranks and ``delta = 1 - K``, so the usual thresholding applies.
    """
    L = ds.class_count
    if K is None:
        if val is None:
            raise ValidationError("classification filtering needs K or a validation set")
        K = select_top_k(label_ranks(classifier.predict_proba(val.features), val.noisy_labels),
                         val.verification_labels, val.noisy_labels, L)
    if K > L:
        warnings.warn(f"top-K of {K} exceeds {L} classes; clamping", RuntimeWarning, stacklevel=2)
        K = L
    if K < 1:
        raise ValidationError("K must be >= 1")
    ranks = label_ranks(classifier.predict_proba(ds.features), ds.noisy_labels)
    lab = ds.verification_labels if labels is None else labels
    report = make_report(-ranks.astype(np.float64), ds.noisy_labels, lab, float(1 - K),
                         method="classification_filtering")
    return report
