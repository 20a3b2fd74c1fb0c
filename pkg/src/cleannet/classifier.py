"""Softmax classifier over features, CleanNet sample weights, and alternating training."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Graph
from .checkpoint import Checkpoint
from .data import Hyperparams, NoisyDataset, ReferenceSet
from .detection import average_error_rate, detect, select_threshold
from .errors import ConfigurationError, FormatError, TrainingDivergenceError
from .model import CleanNet, train_cleannet
from .references import build_reference_sets

log = logging.getLogger(__name__)

LOG_FLOOR = math.log(1e-12)


@dataclass
class ClassifierConfig:
    hidden: int | None = None
    lr: float = 0.03
    momentum: float = 0.9
    epochs: int = 30
    finetune_epochs: int | None = None
    batch_size: int = 64
    seed: int = 0


def classifier_logits(x, p):
    if "W2" in p:
        x = ag.tanh_act(ag.affine(x, p["W1"], p["b1"]))
        return ag.affine(x, p["W2"], p["b2"])
    return ag.affine(x, p["W1"], p["b1"])


class Classifier:
    def __init__(self, params: Mapping[str, np.ndarray], config: ClassifierConfig | None = None,
                 provenance=None):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.config = config or ClassifierConfig()
        self.provenance = dict(provenance or {})

    @classmethod
    def init(cls, d: int, L: int, config: ClassifierConfig | None = None) -> "Classifier":
        config = config or ClassifierConfig()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        if config.hidden:
            params = {"W1": ag.glorot_uniform(rng, d, config.hidden), "b1": np.zeros(config.hidden),
                      "W2": ag.glorot_uniform(rng, config.hidden, L), "b2": np.zeros(L)}
        else:
            params = {"W1": ag.glorot_uniform(rng, d, L), "b1": np.zeros(L)}
        return cls(params, config, {"seed": config.seed, "epoch": 0})

    @property
    def class_count(self) -> int:
        return self.params["b2" if "b2" in self.params else "b1"].shape[0]

    def copy(self) -> "Classifier":
        return Classifier({k: v.copy() for k, v in self.params.items()}, self.config, self.provenance)

    def predict_proba(self, features) -> np.ndarray:
        """Class probabilities; column ``c - 1`` holds class ``c``."""
        return ag.softmax(classifier_logits(np.atleast_2d(features), self.params)).data

    def predict(self, features) -> np.ndarray:
        return self.predict_proba(features).argmax(axis=1) + 1

    def accuracy(self, features, labels) -> float:
        labels = np.asarray(labels)
        if labels.size == 0:
            return math.nan
        return float((self.predict(features) == labels).mean())

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint("classifier", tensors=dict(self.params), hyperparams=asdict(self.config),
                          provenance=dict(self.provenance))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Classifier":
        if ckpt.kind != "classifier":
            raise FormatError(f"expected a classifier checkpoint, got {ckpt.kind!r}")
        return cls(ckpt.tensors, ClassifierConfig(**ckpt.hyperparams), ckpt.provenance)


def classifier_forward(v, params) -> np.ndarray:
    return ag.softmax(classifier_logits(np.atleast_2d(v), params)).data


def weighted_nll(features, labels, weights, p):
    """Batch mean of ``w_i * -log p(y_i | x_i)`` with 1-based labels.

    Log-probabilities below ``log(1e-12)`` are clamped (zero gradient there)
    and a warning is emitted.
    """
    logp = ag.pick(ag.log_softmax(classifier_logits(features, p)), np.asarray(labels) - 1)
    if np.any(logp.data < LOG_FLOOR):
        warnings.warn("predicted probability of the labelled class fell below 1e-12; clamped",
                      RuntimeWarning, stacklevel=2)
        logp = ag.add(ag.relu(ag.sub(logp, LOG_FLOOR)), LOG_FLOOR)
    return ag.mean(ag.mul(np.asarray(weights, dtype=np.float64), ag.mul(-1.0, logp)))


def train_classifier(ds: NoisyDataset, weights=None, config: ClassifierConfig | None = None,
                     init: Classifier | None = None, epochs: int | None = None, eval_set=None):
    """SGD on the weighted NLL of the noisy labels.  Returns ``(classifier, per-epoch log)``.

    ``weights=None`` means all ones.  ``eval_set=(features, true_labels)``
    adds a clean accuracy column to the log.
    """
    config = config or ClassifierConfig()
    if len(ds) == 0:
        raise ConfigurationError("cannot train a classifier on an empty dataset")
    w = np.ones(len(ds)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(ds),):
        raise ConfigurationError("need one weight per training sample")
    clf = init.copy() if init is not None else Classifier.init(ds.dim, ds.class_count, config)
    params = dict(clf.params)
    opt = ag.SGD(config.lr, config.momentum)
    start = int(clf.provenance.get("epoch", 0))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, start]))
    n_epochs = config.epochs if epochs is None else epochs
    history = []
    for epoch in range(1, n_epochs + 1):
        order = rng.permutation(len(ds))
        total = 0.0
        for s in range(0, len(ds), config.batch_size):
            idx = order[s:s + config.batch_size]
            g = Graph()
            try:
                loss = weighted_nll(ds.features[idx], ds.noisy_labels[idx], w[idx], g.params_from(params))
                params = opt.step(params, ag.backward(g, loss))
            except FloatingPointError as exc:
                raise TrainingDivergenceError(f"classifier training diverged: {exc}",
                                              epoch=start + epoch) from exc
            total += float(loss.data) * idx.size
        clf.params = params
        row = {"epoch": start + epoch, "loss": total / len(ds),
               "train_accuracy": clf.accuracy(ds.features, ds.noisy_labels)}
        if eval_set is not None:
            row["test_accuracy"] = clf.accuracy(*eval_set)
        history.append(row)
    clf.params = params
    clf.provenance["epoch"] = start + n_epochs
    return clf, history


# ------------------------------------------------------------------- weights


def weight_soft(features, class_ids, cleannet: CleanNet, refs: Mapping[int, ReferenceSet],
                embeddings=None) -> np.ndarray:
    """``max(0, cos(phi_q, phi_c^s))`` per sample."""
    return np.maximum(0.0, cleannet.score(features, class_ids, refs, embeddings))


def weight_hard(features, class_ids, cleannet: CleanNet, refs: Mapping[int, ReferenceSet], delta: float,
                embeddings=None) -> np.ndarray:
    """1 where ``cos(phi_q, phi_c^s) >= delta``, else 0."""
    return (cleannet.score(features, class_ids, refs, embeddings) >= delta).astype(np.float64)


def sample_weights(mode: str, features, class_ids, cleannet, refs, delta: float | None = None):
    if mode == "soft":
        return weight_soft(features, class_ids, cleannet, refs)
    if mode == "hard":
        if delta is None:
            raise ConfigurationError("hard weighting needs a threshold")
        return weight_hard(features, class_ids, cleannet, refs, delta)
    if mode == "none":
        return np.ones(np.atleast_2d(features).shape[0])
    raise ConfigurationError(f"unknown weighting mode {mode!r}")


# ------------------------------------------------------------- alternating loop


@dataclass
class AlternatingResult:
    classifier: Classifier
    cleannet: CleanNet
    refs: dict
    delta: float
    rounds: list[dict] = field(default_factory=list)
    best_round: int = 1


def _val_accuracy(clf, val: NoisyDataset, val_labels):
    if val_labels is not None:
        return clf.accuracy(val.features, val_labels)
    # verified-relevant samples carry known-correct labels
    m = val.verification_labels == 1
    return clf.accuracy(val.features[m], val.noisy_labels[m])


def alternating_train(train: NoisyDataset, val: NoisyDataset, hp: Hyperparams,
                      config: ClassifierConfig | None = None, mode: str = "soft", patience: int = 1,
                      max_rounds: int = 5, warm_start: bool = True, ref_method: str = "kmeans",
                      val_labels=None) -> AlternatingResult:
    """Classifier -> CleanNet -> weighted fine-tuning, repeated until validation accuracy stalls.

    Round 1 trains the classifier with unit weights; later rounds start from
    the previous round's fine-tuned classifier.  Reference sets are rebuilt
    every round.  Stops once ``patience`` consecutive rounds fail to improve
    (``patience=0`` runs a single round) and returns the best round.
    """
    config = config or ClassifierConfig()
    if not np.any(train.verification_labels >= 0):
        raise ConfigurationError("alternating training needs verification labels for at least one class")
    clf, cleannet = None, None
    best, since_best, rounds = None, 0, []
    for r in range(1, max_rounds + 1):
        if clf is None:
            clf, _ = train_classifier(train, None, config)
        step1_acc = _val_accuracy(clf, val, val_labels)
        refs = build_reference_sets(train, hp.K, ref_method, seed=hp.seed + r)
        round_hp = replace(hp, seed=hp.seed + r)
        cleannet, _ = train_cleannet(train, refs, round_hp, init=cleannet if warm_start else None)
        val_scores = cleannet.score(val.features, val.noisy_labels, refs)
        delta = select_threshold(val_scores, val.verification_labels, val.noisy_labels, default=hp.rho)
        _, det_err, _ = average_error_rate(detect(val_scores, delta), val.verification_labels,
                                           val.noisy_labels)
        w = sample_weights(mode, train.features, train.noisy_labels, cleannet, refs, delta)
        clf, _ = train_classifier(train, w, config, init=clf, epochs=config.finetune_epochs)
        acc = _val_accuracy(clf, val, val_labels)
        rounds.append({"round": r, "step1_accuracy": step1_acc, "detection_error": det_err,
                       "delta": delta, "accuracy": acc})
        log.info("round %d: detection error %.4f, accuracy %.4f", r, det_err, acc)
        if best is None or acc > rounds[best.best_round - 1]["accuracy"]:
            best = AlternatingResult(clf.copy(), cleannet.copy(), refs, delta, best_round=r)
            since_best = 0
        else:
            since_best += 1
        if since_best >= patience:
            break
    best.rounds = rounds
    return best
