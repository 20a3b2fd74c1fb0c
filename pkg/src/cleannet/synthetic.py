"""Gaussian-cluster feature datasets with planted symmetric label noise."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import NoisyDataset
from .errors import ConfigurationError, ValidationError


@dataclass
class SyntheticSpec:
    """Generator settings.  ``separation`` is mean inter-centroid distance over within-class std."""

    classes: int = 20
    dim: int = 32
    per_class: int = 200
    noise_rate: float = 0.25
    separation: float = 8.0
    std: float = 2.0
    centroid_rank: int | None = 8  # upper bound; None or >= dim means full rank
    verified_fraction: float = 0.3
    held_out_classes: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        self.held_out_classes = tuple(sorted(int(c) for c in self.held_out_classes))
        self.validate()

    def validate(self):
        if self.classes < 2 or self.dim < 1 or self.per_class < 1:
            raise ValidationError("need at least two classes, one dimension and one sample per class")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValidationError("noise_rate must lie in [0, 1)")
        if self.separation < 0 or not self.std > 0:
            raise ValidationError("separation must be >= 0 and std > 0")
        if not 0.0 <= self.verified_fraction <= 1.0:
            raise ValidationError("verified_fraction must lie in [0, 1]")
        if self.centroid_rank is not None and self.centroid_rank < 1:
            raise ValidationError("centroid_rank must be >= 1")
        if any(not 1 <= c <= self.classes for c in self.held_out_classes):
            raise ValidationError("held-out classes must lie in [1, classes]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["held_out_classes"] = list(self.held_out_classes)
        return d


def _centroids(spec: SyntheticSpec, rng) -> np.ndarray:
    rank = min(spec.centroid_rank or spec.dim, spec.dim)
    C = rng.standard_normal((spec.classes, rank))
    if rank < spec.dim:
        basis, _ = np.linalg.qr(rng.standard_normal((spec.dim, rank)))
        C = C @ basis.T
    diff = C[:, None, :] - C[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    mean_dist = dist[np.triu_indices(spec.classes, 1)].mean()
    return C * (spec.separation * spec.std / mean_dist)


def verification_from_truth(noisy, true, verified_mask):
    return np.where(verified_mask, (noisy == true).astype(np.int64), -1)


def generate_dataset(spec: SyntheticSpec):
    """Return ``(dataset, true_labels)``; deterministic in ``spec``.

    Each sample is mislabeled with probability ``noise_rate``, its noisy label
    drawn uniformly from the other classes.  Within each noisy class a
    ``verified_fraction`` of samples gets a verification label from the
    ground truth; held-out classes get none.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 10]))
    C = _centroids(spec, rng)
    n = spec.classes * spec.per_class
    true = np.repeat(np.arange(1, spec.classes + 1), spec.per_class)
    X = C[true - 1] + spec.std * rng.standard_normal((n, spec.dim))
    flip = rng.random(n) < spec.noise_rate
    shift = rng.integers(1, spec.classes, size=n)
    noisy = np.where(flip, (true - 1 + shift) % spec.classes + 1, true)
    verified = np.zeros(n, dtype=bool)
    for c in range(1, spec.classes + 1):
        if c in spec.held_out_classes:
            continue
        members = np.flatnonzero(noisy == c)
        k = int(round(spec.verified_fraction * members.size))
        verified[rng.choice(members, size=k, replace=False)] = True
    perm = rng.permutation(n)
    ds = NoisyDataset(X[perm], noisy[perm], verification_from_truth(noisy, true, verified)[perm],
                      spec.classes)
    return ds, true[perm]


def choose_held_out(class_count: int, n_holdout: int, seed: int = 0) -> list[int]:
    """Sorted ids of ``n_holdout`` classes drawn at random from ``1..class_count``."""
    if not 0 <= n_holdout < class_count:
        raise ConfigurationError(f"n_holdout must lie in [0, {class_count})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    return sorted(int(c) for c in rng.choice(np.arange(1, class_count + 1), size=n_holdout,
                                             replace=False))


def make_transfer_split(ds: NoisyDataset, n_holdout: int, seed: int = 0):
    """Copy of ``ds`` with verification labels hidden for ``n_holdout`` random classes.

    Returns ``(masked_dataset, sorted held-out class ids)``.
    """
    held = choose_held_out(ds.class_count, n_holdout, seed)
    lab = np.where(np.isin(ds.noisy_labels, held), -1, ds.verification_labels)
    return ds.with_verification(lab), held


class AuditedLabels:
    """Read-counting wrapper for ground truth that training code must not see."""

    def __init__(self, values):
        self._values = np.asarray(values)
        self._values.setflags(write=False)
        self.reads = 0

    def read(self) -> np.ndarray:
        self.reads += 1
        return self._values

    def __len__(self):
        return self._values.shape[0]
