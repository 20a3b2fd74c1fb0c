"""Dataset records, hyperparameters, and the feature / label file formats.

Feature files are binary::

    b"FEAT" | uint32 version | uint64 n | uint32 d | n*d float32, row-major

all little-endian.  Label files are UTF-8 TSV with one
``sample_index<TAB>noisy_class<TAB>verification_label`` record per sample;
sample indices are 0-based, classes 1-based, verification labels in
{-1, 0, 1}.  An optional header line starting with ``sample_index`` is skipped.
"""

from __future__ import annotations

import dataclasses
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, FormatError, ValidationError

FEATURE_MAGIC = b"FEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


@dataclass(frozen=True)
class NoisyDataset:
    features: np.ndarray
    noisy_labels: np.ndarray
    verification_labels: np.ndarray
    class_count: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {feats.shape}")
        y = np.asarray(self.noisy_labels, dtype=np.int64)
        l = np.asarray(self.verification_labels, dtype=np.int64)
        n = feats.shape[0]
        if y.shape != (n,) or l.shape != (n,):
            raise ValidationError(f"label sequences must have length {n}")
        if n and (y.min() < 1 or y.max() > self.class_count):
            raise ValidationError(f"noisy labels must lie in [1, {self.class_count}]")
        if not np.isin(l, (-1, 0, 1)).all():
            raise ValidationError("verification labels must be -1, 0 or 1")
        for name, arr in (("features", feats), ("noisy_labels", y), ("verification_labels", l)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "NoisyDataset":
        index = np.asarray(index, dtype=np.intp)
        return NoisyDataset(self.features[index], self.noisy_labels[index],
                            self.verification_labels[index], self.class_count)

    def with_verification(self, verification_labels) -> "NoisyDataset":
        return dataclasses.replace(self, verification_labels=np.asarray(verification_labels))

    def class_features(self, class_id: int) -> np.ndarray:
        return self.features[self.noisy_labels == class_id]

    def l2_normalized(self) -> "NoisyDataset":
        norms = np.linalg.norm(self.features, axis=1, keepdims=True)
        feats = np.divide(self.features, norms, out=np.zeros_like(self.features), where=norms > 0)
        return dataclasses.replace(self, features=feats)


@dataclass(frozen=True)
class ReferenceSet:
    class_id: int
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValidationError(f"reference set for class {self.class_id} must be a non-empty matrix")
        if np.any(np.linalg.norm(v, axis=1) == 0):
            raise ValidationError(f"reference set for class {self.class_id} has a zero-norm row")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


@dataclass
class Hyperparams:
    """Training configuration for CleanNet.

    ``hidden``, ``embed`` and ``ae_hidden`` default to ``d``, ``ceil(d/2)`` and
    ``d`` once the feature width is known.  ``omega="auto"`` balances the two
    supervised cases by the relevant/mislabeled count ratio of the training set.
    """

    rho: float = 0.1
    omega: float | str = "auto"
    beta: float = 0.1
    gamma: float = 0.1
    K: int = 50
    hidden: int | None = None
    embed: int | None = None
    ae_hidden: int | None = None
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    unverified_fraction: float = 0.5
    seed: int = 0
    l2_normalize: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.rho < 1.0:
            raise ValidationError("rho must lie in (0, 1)")
        if self.omega != "auto" and not (isinstance(self.omega, (int, float)) and self.omega > 0):
            raise ValidationError("omega must be positive or 'auto'")
        if self.beta < 0 or self.gamma < 0:
            raise ValidationError("beta and gamma must be non-negative")
        if not 0.0 <= self.unverified_fraction <= 1.0:
            raise ValidationError("unverified_fraction must lie in [0, 1]")
        if self.K < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("K and batch_size must be >= 1, epochs >= 0")
        for name in ("hidden", "embed", "ae_hidden"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValidationError(f"{name} must be >= 1")

    def dims(self, d: int) -> tuple[int, int, int]:
        """Resolved ``(hidden, embed, ae_hidden)`` for feature width ``d``."""
        return (self.hidden or d, self.embed or math.ceil(d / 2), self.ae_hidden or d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "Hyperparams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**values)


# ------------------------------------------------------------------ features


def save_features(path, features) -> None:
    feats = np.asarray(features)
    if feats.ndim != 2:
        raise DimensionError("features must be 2-D")
    n, d = feats.shape
    payload = np.ascontiguousarray(feats, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d) + payload)


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}", offset=4)
    expected = n * d * 4
    body = raw[_HEADER.size:]
    if len(body) < expected:
        raise FormatError(f"{path}: payload truncated, expected {expected} bytes, found {len(body)}",
                          offset=_HEADER.size + len(body))
    if len(body) > expected:
        raise FormatError(f"{path}: {len(body) - expected} trailing bytes after payload",
                          offset=_HEADER.size + expected)
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(n, d)


# -------------------------------------------------------------------- labels


def save_labels(path, noisy_labels, verification_labels) -> None:
    lines = ["sample_index\tnoisy_class\tverification_label"]
    for i, (y, l) in enumerate(zip(noisy_labels, verification_labels)):
        lines.append(f"{i}\t{int(y)}\t{int(l)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_labels(text: str, n: int, class_count: int, source="<labels>"):
    y = np.zeros(n, dtype=np.int64)
    l = np.zeros(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("sample_index"):
            continue
        parts = line.rstrip("\r").split("\t")
        if len(parts) != 3:
            raise ValidationError(f"{source}:{lineno}: expected 3 tab-separated fields")
        try:
            i, yi, li = (int(p) for p in parts)
        except ValueError:
            raise ValidationError(f"{source}:{lineno}: non-integer field") from None
        if not 0 <= i < n:
            raise ValidationError(f"{source}:{lineno}: sample index {i} outside [0, {n})")
        if seen[i]:
            raise ValidationError(f"{source}:{lineno}: duplicate sample index {i}")
        if not 1 <= yi <= class_count:
            raise ValidationError(f"{source}:{lineno}: class {yi} outside [1, {class_count}]")
        if li not in (-1, 0, 1):
            raise ValidationError(f"{source}:{lineno}: verification label {li} not in {{-1, 0, 1}}")
        seen[i] = True
        y[i], l[i] = yi, li
    if not seen.all():
        raise ValidationError(f"{source}: {int((~seen).sum())} of {n} samples have no label record")
    return y, l


def load_labels(path, n: int, class_count: int):
    """Return ``(noisy_labels, verification_labels)`` read from a label TSV."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not valid UTF-8", offset=exc.start) from None
    return parse_labels(text, n, class_count, source=str(path))


def infer_class_count(path) -> int:
    top = 0
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        if len(parts) == 3 and parts[1].lstrip("-").isdigit():
            top = max(top, int(parts[1]))
    return top


def load_dataset(features_path, labels_path, class_count: int | None = None) -> NoisyDataset:
    feats = load_features(features_path)
    L = class_count or infer_class_count(labels_path)
    y, l = load_labels(labels_path, feats.shape[0], L)
    return NoisyDataset(feats, y, l, L)


# --------------------------------------------------------------------- split


def split_indices(n: int, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ValidationError("split fractions must be non-negative and sum to 1")
    exact = fr * n
    sizes = np.floor(exact).astype(int)
    # largest remainder, earlier split wins ties
    order = np.argsort(-(exact - sizes), kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    perm = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for k, size in enumerate(sizes):
        if size == 0 and fr[k] > 0:
            warnings.warn(f"split {k} is empty for n={n}", RuntimeWarning, stacklevel=2)
        parts.append(np.sort(perm[start:start + size]))
        start += size
    return parts


def split_dataset(ds: NoisyDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic partition of ``ds`` into as many parts as ``fractions``.

    A ``(1, 0, 0)`` split returns ``ds`` unchanged as the first part.
    """
    parts = split_indices(len(ds), fractions, seed)
    return tuple(ds.subset(p) for p in parts)
