"""Per-class reference feature sets, chosen by K-means centroids or random sampling."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import NoisyDataset, ReferenceSet
from .errors import DimensionError, FormatError, ValidationError


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(X, C):
    # direct differences, not the |x|^2 - 2xc + |c|^2 expansion: exact argmin keeps inertia monotone
    diff = X[:, None, :] - C[None, :, :]
    return (diff * diff).sum(-1)


def _inertia(X, C, assign):
    diff = X - C[assign]
    return float((diff * diff).sum())


def _kmeans_pp(X, K, rng):
    m = X.shape[0]
    chosen = [int(rng.integers(m))]
    closest = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen centre
            idx = int(rng.integers(m))
        else:
            idx = int(rng.choice(m, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, ((X - X[idx]) ** 2).sum(1))
    return X[chosen].copy()


def _lloyd(X, C, max_iter):
    assign = _sq_dists(X, C).argmin(1)
    history = [_inertia(X, C, assign)]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        C = C.copy()
        counts = np.bincount(assign, minlength=C.shape[0])
        sums = np.zeros_like(C)
        np.add.at(sums, assign, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            # re-seed each empty cluster at the point farthest from its own centroid
            far = ((X - C[assign]) ** 2).sum(1)
            for k in empty:
                idx = int(far.argmax())
                C[k] = X[idx]
                far[idx] = -1.0
        new_assign = _sq_dists(X, C).argmin(1)
        history.append(_inertia(X, C, new_assign))
        converged = np.array_equal(new_assign, assign)
        assign = new_assign
        if converged:
            break
    return C, assign, history, n_iter


def kmeans(X, K: int, seed: int = 0, max_iter: int = 100, n_init: int = 4) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding; best of ``n_init`` seeded restarts.

    With no more distinct points than ``K`` the distinct points themselves are
    returned (the effective K is lowered).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValidationError("kmeans needs a non-empty 2-D feature matrix")
    if K < 1:
        raise ValidationError("K must be >= 1")
    uniq, first = np.unique(X, axis=0, return_index=True)
    if uniq.shape[0] <= K:
        C = X[np.sort(first)]
        assign = _sq_dists(X, C).argmin(1)
        inertia = _inertia(X, C, assign)
        return KMeansResult(C, assign, inertia, [inertia], 0)
    best = None
    for child in np.random.SeedSequence(seed).spawn(max(n_init, 1)):
        rng = np.random.default_rng(child)
        C, assign, history, n_iter = _lloyd(X, _kmeans_pp(X, K, rng), max_iter)
        res = KMeansResult(C, assign, history[-1], history, n_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def kmeans_select(features_of_class, K: int = 50, seed: int = 0, max_iter: int = 100,
                  class_id: int = 0, dim: int | None = None, n_init: int = 4) -> ReferenceSet:
    X = np.asarray(features_of_class, dtype=np.float64)
    if dim is not None and (X.ndim != 2 or X.shape[1] != dim):
        raise DimensionError(f"class {class_id}: features have shape {X.shape}, expected width {dim}")
    res = kmeans(X, K, seed=seed, max_iter=max_iter, n_init=n_init)
    return ReferenceSet(class_id, res.centroids)


def random_select(features_of_class, K: int = 50, seed: int = 0, class_id: int = 0) -> ReferenceSet:
    """``min(K, m)`` rows without replacement; all rows in original order when ``K >= m``."""
    X = np.asarray(features_of_class, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValidationError("random_select needs a non-empty 2-D feature matrix")
    m = X.shape[0]
    if K >= m:
        return ReferenceSet(class_id, X.copy())
    idx = np.random.default_rng(seed).choice(m, size=K, replace=False)
    return ReferenceSet(class_id, X[idx])


def build_reference_sets(ds: NoisyDataset, K: int = 50, method: str = "kmeans", seed: int = 0,
                         max_iter: int = 100, workers: int | None = None) -> dict[int, ReferenceSet]:
    """One reference set per class present in ``ds``, selected from its noisy-labelled features.

    Class ``c`` uses seed ``(seed, c)`` so results do not depend on ``workers``.
    """
    if method not in ("kmeans", "random"):
        raise ValidationError(f"unknown reference selection method {method!r}")
    classes = [int(c) for c in np.unique(ds.noisy_labels)]

    def one(c):
        class_seed = np.random.SeedSequence([seed, c])
        sub_seed = int(class_seed.generate_state(1)[0])
        X = ds.class_features(c)
        if method == "kmeans":
            return kmeans_select(X, K, seed=sub_seed, max_iter=max_iter, class_id=c, dim=ds.dim)
        return random_select(X, K, seed=sub_seed, class_id=c)

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            sets = list(pool.map(one, classes))
    else:
        sets = [one(c) for c in classes]
    return {rs.class_id: rs for rs in sets}


def references_to_checkpoint(refs: dict[int, ReferenceSet], provenance=None) -> Checkpoint:
    tensors = {f"class_{c}": rs.vectors for c, rs in refs.items()}
    return Checkpoint("references", tensors=tensors, provenance=dict(provenance or {}))


def references_from_checkpoint(ckpt: Checkpoint) -> dict[int, ReferenceSet]:
    refs = {}
    for name, arr in ckpt.tensors.items():
        if not name.startswith("class_"):
            raise FormatError(f"unexpected tensor {name!r} in reference checkpoint")
        c = int(name[len("class_"):])
        refs[c] = ReferenceSet(c, arr)
    return dict(sorted(refs.items()))
