"""Shared builders for the tests: tiny models, tiny datasets, and the full-objective closure."""

import numpy as np

from cleannet.autograd import Graph
from cleannet.data import Hyperparams, NoisyDataset, ReferenceSet
from cleannet.model import QueryBatch, init_params, loss_total

TINY = dict(d=8, h=8, e=4, K=4, batch=6)


def tiny_setup(seed=0, classes=3):
    """Random d=8, h=8, e=4 parameters, K=4 reference sets, and a batch of 6 mixing l in {1, 0, -1}."""
    rng = np.random.default_rng(seed)
    d = TINY["d"]
    hp = Hyperparams(hidden=TINY["h"], embed=TINY["e"], ae_hidden=TINY["h"], K=TINY["K"], omega=1.5)
    params = init_params(d, hp, seed)
    # non-zero biases so their gradients are exercised too
    params = {k: v + (0.1 * rng.standard_normal(v.shape) if "_b" in k else 0) for k, v in params.items()}
    refs = {c: ReferenceSet(c, rng.standard_normal((TINY["K"], d))) for c in range(1, classes + 1)}
    batch = QueryBatch(rng.standard_normal((TINY["batch"], d)),
                       np.array([1, 2, 3, 1, 2, 3][:TINY["batch"]]),
                       np.array([1, 0, -1, 1, 0, -1][:TINY["batch"]]))
    return params, hp, refs, batch


def total_loss_fn(hp, refs, batch):
    def f(p):
        loss, _ = loss_total(batch, p, hp, refs, omega=float(hp.omega))
        return loss
    return f


def cos_values(params, hp, refs, batch):
    """Per-query cosines at ``params`` (to check distance from hinge kinks)."""
    from cleannet.autograd import cosine
    from cleannet.model import encode_query, encode_references

    classes = sorted(refs)
    emb = encode_references([refs[c] for c in classes], params).data
    phi, _ = encode_query(batch.features, params)
    return cosine(phi.data, emb[np.searchsorted(classes, batch.class_ids)]).data


def blob_dataset(seed=0, classes=4, per_class=60, d=6, noise=0.2, verified=0.5, sep=6.0):
    """Small Gaussian-blob set with planted noise, independent of the package generator."""
    rng = np.random.default_rng(seed)
    centres = sep * rng.standard_normal((classes, d))
    true = np.repeat(np.arange(1, classes + 1), per_class)
    X = centres[true - 1] + rng.standard_normal((true.size, d))
    flip = rng.random(true.size) < noise
    noisy = np.where(flip, (true - 1 + rng.integers(1, classes, true.size)) % classes + 1, true)
    lab = np.where(rng.random(true.size) < verified, (noisy == true).astype(int), -1)
    return NoisyDataset(X, noisy, lab, classes), true


def fresh_graph_params(params):
    g = Graph()
    return g, g.params_from(params)
