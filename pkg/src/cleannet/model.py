"""CleanNet: attention-pooled reference-set encoder, autoencoder query encoder, matching losses.

Parameters are one flat ``{name: array}`` mapping shared by every class.
The encoder functions accept that mapping with either raw arrays
(inference, nothing recorded) or graph Tensors (training), see
:mod:`cleannet.autograd`.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Graph, Tensor
from .checkpoint import Checkpoint
from .data import Hyperparams, NoisyDataset, ReferenceSet
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    TrainingDivergenceError,
    UnknownClassError,
)

log = logging.getLogger(__name__)

PARAM_NAMES = (
    "ref_W1", "ref_b1", "ref_W2", "ref_b2",
    "attn_W", "attn_b", "attn_u",
    "ref_out_W", "ref_out_b",
    "ae_W1", "ae_b1", "ae_W2", "ae_b2", "ae_W3", "ae_b3", "ae_W4", "ae_b4",
)


def init_params(d: int, hp: Hyperparams, seed: int) -> dict[str, np.ndarray]:
    h, e, a1 = hp.dims(d)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    shapes = {
        "ref_W1": (d, h), "ref_W2": (h, h), "attn_W": (h, h), "ref_out_W": (h, e),
        "ae_W1": (d, a1), "ae_W2": (a1, e), "ae_W3": (e, a1), "ae_W4": (a1, d),
    }
    p = {}
    for name in PARAM_NAMES:
        if name in shapes:
            p[name] = ag.glorot_uniform(rng, *shapes[name])
        elif name == "attn_u":
            p[name] = ag.glorot_uniform(rng, h, 1)[:, 0]
        else:
            p[name] = np.zeros(shapes[name.replace("_b", "_W")][1])
    return p


# ------------------------------------------------------------------ encoders


def reference_hidden(V, p) -> Tensor:
    """Two-layer tanh MLP applied to each reference vector: the ``h_i``."""
    z = ag.tanh_act(ag.affine(V, p["ref_W1"], p["ref_b1"]))
    return ag.tanh_act(ag.affine(z, p["ref_W2"], p["ref_b2"]))


def attention_logits(H, p) -> Tensor:
    return ag.matmul(ag.tanh_act(ag.affine(H, p["attn_W"], p["attn_b"])), p["attn_u"])


def attention_weights(H, p) -> Tensor:
    """Softmax over rows of ``H`` of ``tanh(W h_i + b) . u``."""
    H = ag.as_tensor(H)
    if H.data.ndim != 2 or H.shape[0] < 1:
        raise DimensionError("attention needs a non-empty (K, h) matrix")
    return ag.softmax(attention_logits(H, p))


def encode_references(sets: Sequence, p) -> Tensor:
    """Class embeddings for several reference sets at once, one row per set."""
    mats = [rs.vectors if isinstance(rs, ReferenceSet) else np.asarray(rs, dtype=np.float64)
            for rs in sets]
    if not mats or any(m.ndim != 2 or m.shape[0] < 1 for m in mats):
        raise DimensionError("every reference set must be a non-empty (K, d) matrix")
    seg = np.repeat(np.arange(len(mats)), [m.shape[0] for m in mats])
    H = reference_hidden(np.concatenate(mats, axis=0), p)
    alpha = ag.segment_softmax(attention_logits(H, p), seg, len(mats))
    pooled = ag.segment_sum(ag.mul(H, ag.reshape(alpha, (-1, 1))), seg, len(mats))
    return ag.affine(pooled, p["ref_out_W"], p["ref_out_b"])


def encode_reference(V, p) -> Tensor:
    """Class embedding of one reference set (vector of width ``e``)."""
    phi = encode_references([V], p)
    return ag.reshape(phi, (phi.shape[1],))


def encode_query(v, p) -> tuple[Tensor, Tensor]:
    """Autoencoder pass ``d -> a1 -> e -> a1 -> d``: returns ``(phi_q, reconstruction)``.

    Works on one vector or a batch of rows.
    """
    v = ag.as_tensor(v)
    if v.shape[-1] != p["ae_W1"].shape[0]:
        raise DimensionError(f"query width {v.shape[-1]} does not match model width {p['ae_W1'].shape[0]}")
    z = ag.tanh_act(ag.affine(v, p["ae_W1"], p["ae_b1"]))
    phi = ag.affine(z, p["ae_W2"], p["ae_b2"])
    z = ag.tanh_act(ag.affine(phi, p["ae_W3"], p["ae_b3"]))
    r = ag.affine(z, p["ae_W4"], p["ae_b4"])
    return phi, r


# -------------------------------------------------------------------- losses


def supervised_cos_loss(cos, l, omega: float, rho: float) -> Tensor:
    """Element-wise margin cosine loss from precomputed similarities and verification labels."""
    cos = ag.as_tensor(cos)
    l = np.broadcast_to(np.asarray(l), cos.shape)
    pos = (l == 1).astype(np.float64)
    neg = omega * (l == 0).astype(np.float64)
    return ag.add(ag.mul(pos, ag.sub(1.0, cos)), ag.mul(neg, ag.relu(ag.sub(cos, rho))))


def unsup_cos_loss(cos, rho: float) -> Tensor:
    """Self-reinforcing loss: ``1 - cos`` where ``cos >= rho``, zero elsewhere."""
    cos = ag.as_tensor(cos)
    pseudo = (cos.data >= rho).astype(np.float64)
    return ag.mul(pseudo, ag.sub(1.0, cos))


def loss_supervised_cos(phi_q, phi_s, l, omega: float, rho: float) -> Tensor:
    return supervised_cos_loss(ag.cosine(phi_q, phi_s), l, omega, rho)


def loss_unsup_cos(phi_q, phi_s, rho: float) -> Tensor:
    return unsup_cos_loss(ag.cosine(phi_q, phi_s), rho)


@dataclass
class QueryBatch:
    features: np.ndarray
    class_ids: np.ndarray
    verification: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.verification = np.asarray(self.verification, dtype=np.int64)
        n = self.features.shape[0]
        if self.class_ids.shape != (n,) or self.verification.shape != (n,):
            raise DimensionError("batch fields must have one entry per query")


def loss_total(batch: QueryBatch, p, hp: Hyperparams, refs: Mapping[int, ReferenceSet],
               omega: float | None = None):
    """Batch mean of ``L_cos + beta*L_r + t*gamma*L_unsup``.

    ``t`` is 1 for unverified queries.  The reconstruction term applies to
    every query.  Returns ``(loss, component means)``.
    """
    if omega is None:
        if hp.omega == "auto":
            raise ConfigurationError("omega='auto' must be resolved before computing the loss")
        omega = float(hp.omega)
    classes, inverse = np.unique(batch.class_ids, return_inverse=True)
    missing = [int(c) for c in classes if int(c) not in refs]
    if missing:
        raise UnknownClassError(f"no reference set for classes {missing}")
    phi_s_all = encode_references([refs[int(c)] for c in classes], p)
    phi_s = ag.take(phi_s_all, inverse)
    phi_q, recon = encode_query(batch.features, p)
    cos = ag.cosine(phi_q, phi_s)
    l = batch.verification
    l_cos = supervised_cos_loss(cos, l, omega, hp.rho)
    l_r = ag.mse(batch.features, recon)
    l_unsup = ag.mul((l == -1).astype(np.float64), unsup_cos_loss(cos, hp.rho))
    per_query = ag.add(ag.add(l_cos, ag.mul(hp.beta, l_r)), ag.mul(hp.gamma, l_unsup))
    total = ag.mean(per_query)
    parts = {
        "cos": float(l_cos.data.mean()),
        "recon": float(l_r.data.mean()),
        "unsup": float(l_unsup.data.mean()),
    }
    return total, parts


# --------------------------------------------------------------------- model


class CleanNet:
    """Frozen-or-trainable parameter set plus the hyperparameters that built it."""

    def __init__(self, params: Mapping[str, np.ndarray], hp: Hyperparams, provenance=None):
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise FormatError(f"CleanNet parameters missing: {sorted(missing)}")
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in PARAM_NAMES}
        self.hp = hp
        self.provenance = dict(provenance or {})

    @classmethod
    def init(cls, d: int, hp: Hyperparams, seed: int | None = None) -> "CleanNet":
        seed = hp.seed if seed is None else seed
        return cls(init_params(d, hp, seed), hp, {"seed": seed, "epoch": 0})

    @property
    def feature_dim(self) -> int:
        return self.params["ae_W1"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.params["ae_W2"].shape[1]

    def copy(self) -> "CleanNet":
        return CleanNet({k: v.copy() for k, v in self.params.items()}, self.hp, self.provenance)

    def encode_reference(self, V) -> np.ndarray:
        phi = encode_reference(V, self.params).data
        if not np.linalg.norm(phi) > 0:
            raise DegenerateInputError("reference set encodes to a zero vector")
        return phi

    def encode_query(self, v):
        phi, r = encode_query(v, self.params)
        return phi.data, r.data

    def class_embeddings(self, refs: Mapping[int, ReferenceSet]) -> dict[int, np.ndarray]:
        classes = sorted(refs)
        emb = encode_references([refs[c] for c in classes], self.params).data
        if np.any(np.linalg.norm(emb, axis=1) == 0):
            raise DegenerateInputError("a reference set encodes to a zero vector")
        return {c: emb[i] for i, c in enumerate(classes)}

    def score(self, features, class_ids, refs: Mapping[int, ReferenceSet],
              embeddings: Mapping[int, np.ndarray] | None = None) -> np.ndarray:
        """``cos(phi_q, phi_c^s)`` for each query against its labelled class."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        class_ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
        emb = embeddings if embeddings is not None else self.class_embeddings(refs)
        unknown = sorted({int(c) for c in class_ids} - set(emb))
        if unknown:
            raise UnknownClassError(f"no reference set for classes {unknown}")
        if features.shape[0] == 0:
            return np.zeros(0)
        phi_q, _ = self.encode_query(features)
        phi_s = np.stack([emb[int(c)] for c in class_ids])
        return ag.cosine(phi_q, phi_s).data

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint("cleannet", tensors=dict(self.params), hyperparams=self.hp.to_dict(),
                          provenance=dict(self.provenance))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "CleanNet":
        if ckpt.kind != "cleannet":
            raise FormatError(f"expected a cleannet checkpoint, got {ckpt.kind!r}")
        return cls(ckpt.tensors, Hyperparams.from_dict(ckpt.hyperparams), ckpt.provenance)


# ------------------------------------------------------------------ training


def resolve_omega(ds: NoisyDataset, hp: Hyperparams) -> float:
    """Numeric negative-sample weight; ``"auto"`` is #relevant / #mislabeled among verified samples."""
    if hp.omega != "auto":
        return float(hp.omega)
    n_pos = int((ds.verification_labels == 1).sum())
    n_neg = int((ds.verification_labels == 0).sum())
    if n_neg == 0 or n_pos == 0:
        warnings.warn("cannot balance omega without both verification outcomes; using 1.0",
                      RuntimeWarning, stacklevel=2)
        return 1.0
    return n_pos / n_neg


class _Cycler:
    """Endless stream of indices from ``pool``, reshuffled on every pass."""

    def __init__(self, pool, rng):
        self.pool = np.asarray(pool, dtype=np.intp)
        self.rng = rng
        self.order = np.empty(0, dtype=np.intp)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos >= self.order.size:
                self.order = self.rng.permutation(self.pool)
                self.pos = 0
            chunk = self.order[self.pos:self.pos + k]
            self.pos += chunk.size
            k -= chunk.size
            out.append(chunk)
        return np.concatenate(out) if out else np.empty(0, dtype=np.intp)


def batch_sizes(B: int, unverified_fraction: float, n_verified: int, n_unverified: int):
    """``(verified, unverified)`` draw counts for a batch, filling any deficit from the other pool."""
    nu = min(math.floor(B * unverified_fraction), n_unverified)
    nv = min(B - nu, n_verified)
    nu = min(B - nv, n_unverified)
    return nv, nu


def train_cleannet(ds: NoisyDataset, refs: Mapping[int, ReferenceSet], hp: Hyperparams,
                   init: CleanNet | None = None):
    """Mini-batch SGD on the total loss.  Returns ``(model, per-epoch log rows)``.

    Each epoch has ``ceil(n / batch_size)`` batches.  Class embeddings are
    recomputed from the current parameters for every batch.
    """
    if len(ds) == 0:
        raise ConfigurationError("cannot train CleanNet on an empty dataset")
    verified = np.flatnonzero(ds.verification_labels >= 0)
    unverified = np.flatnonzero(ds.verification_labels < 0)
    if verified.size == 0:
        raise ConfigurationError("no verified samples: the supervised loss would be vacuous")
    missing = sorted({int(c) for c in np.unique(ds.noisy_labels)} - set(refs))
    if missing:
        raise UnknownClassError(f"no reference set for classes {missing}")
    omega = resolve_omega(ds, hp)
    model = init.copy() if init is not None else CleanNet.init(ds.dim, hp)
    model.hp = hp
    if model.feature_dim != ds.dim:
        raise DimensionError(f"model width {model.feature_dim} does not match data width {ds.dim}")
    model.provenance["omega"] = omega
    params = dict(model.params)
    opt = ag.SGD(hp.lr, hp.momentum)
    rng = np.random.default_rng(np.random.SeedSequence([hp.seed, 1]))
    v_stream, u_stream = _Cycler(verified, rng), _Cycler(unverified, rng)
    nv, nu = batch_sizes(hp.batch_size, hp.unverified_fraction, verified.size, unverified.size)
    n_batches = math.ceil(len(ds) / hp.batch_size)
    history = []
    start_epoch = int(model.provenance.get("epoch", 0))
    for epoch in range(1, hp.epochs + 1):
        sums = {"loss": 0.0, "cos": 0.0, "recon": 0.0, "unsup": 0.0}
        for _ in range(n_batches):
            idx = np.concatenate([v_stream.take(nv), u_stream.take(nu)])
            batch = QueryBatch(ds.features[idx], ds.noisy_labels[idx], ds.verification_labels[idx])
            g = Graph()
            try:
                loss, parts = loss_total(batch, g.params_from(params), hp, refs, omega)
                grads = ag.backward(g, loss)
                params = opt.step(params, grads)
            except FloatingPointError as exc:
                raise TrainingDivergenceError(str(exc), epoch=epoch) from exc
            sums["loss"] += float(loss.data)
            for k, v in parts.items():
                sums[k] += v
        row = {"epoch": start_epoch + epoch, **{k: v / n_batches for k, v in sums.items()}}
        history.append(row)
        log.debug("cleannet epoch %d loss %.6f", row["epoch"], row["loss"])
    model.params = params
    model.provenance["epoch"] = start_epoch + hp.epochs
    return model, history
