"""Small dense-tensor library with a reverse-mode tape.

Every op takes :class:`Tensor` objects (or anything ``np.asarray`` accepts)
and returns a new Tensor.  If at least one input belongs to a
:class:`Graph`, the result is appended to that graph together with a
closure computing the vector-Jacobian product; otherwise the op is a plain
numpy computation and nothing is recorded.  This lets the same model code
run both under training (parameters registered in a graph) and at inference
(parameters as raw arrays).

All values are float64.  Any op producing NaN/Inf raises
:class:`~cleannet.errors.NonFiniteError`.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
    TrainingDivergenceError,
)

_NORM_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "graph", "parents", "backward_fn", "op", "name", "node_id")

    def __init__(self, data, graph=None, parents=(), backward_fn=None, op="const", name=None):
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        self.data = data
        self.graph = graph
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.node_id = None
        if graph is not None:
            self.node_id = len(graph.nodes)
            graph.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # operator sugar, used sparingly in model code
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Graph:
    """Tape of op records in creation order plus a registry of named parameters.

    Creation order is a valid topological order because an op can only
    consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=np.float64), graph=self, op="param", name=name)
        self.params[name] = t
        return t

    def params_from(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in arrays.items()}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    graph = None
    for t in inputs:
        if t.graph is not None:
            if graph is not None and t.graph is not graph:
                raise ContractError("inputs belong to different graphs")
            graph = t.graph
    if graph is None:
        return Tensor(data, op=op)
    return Tensor(data, graph=graph, parents=inputs, backward_fn=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tanh_act(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


tanh = tanh_act


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ------------------------------------------------------------------ reductions


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record("sum", x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, max(x.data.size, 1)
    return _record("mean", x.data.mean() if x.data.size else 0.0, (x,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` for a 2-D and ``b`` 2-D (matrix product) or 1-D (matrix-vector)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if bd.ndim == 1:
        return _record("matvec", ad @ bd, (a, b), lambda g: (np.outer(g, bd), ad.T @ g))
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` with ``b`` broadcast over rows.  A 1-D ``x`` is treated as one row."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    xd, Wd = x.data, W.data
    if Wd.ndim != 2 or b.data.shape != (Wd.shape[1],):
        raise DimensionError(f"affine: weight {Wd.shape} and bias {b.data.shape} disagree")
    if xd.ndim not in (1, 2) or xd.shape[-1] != Wd.shape[0]:
        raise DimensionError(f"affine: input {xd.shape} does not match weight {Wd.shape}")
    out = xd @ Wd + b.data

    def backward(g):
        if xd.ndim == 1:
            return g @ Wd.T, np.outer(xd, g), g
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _record("affine", out, (x, W, b), backward)


def take(x, index) -> Tensor:
    """Gather rows: ``x[index]``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record("take", x.data[index], (x,), backward)


def pick(x, index) -> Tensor:
    """Per-row element: ``x[i, index[i]]``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _record("pick", x.data[rows, index], (x,), backward)


# ------------------------------------------------------------------- softmaxes


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise DimensionError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record("log_softmax", y, (x,),
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def segment_softmax(x, segments, n_segments: int) -> Tensor:
    """Softmax of a 1-D tensor taken independently within each segment id."""
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.intp)
    if x.data.ndim != 1 or seg.shape != x.data.shape:
        raise DimensionError("segment_softmax expects a 1-D input with one segment id per entry")
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, seg, x.data)
    e = np.exp(x.data - seg_max[seg])
    denom = np.zeros(n_segments)
    np.add.at(denom, seg, e)
    y = e / denom[seg]

    def backward(g):
        dot = np.zeros(n_segments)
        np.add.at(dot, seg, g * y)
        return (y * (g - dot[seg]),)

    return _record("segment_softmax", y, (x,), backward)


def segment_sum(x, segments, n_segments: int) -> Tensor:
    """Sum rows of ``x`` sharing a segment id; output has ``n_segments`` rows."""
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.intp)
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return _record("segment_sum", out, (x,), lambda g: (g[seg],))


# ------------------------------------------------------------ similarity, losses


def cosine(a, b) -> Tensor:
    """Cosine similarity along the last axis: scalar for vectors, one value per row for matrices.

    Zero-norm inputs are rejected; ``_NORM_EPS`` only enters the gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise DimensionError(f"cosine: shapes {ad.shape} and {bd.shape} differ")
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("cosine of a zero-norm vector")
    c = np.clip((ad * bd).sum(axis=-1) / (na * nb), -1.0, 1.0)

    def backward(g):
        na_e = (na + _NORM_EPS)[..., None]
        nb_e = (nb + _NORM_EPS)[..., None]
        ce, ge = c[..., None], np.asarray(g)[..., None]
        da = ge * (bd / (na_e * nb_e) - ce * ad / (na_e * na_e))
        db = ge * (ad / (na_e * nb_e) - ce * bd / (nb_e * nb_e))
        return da, db

    return _record("cosine", c, (a, b), backward)


def mse(a, b) -> Tensor:
    """Squared Euclidean distance along the last axis (sum, not mean, of squared differences)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data

    def backward(g):
        gd = 2.0 * np.asarray(g)[..., None] * diff
        return gd, -gd

    return _record("mse", (diff * diff).sum(axis=-1), (a, b), backward)


# -------------------------------------------------------------------- backprop


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns a gradient for every registered parameter.

    Parameters the loss does not depend on get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    if loss.graph is graph and loss.node_id is not None:
        grads[loss.node_id] = np.ones_like(loss.data)
        for node in reversed(graph.nodes[: loss.node_id + 1]):
            g = grads[node.node_id]
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if parent.node_id is None or parent.graph is not graph:
                    continue
                prev = grads[parent.node_id]
                grads[parent.node_id] = pg if prev is None else prev + pg
    elif loss.graph is not None:
        raise ContractError("loss tensor belongs to a different graph")
    out = {}
    for name, t in graph.params.items():
        g = grads[t.node_id]
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    return out


def value_and_grad(f: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]):
    g = Graph()
    loss = f(g.params_from(params))
    return float(loss.data), backward(g, loss)


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over every coordinate.

    ``f`` maps a dict of parameter Tensors to a scalar Tensor.  Relative error
    is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not step > 0:
        raise ContractError("step must be positive")
    try:
        _, analytic = value_and_grad(f, params)
        work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        worst = 0.0
        for name, arr in work.items():
            flat = arr.reshape(-1)
            ga = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f({k: Tensor(v) for k, v in work.items()}).data)
                flat[i] = orig - step
                fm = float(f({k: Tensor(v) for k, v in work.items()}).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                err = abs(ga[i] - num) / max(1e-8, abs(ga[i]) + abs(num))
                worst = max(worst, err)
    except NonFiniteError as exc:
        raise DegenerateInputError(f"function value is not finite: {exc}") from exc
    return worst


# ------------------------------------------------------------------- optimizer


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
             momentum: float = 0.0, velocity: Mapping[str, np.ndarray] | None = None):
    """One SGD step with heavy-ball momentum: ``v <- m v + g``, ``theta <- theta - lr v``.

    Returns ``(new_params, new_velocity)``; the inputs are not modified.
    """
    if not lr > 0:
        raise ContractError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ContractError("momentum must be in [0, 1)")
    new_params, new_velocity = {}, {}
    for name, theta in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingDivergenceError(f"non-finite gradient for {name!r}")
        v = g if velocity is None or name not in velocity else momentum * velocity[name] + g
        new_velocity[name] = v
        new_params[name] = theta - lr * v
    return new_params, new_velocity


class SGD:
    """Stateful wrapper around :func:`sgd_step` holding the velocity buffers."""

    def __init__(self, lr: float = 0.05, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] | None = None

    def step(self, params, grads):
        params, self.velocity = sgd_step(params, grads, self.lr, self.momentum, self.velocity)
        return params


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
