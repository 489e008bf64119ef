"""Dense float64 tensor core with reverse-mode automatic differentiation.

Every downstream component (graph encoder, query former, decoding heads,
losses) is composed from the ops defined here, so each op carries an exact
vector-Jacobian product and the whole stack stays checkable against central
finite differences.

Values are immutable once wrapped in a Tensor; NaN/Inf are rejected at every
op boundary. No broadcasting beyond numpy's leading-dim rules, no dropout,
no normalization layers.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf crossed an op boundary."""


_ids = itertools.count()


class Tensor:
    """Immutable float64 array node in a differentiation graph.

    Leaf tensors created with requires_grad=True act as parameters; every op
    output records its parents and a vjp closure mapping the output cotangent
    to parent cotangents.
    """

    __slots__ = ("data", "parents", "vjp", "requires_grad", "tid", "grad")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        # a single reduction: any NaN/Inf element makes the sum non-finite
        if not math.isfinite(arr.sum()):
            raise NonFiniteError("non-finite values entering the graph")
        self.data = arr
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents
        )
        self.tid = next(_ids)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tid={self.tid})"

    # arithmetic sugar
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

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear-algebra ops


def add(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, (a, b), vjp)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out, (a, b), vjp)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor(out, (a, b), vjp)


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return Tensor(out, (a, b), vjp)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, (a, b), vjp)


def transpose(a):
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return Tensor(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = _lift(a)
    orig = a.data.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a):
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a):
    a = _lift(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = _lift(a)
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, lo, hi):
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    a = _lift(a)
    inside = (a.data > lo) & (a.data < hi)
    return Tensor(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.full(a.data.shape, g),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tensors, vjp)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis; gradient zero-pads the complement."""
    a = _lift(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor(out, (a,), vjp)


def take_rows(a, indices):
    """Row gather (embedding lookup); gradient scatter-adds into rows."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(out, (a,), vjp)


def softmax_rows(a, key_mask=None):
    """Row-wise softmax over the last axis of a matrix.

    key_mask, when given, is a boolean vector over columns; masked columns
    receive -1e30 logits and end up with exactly zero weight.
    """
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError("softmax_rows expects a matrix")
    z = a.data
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (z.shape[1],):
            raise ShapeError("key mask length must match key count")
        if not key_mask.any():
            raise ShapeError("softmax over an empty key set")
        z = np.where(key_mask[None, :], z, -1e30)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _reachable(root):
    """All graph nodes between root and parameters, pruned to grad-relevant."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.tid in seen or not node.requires_grad:
            continue
        seen[node.tid] = node
        stack.extend(node.parents)
    return list(seen.values())


class Tape:
    """Topologically ordered op record between parameters and one output.

    Creation order is topological by construction (an op's inputs always
    predate it), so sorting by node id gives a valid schedule that backward
    walks exactly once per record.
    """

    def __init__(self, root):
        if root.data.ndim != 0:
            raise ShapeError("tape root must be a scalar")
        self.root = root
        self.records = sorted(_reachable(root), key=lambda n: n.tid)

    def backward(self):
        """Accumulate dRoot/dLeaf for every parameter leaf; returns {leaf: grad}."""
        grads = {self.root.tid: np.ones_like(self.root.data)}
        leaves = {}
        for node in reversed(self.records):
            g = grads.pop(node.tid, None)
            if g is None:
                continue
            if node.vjp is None:
                node.grad = g
                leaves[node] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.tid in grads:
                    grads[parent.tid] = grads[parent.tid] + pg
                else:
                    grads[parent.tid] = pg
        return leaves


def backward(loss):
    """Reverse sweep from a scalar loss; returns {parameter: gradient}."""
    return Tape(loss).backward()


def grad_check(f, point, step=1e-5):
    """Max relative error between backward() and central differences.

    f maps a Tensor to a scalar Tensor. Relative error per coordinate uses
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    p = Tensor(point, requires_grad=True)
    out = f(p)
    if out.data.ndim != 0:
        raise ShapeError("grad_check target must be scalar")
    analytic = backward(out).get(p)
    if analytic is None:
        analytic = np.zeros_like(p.data)
    base = np.asarray(point, dtype=np.float64)
    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        fhi = f(Tensor(hi.reshape(base.shape))).item()
        flo = f(Tensor(lo.reshape(base.shape))).item()
        numeric = (fhi - flo) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# initialization and the shared attention / MLP primitives


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class AttentionParams:
    """Projection weights for multi-head (self/cross) attention.

    model_dim must divide evenly by heads; all projections carry biases.
    """

    heads: int
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor

    @property
    def dim(self):
        return self.w_q.shape[0]

    @classmethod
    def init(cls, rng, dim, heads):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        mk = lambda: uniform_init(rng, (dim, dim), dim)
        bk = lambda: uniform_init(rng, (dim,), dim)
        w_o = uniform_init(rng, (dim, dim), dim)
        # small output projection: residual attention branches start close
        # to the identity, which speeds up early optimization considerably
        w_o.data = w_o.data * 0.1
        return cls(heads, mk(), bk(), mk(), bk(), mk(), bk(), w_o, bk())

    def named(self, prefix):
        return {
            f"{prefix}.w_q": self.w_q, f"{prefix}.b_q": self.b_q,
            f"{prefix}.w_k": self.w_k, f"{prefix}.b_k": self.b_k,
            f"{prefix}.w_v": self.w_v, f"{prefix}.b_v": self.b_v,
            f"{prefix}.w_o": self.w_o, f"{prefix}.b_o": self.b_o,
        }


def mhca(q, k, v, params, key_mask=None, causal=False):
    """Multi-head cross-attention: queries from q, keys/values from k, v.

    Scale is 1/sqrt(head_dim); each head's attention rows are softmax
    normalized (row-stochastic). key_mask excludes padded key slots.
    """
    q, k, v = _lift(q), _lift(k), _lift(v)
    d = params.dim
    if q.ndim != 2 or q.shape[1] != d or k.shape[1] != d or v.shape[1] != d:
        raise ShapeError(f"attention dims {q.shape}/{k.shape}/{v.shape} vs D={d}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError("key/value counts differ")
    if k.shape[0] == 0:
        raise ShapeError("empty key set")
    heads = params.heads
    hd = d // heads
    scale = 1.0 / math.sqrt(hd)
    qp = add(matmul(q, params.w_q), params.b_q)
    kp = add(matmul(k, params.w_k), params.b_k)
    vp = add(matmul(v, params.w_v), params.b_v)
    outs = []
    for h in range(heads):
        qh = narrow(qp, 1, h * hd, hd)
        kh = narrow(kp, 1, h * hd, hd)
        vh = narrow(vp, 1, h * hd, hd)
        logits = mul(matmul(qh, transpose(kh)), scale)
        if causal:
            lq, lk = logits.shape
            tri = np.triu(np.full((lq, lk), -1e30), k=1)
            logits = add(logits, tri)
        att = softmax_rows(logits, key_mask=key_mask)
        outs.append(matmul(att, vh))
    return add(matmul(concat(outs, axis=1), params.w_o), params.b_o)


def mhsa(x, params, key_mask=None, causal=False):
    """Multi-head self-attention over a token matrix."""
    return mhca(x, x, x, params, key_mask=key_mask, causal=causal)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "none": lambda t: t}


@dataclass
class MlpParams:
    """Two affine layers with an activation between them."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "relu"

    @classmethod
    def init(cls, rng, d_in, d_hidden, d_out, activation="relu"):
        return cls(
            uniform_init(rng, (d_in, d_hidden), d_in),
            uniform_init(rng, (d_hidden,), d_in),
            uniform_init(rng, (d_hidden, d_out), d_hidden),
            uniform_init(rng, (d_out,), d_hidden),
            activation,
        )

    def named(self, prefix):
        return {
            f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2,
        }


def mlp(x, params):
    """Affine -> activation -> affine."""
    x = _lift(x)
    if params.activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {params.activation!r}")
    h = _ACTIVATIONS[params.activation](add(matmul(x, params.w1), params.b1))
    return add(matmul(h, params.w2), params.b2)
