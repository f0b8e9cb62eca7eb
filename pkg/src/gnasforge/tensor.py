"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: exactly the primitives the graph blocks,
controller and router need. Tensors are immutable values; a computation
builds an implicit tape (parent links + closures) and ``backward`` walks it
once in reverse topological order.
"""

from __future__ import annotations

import json
import os

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


def _shape_err(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """A float64 ndarray plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """A new leaf with the same values and no tape history."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    # -- backward ----------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every grad-requiring leaf.

        ``self`` must be a scalar (size 1). Each tape node is visited exactly
        once, in reverse topological order.
        """
        if self.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce an upstream gradient back to the broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == () or all(s == 1 for s in shape):
        return g.sum().reshape(shape)
    # row vector (1, d) or column vector (n, 1)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _check_ew(op, a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sa) == 2 and len(sb) == 2:
        rows_ok = sa[0] == sb[0] or sa[0] == 1 or sb[0] == 1
        cols_ok = sa[1] == sb[1] or sa[1] == 1 or sb[1] == 1
        if rows_ok and cols_ok and (sa[0] == sb[0] or sa[1] == sb[1]):
            return
    raise _shape_err(op, sa, sb)


# -- elementwise arithmetic --------------------------------------------------

def add(a, b):
    _check_ew("add", a, b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def sub(a, b):
    _check_ew("sub", a, b)
    out = Tensor(a.data - b.data, _parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = bw
    return out


def mul(a, b):
    _check_ew("mul", a, b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


def div(a, b):
    _check_ew("div", a, b)
    out = Tensor(a.data / b.data, _parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = bw
    return out


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    out = Tensor(a.data * c, _parents=(a,))
    out._backward = lambda g: _accum(a, g * c)
    return out


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise _shape_err("matmul", a.data.shape, b.data.shape)
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    out._backward = bw
    return out


def concat(tensors, axis=-1):
    """Concatenate along the last axis."""
    if not tensors:
        raise ValueError("concat: empty list")
    nd = tensors[0].data.ndim
    if axis not in (-1, nd - 1):
        raise ValueError("concat: only last-axis concatenation is supported")
    for t in tensors[1:]:
        if t.data.shape[:-1] != tensors[0].data.shape[:-1]:
            raise _shape_err("concat", tensors[0].data.shape, t.data.shape)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1), _parents=tuple(tensors))
    splits = np.cumsum([t.data.shape[-1] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=-1)):
            _accum(t, piece)

    out._backward = bw
    return out


def broadcast_rows(a, n):
    """Repeat a (1, d) row vector into an (n, d) matrix."""
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise _shape_err("broadcast_rows", a.data.shape)
    out = Tensor(np.broadcast_to(a.data, (n, a.data.shape[1])).copy(), _parents=(a,))
    out._backward = lambda g: _accum(a, g.sum(axis=0, keepdims=True))
    return out


# -- nonlinearities ----------------------------------------------------------

def _unary(a, value, dvalue):
    out = Tensor(value, _parents=(a,))
    out._backward = lambda g: _accum(a, g * dvalue)
    return out


def log(a):
    return _unary(a, np.log(a.data), 1.0 / a.data)


def exp(a):
    y = np.exp(a.data)
    return _unary(a, y, y)


def tanh(a):
    y = np.tanh(a.data)
    return _unary(a, y, 1.0 - y * y)


def _sigmoid_np(x):
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    y = _sigmoid_np(a.data)
    return _unary(a, y, y * (1.0 - y))


def relu(a):
    return _unary(a, np.maximum(a.data, 0.0), (a.data > 0).astype(np.float64))


def leaky_relu(a, slope=0.2):
    y = np.where(a.data > 0, a.data, slope * a.data)
    return _unary(a, y, np.where(a.data > 0, 1.0, slope))


def relu6(a):
    y = np.clip(a.data, 0.0, 6.0)
    return _unary(a, y, ((a.data > 0) & (a.data < 6)).astype(np.float64))


def elu(a):
    y = np.where(a.data > 0, a.data, np.expm1(a.data))
    return _unary(a, y, np.where(a.data > 0, 1.0, np.exp(np.minimum(a.data, 0.0))))


def softplus(a):
    y = np.logaddexp(0.0, a.data)
    return _unary(a, y, _sigmoid_np(a.data))


def softmax_rows(a):
    """Softmax along the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, _parents=(a,))

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    out._backward = bw
    return out


# -- gather / segment ops ----------------------------------------------------

def gather_rows(a, idx):
    """Select rows of ``a`` by an integer index vector."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows: index must be a vector")
    if a.data.ndim != 2:
        raise _shape_err("gather_rows", a.data.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.data.shape[0]} rows")
    out = Tensor(a.data[idx], _parents=(a,))

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _accum(a, acc)

    out._backward = bw
    return out


def _check_segments(op, values, segments, num_segments):
    segments = np.asarray(segments, dtype=np.int64)
    if values.data.ndim != 2 or segments.shape != (values.data.shape[0],):
        raise _shape_err(op, values.data.shape, segments.shape)
    if segments.size and (segments.min() < 0 or segments.max() >= num_segments):
        raise IndexError(f"{op}: segment id out of range for {num_segments} segments")
    return segments


def segment_sum(values, segments, num_segments):
    """Sum rows of ``values`` into ``num_segments`` buckets keyed by ``segments``."""
    segments = _check_segments("segment_sum", values, segments, num_segments)
    y = np.zeros((num_segments, values.data.shape[1]))
    np.add.at(y, segments, values.data)
    out = Tensor(y, _parents=(values,))
    out._backward = lambda g: _accum(values, g[segments])
    return out


def segment_mean(values, segments, num_segments):
    """Per-segment mean; an empty segment yields a zero row."""
    segments = _check_segments("segment_mean", values, segments, num_segments)
    counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    y = np.zeros((num_segments, values.data.shape[1]))
    np.add.at(y, segments, values.data)
    y /= safe[:, None]
    out = Tensor(y, _parents=(values,))
    out._backward = lambda g: _accum(values, (g / safe[:, None])[segments])
    return out


def segment_max(values, segments, num_segments):
    """Per-segment max; empty segments yield a zero row.

    Backward routes the gradient entirely to the first row attaining the max
    in each segment (per column).
    """
    segments = _check_segments("segment_max", values, segments, num_segments)
    d = values.data.shape[1]
    y = np.full((num_segments, d), -np.inf)
    np.maximum.at(y, segments, values.data)
    empty = ~np.isin(np.arange(num_segments), segments)
    y[empty] = 0.0
    # first row achieving the max, per (segment, column)
    winner = np.full((num_segments, d), -1, dtype=np.int64)
    for r in range(values.data.shape[0] - 1, -1, -1):
        s = segments[r]
        winner[s] = np.where(values.data[r] == y[s], r, winner[s])
    out = Tensor(y, _parents=(values,))

    def bw(g):
        acc = np.zeros_like(values.data)
        rows = winner.reshape(-1)
        cols = np.tile(np.arange(d), num_segments)
        keep = rows >= 0
        np.add.at(acc, (rows[keep], cols[keep]), g.reshape(-1)[keep])
        _accum(values, acc)

    out._backward = bw
    return out


# -- reductions and selection -------------------------------------------------

def tsum(a):
    out = Tensor(a.data.sum(), _parents=(a,))
    out._backward = lambda g: _accum(a, np.full_like(a.data, float(g)))
    return out


def tmean(a):
    n = a.data.size
    out = Tensor(a.data.mean(), _parents=(a,))
    out._backward = lambda g: _accum(a, np.full_like(a.data, float(g) / n))
    return out


def pick(a, index):
    """Select one scalar entry from a tensor (flat index), keeping gradients."""
    flat = a.data.reshape(-1)
    if not 0 <= index < flat.size:
        raise IndexError(f"pick: index {index} out of range for size {flat.size}")
    out = Tensor(flat[index], _parents=(a,))

    def bw(g):
        acc = np.zeros_like(a.data)
        acc.reshape(-1)[index] = float(g)
        _accum(a, acc)

    out._backward = bw
    return out


# -- losses (fused for numerical stability) -----------------------------------

def softmax_cross_entropy(logits, labels, mask):
    """Mean softmax cross-entropy of integer ``labels`` over masked rows."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("softmax_cross_entropy: empty mask")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(-logp[rows, labels[rows]].mean(), _parents=(logits,))
    p = np.exp(logp)

    def bw(g):
        acc = np.zeros_like(logits.data)
        acc[rows] = p[rows]
        acc[rows, labels[rows]] -= 1.0
        _accum(logits, acc * (float(g) / rows.size))

    out._backward = bw
    return out


def sigmoid_bce(logits, targets, mask):
    """Mean elementwise sigmoid binary cross-entropy over masked rows."""
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("sigmoid_bce: empty mask")
    if targets.shape != logits.data.shape:
        raise _shape_err("sigmoid_bce", logits.data.shape, targets.shape)
    x, t = logits.data[rows], targets[rows]
    # softplus(x) - t*x is the stable form of -t*log(s) - (1-t)*log(1-s)
    loss = (np.logaddexp(0.0, x) - t * x).mean()
    out = Tensor(loss, _parents=(logits,))
    n = x.size

    def bw(g):
        acc = np.zeros_like(logits.data)
        acc[rows] = _sigmoid_np(x) - t
        _accum(logits, acc * (float(g) / n))

    out._backward = bw
    return out


ACTIVATIONS = {
    "none": lambda t: t,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "relu": relu,
    "leaky_relu": lambda t: leaky_relu(t, 0.01),
    "relu6": relu6,
    "elu": elu,
}


def activation_apply(kind, t):
    """Apply one of the candidate activation functions by name."""
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None
    return fn(t)


# -- parameter registry and checkpoints ----------------------------------------

class ParameterStore:
    """Named trainable leaf tensors, grouped (w / a_micro / a_macro)."""

    def __init__(self):
        self._params = {}
        self._groups = {}

    def add(self, name, value, group="w"):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._groups[name] = group
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self, group=None):
        if group is None:
            return list(self._params)
        return [n for n, g in self._groups.items() if g == group]

    def group_of(self, name):
        return self._groups[name]

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self, group=None):
        """Collect accumulated gradients keyed by parameter name."""
        out = {}
        for n in self.names(group):
            g = self._params[n].grad
            if g is not None:
                out[n] = g
        return out

    # checkpoint container: meta.json + one raw little-endian f64 file per param
    def save(self, directory, extra_meta=None):
        os.makedirs(directory, exist_ok=True)
        meta = {"params": [], "extra": extra_meta or {}}
        for name, t in sorted(self._params.items()):
            fname = name.replace("/", "__") + ".bin"
            t.data.astype("<f8").tofile(os.path.join(directory, fname))
            meta["params"].append(
                {"name": name, "shape": list(t.shape), "group": self._groups[name], "file": fname}
            )
        with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)

    def load(self, directory):
        with open(os.path.join(directory, "meta.json"), encoding="utf-8") as f:
            meta = json.load(f)
        for rec in meta["params"]:
            data = np.fromfile(os.path.join(directory, rec["file"]), dtype="<f8")
            data = data.reshape(rec["shape"])
            if rec["name"] in self._params:
                t = self._params[rec["name"]]
                if list(t.shape) != rec["shape"]:
                    raise _shape_err(f"checkpoint load of {rec['name']}", t.shape, rec["shape"])
                t.data = data
            else:
                self.add(rec["name"], data, group=rec.get("group", "w"))
        return meta.get("extra", {})


def glorot(rng, fan_out, fan_in):
    """Uniform Glorot init for an (fan_out, fan_in) weight matrix."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))
