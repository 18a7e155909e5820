"""A small reverse-mode autodiff tape over float64 numpy arrays.

Only what the per-cell networks need is provided: dense layers, a few
activations, reductions, a sparse gather (``weighted_sum``) used to resample
maps, and the losses.  Each op records a backward rule on the result; calling
``Value.backward()`` walks the graph once in reverse topological order.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class Value:
    """A node on the tape: array data, accumulated grad, parents, backward rule."""

    __slots__ = ("data", "grad", "parents", "_backward", "op")

    def __init__(self, data, parents=(), backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def _acc(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != data shape {self.data.shape} ({self.op})")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, seed=None):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() on a non-scalar needs an explicit seed")
            seed = np.ones_like(self.data)
        self._acc(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self.op!r})"


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape`` (scalar or row-bias only)."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return np.asarray(g.sum()).reshape(shape)
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    raise ValueError(f"unsupported broadcast {shape} -> {g.shape}")


def _check_pair(a: Value, b: Value, op: str):
    sa, sb = a.data.shape, b.data.shape
    ok = (sa == sb or sa in ((), (1,)) or sb in ((), (1,))
          or (len(sa) == 2 and sb == (sa[1],)) or (len(sb) == 2 and sa == (sb[1],)))
    if not ok:
        raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_pair(a, b, "add")
    out = Value(a.data + b.data, (a, b), op="add")

    def bw(g):
        a._acc(_unbroadcast(g, a.data.shape))
        b._acc(_unbroadcast(g, b.data.shape))
    out._backward = bw
    return out


def sub(a, b) -> Value:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_pair(a, b, "mul")
    out = Value(a.data * b.data, (a, b), op="mul")

    def bw(g):
        a._acc(_unbroadcast(g * b.data, a.data.shape))
        b._acc(_unbroadcast(g * a.data, b.data.shape))
    out._backward = bw
    return out


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_pair(a, b, "div")
    out = Value(a.data / b.data, (a, b), op="div")

    def bw(g):
        a._acc(_unbroadcast(g / b.data, a.data.shape))
        b._acc(_unbroadcast(-g * a.data / b.data ** 2, b.data.shape))
    out._backward = bw
    return out


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Value(a.data @ b.data, (a, b), op="matmul")

    def bw(g):
        a._acc(g @ b.data.T)
        b._acc(a.data.T @ g)
    out._backward = bw
    return out


def concat(values, axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    ax = axis % values[0].data.ndim
    for v in values[1:]:
        if v.data.ndim != values[0].data.ndim or any(
                v.data.shape[i] != values[0].data.shape[i] for i in range(v.data.ndim) if i != ax):
            raise ValueError("concat: incompatible shapes")
    sizes = [v.data.shape[ax] for v in values]
    out = Value(np.concatenate([v.data for v in values], axis=ax), values, op="concat")

    def bw(g):
        for v, part in zip(values, np.split(g, np.cumsum(sizes)[:-1], axis=ax)):
            v._acc(part)
    out._backward = bw
    return out


def reshape(a, shape) -> Value:
    a = as_value(a)
    out = Value(a.data.reshape(shape), (a,), op="reshape")
    out._backward = lambda g: a._acc(np.reshape(g, a.data.shape))
    return out


def _unary(a, fwd, dfn, op):
    a = as_value(a)
    y = fwd(a.data)
    out = Value(y, (a,), op=op)
    out._backward = lambda g: a._acc(g * dfn(a.data, y))
    return out


def relu(a) -> Value:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64), "relu")


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid(a) -> Value:
    return _unary(a, _sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Value:
    return _unary(a, _softplus, lambda x, y: _sigmoid(x), "softplus")


def log(a) -> Value:
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def exp(a) -> Value:
    return _unary(a, np.exp, lambda x, y: y, "exp")


def power(a, p: float) -> Value:
    return _unary(a, lambda x: x ** p, lambda x, y: p * x ** (p - 1), f"pow{p}")


def softmax(a) -> Value:
    """Softmax over the last axis."""
    a = as_value(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Value(s, (a,), op="softmax")
    out._backward = lambda g: a._acc(s * (g - np.sum(g * s, axis=-1, keepdims=True)))
    return out


def log_softmax(a) -> Value:
    a = as_value(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Value(ls, (a,), op="log_softmax")
    out._backward = lambda g: a._acc(g - np.exp(ls) * g.sum(axis=-1, keepdims=True))
    return out


def mean(a) -> Value:
    a = as_value(a)
    n = a.data.size
    out = Value(a.data.mean(), (a,), op="mean")
    out._backward = lambda g: a._acc(np.full(a.data.shape, float(g) / n))
    return out


def sum_(a, axis=None) -> Value:
    a = as_value(a)
    out = Value(a.data.sum(axis=axis), (a,), op="sum")

    def bw(g):
        if axis is None:
            a._acc(np.full(a.data.shape, float(g)))
        else:
            a._acc(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))
    out._backward = bw
    return out


def pick(a, index) -> Value:
    """``out[i] = a[i, index[i]]`` for a 2-D value."""
    a = as_value(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = Value(a.data[rows, index], (a,), op="pick")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, index), g)
        a._acc(full)
    out._backward = bw
    return out


def weighted_sum(a, index, weights) -> Value:
    """Sparse gather-combine along axis 0: ``out[j] = sum_k w[j,k] * a[index[j,k]]``.

    This is the linear map behind bilinear resampling of per-cell maps.
    """
    a = as_value(a)
    index = np.asarray(index, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if index.shape != weights.shape or index.ndim != 2:
        raise ValueError("weighted_sum: index and weights must share a 2-D shape")
    gathered = a.data[index]                                  # (J, K, ...)
    w = weights.reshape(weights.shape + (1,) * (a.data.ndim - 1))
    out = Value(np.sum(gathered * w, axis=1), (a,), op="weighted_sum")

    def bw(g):
        contrib = g[:, None] * w                              # (J, K, ...)
        flat = contrib.reshape((-1,) + a.data.shape[1:])
        full = np.zeros_like(a.data)
        np.add.at(full, index.ravel(), flat)
        a._acc(full)
    out._backward = bw
    return out


# --------------------------------------------------------------------------
# losses

def focal_loss(logits, target, alpha: float = 1.0, gamma: float = 2.0) -> Value:
    """Mean over cells of ``-alpha (1 - p_t)^gamma log p_t``."""
    logits = as_value(logits)
    target = np.asarray(target, dtype=np.int64)
    if np.any(target < 0) or np.any(target >= logits.data.shape[-1]):
        raise ValueError("focal_loss: target class out of range")
    lp = pick(log_softmax(logits), target)
    if gamma == 0:
        return mul(mean(lp), -alpha)
    pt = exp(lp)
    mod = power(sub(1.0, pt), gamma) if gamma != 1 else sub(1.0, pt)
    return mul(mean(mul(mod, lp)), -alpha)


def cross_entropy(logits, target) -> Value:
    logits = as_value(logits)
    return mul(mean(pick(log_softmax(logits), target)), -1.0)


def nll_of_probs(probs, target, floor: float = 1e-12) -> Value:
    """Cross-entropy when the prediction is already a distribution."""
    p = pick(probs, target)
    return mul(mean(log(add(p, floor))), -1.0)


def kl_div(p, q):
    """``sum_k p_k (ln p_k - ln q_k)`` with ``0 ln 0 := 0``; ``q`` may be a Value.

    For 2-D inputs the divergence is taken per row and averaged.
    """
    p = np.asarray(p, dtype=np.float64)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    if isinstance(q, Value):
        cross = sum_(mul(log(q), p), axis=-1) if p.ndim > 1 else sum_(mul(log(q), p))
        ent = np.sum(plogp, axis=-1)
        kl = sub(ent, cross)
        return mean(kl) if p.ndim > 1 else kl
    q = np.asarray(q, dtype=np.float64)
    kl = np.sum(plogp, axis=-1) - np.sum(np.where(p > 0, p * np.log(q), 0.0), axis=-1)
    return float(np.mean(kl)) if np.ndim(kl) else float(kl)


# --------------------------------------------------------------------------
# dense networks

ACTIVATIONS = {"linear": 0, "relu": 1, "sigmoid": 2, "softplus": 3}
_ACT_FN = {"linear": lambda v: v, "relu": relu, "sigmoid": sigmoid, "softplus": softplus}


@dataclass
class DenseLayer:
    weight: np.ndarray          # (in, out)
    bias: np.ndarray            # (out,)
    activation: str = "linear"


@dataclass
class DenseNet:
    layers: list = field(default_factory=list)

    @classmethod
    def init(cls, dims, activations, rng: np.random.Generator, zero: bool = False) -> "DenseNet":
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = np.zeros((a, b)) if zero else rng.normal(0.0, np.sqrt(2.0 / (a + b)), (a, b))
            layers.append(DenseLayer(w, np.zeros(b), activations[i]))
        return cls(layers)

    @property
    def dims(self):
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    def params(self, prefix: str = "") -> dict:
        out = {}
        for i, l in enumerate(self.layers):
            out[f"{prefix}{i}.w"] = l.weight
            out[f"{prefix}{i}.b"] = l.bias
        return out

    def forward(self, x, leaves: dict | None = None, prefix: str = "") -> Value:
        """Forward pass on the tape; ``leaves`` maps param names to leaf Values."""
        h = as_value(x)
        for i, l in enumerate(self.layers):
            w = leaves[f"{prefix}{i}.w"] if leaves else Value(l.weight)
            b = leaves[f"{prefix}{i}.b"] if leaves else Value(l.bias)
            h = _ACT_FN[l.activation](add(matmul(h, w), b))
        return h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Tape-free inference."""
        h = np.asarray(x, dtype=np.float64)
        for l in self.layers:
            z = h @ l.weight + l.bias
            if l.activation == "relu":
                h = np.maximum(z, 0.0)
            elif l.activation == "sigmoid":
                h = _sigmoid(z)
            elif l.activation == "softplus":
                h = _softplus(z)
            else:
                h = z
        return h

    def validate(self):
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError("layer dims do not chain")
        for l in self.layers:
            if not (np.all(np.isfinite(l.weight)) and np.all(np.isfinite(l.bias))):
                raise ValueError("non-finite network parameters")


def leaves_for(params: dict) -> dict:
    return {k: Value(v) for k, v in params.items()}


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam with decoupled weight decay; updates ``params`` in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --------------------------------------------------------------------------
# gradient checking

def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros(x.shape)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


# --------------------------------------------------------------------------
# checkpoint format: b"MVCK", u32 version, u32 layer count, then per layer
# u16 name length, utf-8 name, u8 activation, u32 in, u32 out,
# weight (in*out f64 LE, row-major), bias (out f64 LE)

CKPT_MAGIC = b"MVCK"
CKPT_VERSION = 1


def save_checkpoint(path, nets: dict):
    buf = io.BytesIO()
    layers = [(f"{name}.{i}", l) for name, net in nets.items() for i, l in enumerate(net.layers)]
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(layers)))
    for name, l in layers:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BII", ACTIVATIONS[l.activation], *l.weight.shape))
        buf.write(np.ascontiguousarray(l.weight, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    names = {v: k for k, v in ACTIVATIONS.items()}
    nets: dict = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode()
        off += ln
        act, a, b = struct.unpack_from("<BII", data, off)
        off += 9
        w = np.frombuffer(data, "<f8", a * b, off).reshape(a, b).astype(np.float64)
        off += 8 * a * b
        bias = np.frombuffer(data, "<f8", b, off).astype(np.float64)
        off += 8 * b
        net_name, _ = name.rsplit(".", 1)
        nets.setdefault(net_name, DenseNet()).layers.append(DenseLayer(w, bias, names[act]))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return nets
