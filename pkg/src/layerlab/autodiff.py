"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: each op records its parents together with
vector-Jacobian closures. ``backward`` walks the graph in reverse
topological order and accumulates gradients into every leaf that requires
them. Everything is float64 and single-threaded per graph.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from scipy.special import erf

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used by samplers)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "name")

    def __init__(self, values, requires_grad=False, _parents=(), name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents) -> Tensor:
    """Create an op result; the tape edge is dropped when grads are off or
    no parent participates in differentiation."""
    if _grad_enabled and any(p.requires_grad or p._parents for p, _ in parents):
        return Tensor(values, requires_grad=False, _parents=tuple(parents))
    return Tensor(values)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values + b.values
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.values.shape)),
            (b, lambda g: _unbroadcast(g, b.values.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values * b.values
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g * b.values, a.values.shape)),
            (b, lambda g: _unbroadcast(g * a.values, b.values.shape)),
        ],
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim < 1 or b.values.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.values, b.values)

    def grad_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.values.shape)

    def grad_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.values.shape)

    return _make(out, [(a, grad_a), (b, grad_b)])


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.values, axes), [(a, lambda g: np.transpose(g, inv))])


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.values.shape
    return _make(np.reshape(a.values, shape), [(a, lambda g: np.reshape(g, old))])


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    out = a.values[index]

    def grad_fn(g):
        full = np.zeros_like(a.values)
        full[index] = g
        return full

    return _make(out, [(a, grad_fn)])


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    parents = []
    start = 0
    for t in tensors:
        n = t.values.shape[axis]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(start, start + n)
        parents.append((t, lambda g, sl=tuple(sl): g[sl]))
        start += n
    return _make(out, parents)


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    y = a.values - a.values.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    np.divide(y, y.sum(axis=axis, keepdims=True), out=y)

    def grad_fn(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _make(y, [(a, grad_fn)])


def layer_norm(a, axis=-1, eps=1e-6) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    if eps <= 0:
        raise AutodiffError("layer_norm eps must be positive")
    a = _as_tensor(a)
    mu = a.values.mean(axis=axis, keepdims=True)
    var = a.values.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.values - mu) * inv

    def grad_fn(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return inv * (g - gm - y * gy)

    return _make(y, [(a, grad_fn)])


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.values
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return g * (cdf + x * pdf)

    return _make(out, [(a, grad_fn)])


def embedding_lookup(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.values[ids]

    def grad_fn(g):
        full = np.zeros_like(table.values)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.values.shape[-1]))
        return full

    return _make(out, [(table, grad_fn)])


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.values.mean(axis=axis, keepdims=keepdims)
    n = a.values.size if axis is None else np.prod(
        [a.values.shape[ax] for ax in np.atleast_1d(axis)]
    )

    def grad_fn(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.values.shape) / float(n)

    return _make(out, [(a, grad_fn)])


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.values.shape).copy()

    return _make(out, [(a, grad_fn)])


def mse(pred, target) -> Tensor:
    """Mean squared error against a constant target."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.values.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.values - target
    out = np.mean(diff * diff)

    def grad_fn(g):
        return g * 2.0 * diff / diff.size

    return _make(out, [(pred, grad_fn)])


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss."""
    if loss.values.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g
        for parent, vjp in node._parents:
            pg = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    The learning rate for each step may be supplied by a schedule callback
    (``step(lr=...)``); the constructor value is the fallback.
    """

    def __init__(self, params: dict[str, Tensor], lr=3e-4, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else float(lr)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            if p.grad is None:
                raise AutodiffError(f"parameter {name!r} has no gradient")
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.values -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                p.values -= lr * self.weight_decay * p.values


def linear_warmup_schedule(base_lr: float, warmup_steps: int):
    """Linear warm-up to ``base_lr`` then constant."""

    def lr_at(step: int) -> float:
        if warmup_steps <= 0 or step >= warmup_steps:
            return base_lr
        return base_lr * (step + 1) / warmup_steps

    return lr_at


def warmup_cosine_schedule(base_lr: float, warmup_steps: int, total_steps: int,
                           min_lr: float = 0.0):
    """Linear warm-up to ``base_lr``, then cosine decay to ``min_lr``."""
    if total_steps <= warmup_steps:
        return linear_warmup_schedule(base_lr, warmup_steps)

    def lr_at(step: int) -> float:
        if step < warmup_steps:
            return base_lr * (step + 1) / max(warmup_steps, 1)
        frac = (step - warmup_steps) / (total_steps - warmup_steps)
        return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0)))

    return lr_at


# ---------------------------------------------------------------------------
# Checkpoints: magic + JSON header + little-endian float64 payload.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"LLCKPT1\n"


def save_checkpoint(params: dict[str, Tensor | np.ndarray], path, extra: dict | None = None):
    names = sorted(params)
    header = {"schema_version": 1, "extra": extra or {}, "params": []}
    offset = 0
    payloads = []
    for name in names:
        arr = params[name].values if isinstance(params[name], Tensor) else np.asarray(params[name])
        arr = arr.astype("<f8")
        header["params"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise AutodiffError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start)
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return params, header.get("extra", {})
