"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model in this package runs on this tape: values are numpy arrays,
gradients are accumulated by walking the recorded graph backwards from a
scalar loss. All operations fail fast on NaN/Inf outputs. There is no
higher-order differentiation and no GPU path by design.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

Array = np.ndarray


def _ensure_finite(data: Array, op: str) -> Array:
    # min+max is NaN or +-Inf iff the array holds any non-finite entry; two
    # reductions beat allocating an isfinite() bool array on the hot path
    if data.size and not np.isfinite(data.min() + data.max()):
        raise NumericError(f"non-finite values produced by '{op}'")
    return data


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A value node on the gradient tape.

    `data` is always a float64 ndarray. When `requires_grad` is set, ops
    involving this tensor record a backward closure; `backward()` on a
    scalar result fills `.grad` on every reachable leaf.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple["Tensor", ...] = (),
                 backward: Callable[[Array], None] | None = None,
                 _op: str = "tensor"):
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite(arr, _op)
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.size != 1:
            raise DimensionError("backward() requires a scalar root")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _const(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _make(data: Array, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=tuple(parents) if req else (),
                  backward=backward if req else None, _op=op)


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bd = _const(b)
        out_data = a.data + bd

        def bwd(g):
            a.accumulate_grad(_unbroadcast(g, a.shape))

        return _make(out_data, (a,), bwd, "add")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd, "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bd = _const(b)
        out_data = a.data * bd

        def bwd(g):
            a.accumulate_grad(_unbroadcast(g * bd, a.shape))

        return _make(out_data, (a,), bwd, "mul")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bwd, "div")


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    _ensure_finite(out_data, "exp")

    def bwd(g):
        a.accumulate_grad(g * out_data)

    return _make(out_data, (a,), bwd, "exp")


def tlog(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    _ensure_finite(out_data, "log")

    def bwd(g):
        a.accumulate_grad(g / a.data)

    return _make(out_data, (a,), bwd, "log")


def tsqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    _ensure_finite(out_data, "sqrt")

    def bwd(g):
        a.accumulate_grad(g * 0.5 / out_data)

    return _make(out_data, (a,), bwd, "sqrt")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        a.accumulate_grad(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bwd, "tanh")


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        a.accumulate_grad(g * (a.data > 0.0))

    return _make(out_data, (a,), bwd, "relu")


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _make(out_data, (a,), bwd, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        a.accumulate_grad(np.transpose(g, inv))

    return _make(out_data, (a,), bwd, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(out_data, tuple(tensors), bwd, "concat")


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup `table[idx]` with scatter-add backward (embedding gather)."""
    index = np.asarray(idx)
    if index.dtype.kind not in "iu":
        raise DimensionError("gather_rows requires integer indices")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError("gather_rows index out of range")
    out_data = table.data[index]

    def bwd(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, index, g)
        table.accumulate_grad(buf)

    return _make(out_data, (table,), bwd, "gather_rows")


def getitem(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a.accumulate_grad(buf)

    return _make(out_data, (a,), bwd, "getitem")


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else (
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)
    _ensure_finite(out_data, "matmul")

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bwd, "matmul")


# -- fused neural-net ops -------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`; slices sum to 1."""
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x.accumulate_grad(out_data * (g - dot))

    return _make(out_data, (x,), bwd, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def bwd(g):
        x.accumulate_grad(g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), bwd, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Summed negative log-likelihood of integer `targets` under `logits`.

    `logits` is [N x C]; the result is the plain sum over the N positions
    (no mean). Callers that want per-batch scaling divide afterwards.
    """
    t = np.asarray(targets)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects [N x C] logits")
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise DimensionError("cross_entropy targets must be [N] indices")
    c = logits.shape[1]
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError("cross_entropy target index out of range")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(t.shape[0])
    out_data = np.asarray((lse - z[rows, t]).sum())
    _ensure_finite(out_data, "cross_entropy")

    def bwd(g):
        sm = np.exp(z - m)
        sm /= sm.sum(axis=1, keepdims=True)
        sm[rows, t] -= 1.0
        logits.accumulate_grad(float(g) * sm)

    return _make(out_data, (logits,), bwd, "cross_entropy")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gg = g * gain.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gg - m1 - xhat * m2))

    return _make(out_data, (x, gain, bias), bwd, "layernorm")


# -- gradient checking ----------------------------------------------------------

def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` re-evaluates the scalar loss from the current parameter values.
    Relative error per coordinate is |ad - fd| / max(1, |fd|).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    zero_grads(params)
    loss = f()
    if loss.size != 1:
        raise DimensionError("grad_check requires a scalar function")
    loss.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        ga = np.zeros_like(p.data) if g is None else g
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            rel = abs(gflat[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
    zero_grads(params)
    return worst
