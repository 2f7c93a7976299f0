"""Dense tensors with reverse-mode automatic differentiation.

Small, CPU-only engine sufficient for spiking-network forward passes and
input-gradient computation. Tensors wrap row-major numpy arrays of rank <= 4
(batch, channel, height, width covers everything here). Default storage is
float32; float64 is supported so finite-difference verification can run at
full precision. Graphs are built per forward pass through parent links and
backward closures, and are discarded once ``backward`` has run.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericsError, PreconditionError

MAX_RANK = 4

# Op kinds whose forward is not differentiable; gradient_check refuses them.
NONSMOOTH_OPS = frozenset({"heaviside"})


class Tensor:
    """A numpy array plus optional autodiff bookkeeping.

    ``grad`` is populated by ``backward()`` on every reachable tensor with
    ``requires_grad``; leaves that do not influence the loss keep ``grad``
    None (read as zero).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds supported maximum {MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op!r}{req})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def item(self) -> float:
        return float(self.data.reshape(()))

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.data.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.data.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.data.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.data.dtype), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    # -- autodiff ----------------------------------------------------------

    def backward(self):
        """Reverse-accumulate gradients from this scalar into the graph."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def _accumulate(t: Tensor, grad: np.ndarray):
    if not t.requires_grad:
        return
    if grad.shape != t.data.shape:
        raise ValueError(f"gradient shape {grad.shape} != data shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _node(data: np.ndarray, parents, op: str, backward) -> Tensor:
    """Record one op result. All primitive outputs must be finite."""
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite output from op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward():
        _accumulate(a, _unbroadcast(out.grad, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad, b.data.shape))

    out = _node(out_data, (a, b), "add", backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward():
        _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out = _node(out_data, (a, b), "mul", backward)
    return out


def neg(a: Tensor) -> Tensor:
    def backward():
        _accumulate(a, -out.grad)

    out = _node(-a.data, (a,), "neg", backward)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward():
        _accumulate(a, out.grad * mask)

    out = _node(np.where(mask, a.data, 0), (a,), "relu", backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward():
        _accumulate(a, out.grad * s * (1.0 - s))

    out = _node(s, (a,), "sigmoid", backward)
    return out


# -- shape ------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    def backward():
        _accumulate(a, out.grad.reshape(a.data.shape))

    out = _node(a.data.reshape(shape), (a,), "reshape", backward)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward():
        _accumulate(a, out.grad.transpose(inverse))

    out = _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose", backward)
    return out


def take_step(a: Tensor, index: int) -> Tensor:
    """Select ``a[index]`` along the leading axis (timestep slicing)."""

    def backward():
        grad = np.zeros_like(a.data)
        grad[index] = out.grad
        _accumulate(a, grad)

    out = _node(a.data[index].copy(), (a,), "take_step", backward)
    return out


def replicate(a: Tensor, count: int) -> Tensor:
    """Stack ``count`` identical copies of ``a`` along a new leading axis."""
    data = np.broadcast_to(a.data, (count,) + a.data.shape).copy()

    def backward():
        _accumulate(a, out.grad.sum(axis=0))

    out = _node(data, (a,), "replicate", backward)
    return out


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    def backward():
        _accumulate(a, np.full_like(a.data, out.grad.reshape(())))

    out = _node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), "sum", backward)
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward():
        _accumulate(a, np.full_like(a.data, out.grad.reshape(()) / n))

    out = _node(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), "mean", backward)
    return out


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes do not compose: {a.data.shape} @ {b.data.shape}")

    def backward():
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    out = _node(a.data @ b.data, (a, b), "matmul", backward)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input against OIHW kernels."""
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects rank-4 input and weight")
    batch, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channels do not match: input {cin}, weight {cin_w}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError("conv2d kernel larger than padded input")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, OH, OW, kh, kw)
    out_data = np.einsum("bcijuv,ocuv->boij", windows, weight.data, optimize=True)
    out_data = np.ascontiguousarray(out_data, dtype=x.data.dtype)
    if bias is not None:
        out_data += bias.data[None, :, None, None]
    oh, ow = out_data.shape[2:]

    def backward():
        g = out.grad
        if weight.requires_grad:
            _accumulate(weight, np.einsum("bcijuv,boij->ocuv", windows, g,
                                          optimize=True).astype(weight.data.dtype))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)).astype(bias.data.dtype))
        if x.requires_grad:
            gx_pad = np.zeros((batch, cin, h + 2 * padding, w + 2 * padding),
                              dtype=x.data.dtype)
            contrib = np.einsum("boij,ocuv->bcijuv", g, weight.data, optimize=True)
            for u in range(kh):
                for v in range(kw):
                    gx_pad[:, :, u:u + oh * stride:stride,
                           v:v + ow * stride:stride] += contrib[:, :, :, :, u, v]
            if padding:
                gx_pad = gx_pad[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gx_pad)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _node(out_data, parents, "conv2d", backward)
    return out


def avgpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Average pooling over square windows; gradient spreads uniformly."""
    if x.data.ndim != 4:
        raise ValueError("avgpool2d expects rank-4 input")
    stride = kernel if stride is None else stride
    if stride < 1:
        raise ValueError("avgpool2d stride must be >= 1")
    batch, c, h, w = x.data.shape
    if h < kernel or w < kernel:
        raise ValueError("avgpool2d window larger than input")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel),
                                                       axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    out_data = windows.mean(axis=(4, 5)).astype(x.data.dtype)
    oh, ow = out_data.shape[2:]
    scale = 1.0 / (kernel * kernel)

    def backward():
        g = out.grad * scale
        gx = np.zeros_like(x.data)
        for u in range(kernel):
            for v in range(kernel):
                gx[:, :, u:u + oh * stride:stride, v:v + ow * stride:stride] += g
        _accumulate(x, gx)

    out = _node(out_data, (x,), "avgpool2d", backward)
    return out


# -- losses -------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Fused softmax + cross-entropy on (batch, classes) logits.

    Uses the log-sum-exp shift for stability. ``labels`` is an integer
    vector of class indices.
    """
    if logits.data.ndim != 2:
        raise ValueError("softmax_cross_entropy expects (batch, classes) logits")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ValueError("labels must be one class index per row")
    n, n_classes = logits.data.shape
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logz
    losses = -log_probs[np.arange(n), labels]
    total = losses.mean() if reduction == "mean" else losses.sum()
    scale = 1.0 / n if reduction == "mean" else 1.0

    def backward():
        probs = np.exp(log_probs)
        probs[np.arange(n), labels] -= 1.0
        _accumulate(logits, (out.grad.reshape(()) * scale * probs).astype(logits.data.dtype))

    out = _node(np.asarray(total, dtype=logits.data.dtype), (logits,),
                "softmax_ce", backward)
    return out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.data.shape != target.data.shape:
        raise ValueError(f"mse shapes differ: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward():
        g = out.grad.reshape(()) * (2.0 / n) * diff
        _accumulate(pred, g.astype(pred.data.dtype))
        _accumulate(target, (-g).astype(target.data.dtype))

    out = _node(np.asarray(np.mean(diff * diff), dtype=pred.data.dtype),
                (pred, target), "mse", backward)
    return out


# -- verification -------------------------------------------------------------


def graph_ops(root: Tensor):
    """Set of op kinds reachable from ``root`` through the recorded graph."""
    return {node.op for node in _toposort(root)}


def gradient_check(f, x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must build its output from smooth primitives only; a graph that
    contains a hard threshold is rejected. Runs in float64 regardless of the
    input dtype so the difference quotient is trustworthy.
    """
    x64 = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True,
                 dtype=np.float64)
    y = f(x64)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ValueError("gradient_check needs a scalar-valued function")
    bad = graph_ops(y) & NONSMOOTH_OPS
    if bad:
        raise PreconditionError(f"function uses non-smooth ops: {sorted(bad)}")
    y.backward()
    analytic = x64.grad if x64.grad is not None else np.zeros_like(x64.data)

    flat = x64.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        for sign, store in ((+1, "hi"), (-1, "lo")):
            probe = flat.copy()
            probe[i] += sign * step
            val = f(Tensor(probe.reshape(x64.data.shape), dtype=np.float64)).item()
            if store == "hi":
                hi = val
            else:
                lo = val
        fd = (hi - lo) / (2.0 * step)
        err = abs(analytic.reshape(-1)[i] - fd) / (abs(fd) + 1e-8)
        worst = max(worst, err)
    return worst
