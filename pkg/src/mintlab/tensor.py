"""A small tape-based reverse-mode autodiff engine.

Layout is channel-last (N, H, W, C).  Ops record onto the innermost active
:class:`Tape` only when one of their inputs requires a gradient, so inference
outside a tape costs nothing extra.

    with Tape() as tape:
        loss = bce_loss(model(x), y)
    tape.backward(loss)
    adam_step(params)
"""
import itertools
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (BatchSizeError, DimensionError, LabelError, NumericalError,
                     ParameterError, UsageError)

_tape_ids = itertools.count(1)
_active_tapes = []

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
BCE_CLAMP = 1e-7
# keep conv patch matrices around this many floats per chunk
_CONV_CHUNK_FLOATS = 1 << 23


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self):
        return sum_(self)


def _not_scalar():
    raise UsageError("item() on a non-scalar tensor")


class Parameter(Tensor):
    """A trainable tensor with its Adam moments attached."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: object
    op: str


class Tape:
    """Ordered record of executed ops for one forward pass."""

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    @property
    def ops(self):
        return [n.op for n in self.nodes]

    def record(self, op, out, parents, backward):
        out.tape_id = self.id
        self.nodes.append(_Node(out, parents, backward, op))

    def backward(self, loss):
        """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``."""
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape_id != self.id:
            raise UsageError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.tape_id == self.id:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    # leaf on this tape: accumulate into its grad slot
                    parent.grad = pg.astype(parent.dtype, copy=False) if parent.grad is None \
                        else parent.grad + pg
        self.nodes.clear()


def backward(tape, loss):
    tape.backward(loss)


def _current_tape(*inputs):
    if not _active_tapes:
        return None
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return _active_tapes[-1]
    return None


def _emit(op, data, inputs, backward_fn):
    """Wrap ``data`` as the output of ``op`` and record it when needed."""
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    tape = _current_tape(*inputs)
    out = Tensor(data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(op, out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise / structural -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sum_(x):
    return _emit("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x, shape):
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def relu(x):
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid_np(z):
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    # exp saturation can round to exactly 0 or 1; keep the open interval
    return np.clip(p, np.finfo(z.dtype).tiny, 1.0 - np.finfo(z.dtype).epsneg)


def sigmoid(x):
    p = _sigmoid_np(x.data)
    return _emit("sigmoid", p, (x,), lambda g: (g * p * (1 - p),))


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}")


# -- layers -------------------------------------------------------------------

def dense(x, W, b):
    if x.data.ndim != 2:
        raise DimensionError(f"dense expects N x Din input, got {x.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"dense shape mismatch: x{x.shape} W{W.shape} b{b.shape}")

    def bwd(g):
        return (g @ W.data.T if x.requires_grad else None,
                x.data.T @ g,
                g.sum(axis=0))

    return _emit("dense", x.data @ W.data + b.data, (x, W, b), bwd)


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, K, b, stride=1, padding=0):
    """Cross-correlation of an N x H x W x Cin batch with a kh x kw x Cin x Cout kernel."""
    if stride < 1 or padding < 0:
        raise ParameterError(f"bad stride/padding {stride}/{padding}")
    if x.data.ndim != 4 or K.data.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d input and kernel, got {x.shape} and {K.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = K.shape
    if kcin != cin or b.shape != (cout,):
        raise DimensionError(f"conv2d channel mismatch: x{x.shape} K{K.shape} b{b.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    kmat = K.data.reshape(-1, cout)
    per_sample = max(1, ho * wo * kh * kw * cin)
    step = max(1, _CONV_CHUNK_FLOATS // per_sample)

    out = np.empty((n, ho, wo, cout), dtype=np.result_type(x.dtype, K.dtype))
    for i in range(0, n, step):
        cols = _kernels.im2col(xp[i:i + step], kh, kw, stride)
        out[i:i + step] = (cols @ kmat).reshape(-1, ho, wo, cout)
    out += b.data

    def bwd(g):
        g2 = g.reshape(n, ho * wo, cout)
        dk = np.zeros_like(kmat)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(0, n, step):
            gi = g2[i:i + step].reshape(-1, cout)
            if K.requires_grad:
                cols = _kernels.im2col(xp[i:i + step], kh, kw, stride)
                dk += cols.T @ gi
            if dxp is not None:
                _kernels.col2im(gi @ kmat.T, dxp[i:i + step], kh, kw, stride, ho, wo)
        dx = None
        if dxp is not None:
            dx = dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp
        return dx, dk.reshape(K.shape), g.sum(axis=(0, 1, 2))

    return _emit("conv2d", out, (x, K, b), bwd)


def maxpool2d(x, window=2, stride=None):
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d needs N x H x W x C input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ParameterError("window and stride must be >= 1")
    if window > x.shape[1] or window > x.shape[2]:
        raise DimensionError(f"pool window {window} exceeds input {x.shape[1]}x{x.shape[2]}")
    out, arg = _kernels.maxpool_fwd(x.data, window, stride)
    return _emit("maxpool2d", out, (x,),
                 lambda g: (_kernels.maxpool_bwd(np.ascontiguousarray(g), arg, x.shape, window, stride),))


def global_avg_pool(x):
    n, h, w, c = x.shape
    return _emit("global_avg_pool", x.data.mean(axis=(1, 2)), (x,),
                 lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),))


class RunningStats:
    """Batch-norm running mean/variance (buffers, not parameters)."""

    def __init__(self, dim, dtype=np.float32):
        self.mean = np.zeros(dim, dtype=dtype)
        self.var = np.ones(dim, dtype=dtype)


def batchnorm1d(x, gamma, beta, mode, running):
    if x.data.ndim != 2:
        raise DimensionError(f"batchnorm1d needs N x D input, got {x.shape}")
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise BatchSizeError(f"batchnorm1d in train mode needs N >= 2, got {n}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running.mean[...] = BN_MOMENTUM * running.mean + (1 - BN_MOMENTUM) * mu
        running.var[...] = BN_MOMENTUM * running.var + (1 - BN_MOMENTUM) * var
    elif mode == "eval":
        mu, var = running.mean, running.var
    else:
        raise ParameterError(f"mode must be train or eval, got {mode!r}")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv
    y = xhat * gamma.data + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        if mode == "train":
            m = x.shape[0]
            dx = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("batchnorm1d", y.astype(x.dtype, copy=False), (x, gamma, beta), bwd)


def dropout(x, rate, mode, rng=None):
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x
    if mode != "train":
        raise ParameterError(f"mode must be train or eval, got {mode!r}")
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = (rng.random(x.shape) >= rate) * scale
    mask = mask.astype(x.dtype, copy=False)
    return _emit("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# -- losses -------------------------------------------------------------------

def bce_loss(pred, target):
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    p = pred.data.reshape(-1)
    t = t.reshape(-1).astype(p.dtype)
    if p.shape != t.shape:
        raise DimensionError(f"pred {pred.shape} and target {t.shape} differ in size")
    if not np.all((t == 0) | (t == 1)):
        raise LabelError("binary targets must be 0 or 1")
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    n = p.size
    loss = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean()
    # gradient taken at the clamped point so saturated predictions still learn
    return _emit("bce_loss", np.asarray(loss, dtype=p.dtype), (pred,),
                 lambda g: ((g * (pc - t) / (pc * (1 - pc)) / n).reshape(pred.shape),))


def softmax_cross_entropy(logits, labels):
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bwd(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (g * d / n,)

    return _emit("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


def l1_penalty(W, coeff):
    if coeff < 0:
        raise ParameterError(f"l1 coefficient must be >= 0, got {coeff}")
    value = np.asarray(coeff * np.abs(W.data).sum(), dtype=W.dtype)
    return _emit("l1_penalty", value, (W,), lambda g: (g * coeff * np.sign(W.data),))


# -- optimizer ----------------------------------------------------------------

def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; clears gradients afterwards."""
    params = list(params)
    if not any(p.grad is not None for p in params):
        raise UsageError("adam_step called with no populated gradients")
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        p.step += 1
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * g * g
        mhat = p.m / (1 - beta1 ** p.step)
        vhat = p.v / (1 - beta2 ** p.step)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)
        p.grad = None
