"""Minimal reverse-mode autodiff engine.

A :class:`Tensor` wraps a numpy array together with an optional gradient
accumulator. Every differentiable operation records a node on the active
:class:`GradTape`; :func:`backward` replays the tape in reverse execution
order (which is a valid reverse-topological order, so each node is visited
exactly once) and accumulates gradients into every reachable tensor with
``requires_grad=True``.

The engine provides exactly the kernels the VAD model needs. There is no
general broadcasting: the only shape mixing supported is adding a 1-D bias
to the rows of a 2-D matrix, and per-channel PReLU slopes.

Production dtype is float32. A float64 mode exists solely so the test
suite can run finite-difference gradient checks at tight tolerances; switch
with :func:`use_dtype`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError, UsageError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the engine dtype (np.float32 or np.float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the engine dtype (float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """n-dimensional float array participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Detached copy of the values."""
        return np.array(self.data, copy=True)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class _Node:
    """One executed operation: output, inputs, and its chain-rule closure."""

    __slots__ = ("op", "output", "inputs", "backward_fn")

    def __init__(self, op: str, output: Tensor, inputs: tuple[Tensor, ...],
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, so iterating in reverse is a
    reverse-topological replay that touches each node once. The tape is
    cleared after :meth:`backward` unless ``retain=True``.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, node: _Node) -> None:
        self._nodes.append(node)

    def clear(self) -> None:
        self._nodes.clear()

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        if loss.data.size != 1:
            raise UsageError(
                f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for node in reversed(self._nodes):
            gout = node.output.grad
            if gout is None:
                continue  # not reachable from the loss
            grads = node.backward_fn(gout)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, copy=True)
                else:
                    inp.grad += g
        if not retain:
            self.clear()


_TAPE = GradTape()


def active_tape() -> GradTape:
    return _TAPE


def backward(loss: Tensor, retain: bool = False) -> None:
    """Populate grads of every tensor reachable from ``loss``.

    Repeated calls without zeroing grads accumulate. The default tape is
    cleared afterwards unless ``retain`` is set.
    """
    _TAPE.backward(loss, retain=retain)


def _make(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
          backward_fn) -> Tensor:
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        _TAPE.record(_Node(op, out, inputs, backward_fn))
    return out


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise / structural kernels
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; same shape, or b a 1-D bias added to the last axis of a."""
    if a.shape == b.shape:
        def bw(g):
            return g, g
        return _make("add", a.data + b.data, (a, b), bw)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bw(g):
            axes = tuple(range(g.ndim - 1))
            return g, g.sum(axis=axes)
        return _make("bias_add", a.data + b.data, (a, b), bw)
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g * b.data, g * a.data
    return _make("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)

    def bw(g):
        return (g * s,)
    return _make("scale", a.data * s, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return _make("matmul", a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)
    return _make("transpose", a.data.transpose(axes), (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape

    def bw(g):
        return (g.reshape(orig),)
    return _make("reshape", a.data.reshape(shape), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make("concat", np.concatenate([t.data for t in parts], axis=axis),
                 tuple(parts), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.full_like(a.data, float(g)),)
    return _make("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        return (np.full_like(a.data, float(g) / n),)
    return _make("mean", np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), bw)


# ---------------------------------------------------------------------------
# neural-net kernels
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). x: [n, in], w: [in, out], b: [out]."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None,
           pad_same: bool = True) -> Tensor:
    """2-D cross-correlation with a 3x3 kernel.

    x: [C_in, H, W], k: [C_out, C_in, 3, 3], b: [C_out]. With ``pad_same``
    the input is zero-padded so output spatial dims equal input dims.
    """
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise DimensionError(
            f"conv2d: expected x[C,H,W] and k[Co,Ci,3,3], got {x.shape} / {k.shape}")
    if k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernel spatial size must be 3x3, got {k.shape}")
    if x.shape[0] != k.shape[1]:
        raise DimensionError(
            f"conv2d: input has {x.shape[0]} channels but kernel expects {k.shape[1]}")

    c_in, h, w = x.shape
    c_out = k.shape[0]
    if pad_same:
        xpad = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
        oh, ow = h, w
    else:
        if h < 3 or w < 3:
            raise DimensionError(
                f"conv2d: input {x.shape} too small for a valid 3x3 window")
        xpad = x.data
        oh, ow = h - 2, w - 2

    patches = np.lib.stride_tricks.sliding_window_view(xpad, (3, 3), axis=(1, 2))
    # patches: [C_in, oh, ow, 3, 3]
    out = np.tensordot(k.data, patches, axes=([1, 2, 3], [0, 3, 4]))

    def bw(g):
        dk = np.tensordot(g, patches, axes=([1, 2], [1, 2]))
        dxpad = np.zeros_like(xpad)
        for di in range(3):
            for dj in range(3):
                dxpad[:, di:di + oh, dj:dj + ow] += np.tensordot(
                    k.data[:, :, di, dj], g, axes=([0], [0]))
        dx = dxpad[:, 1:h + 1, 1:w + 1] if pad_same else dxpad
        return dx, dk
    out_t = _make("conv2d", out, (x, k), bw)
    if b is not None:
        if b.shape != (c_out,):
            raise DimensionError(
                f"conv2d: bias shape {b.shape} does not match {c_out} output channels")

        def bw_bias(g):
            return g, g.sum(axis=(1, 2))
        out_t = _make("conv2d_bias", out_t.data + b.data[:, None, None],
                      (out_t, b), bw_bias)
    return out_t


def maxpool2d(x: Tensor, pool: tuple[int, int] = (2, 1)) -> Tensor:
    """Max pooling over non-overlapping windows; ties go to the lowest flat index."""
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool2d: expected x[C,H,W], got {x.shape}")
    ph, pw = pool
    c, h, w = x.shape
    if h % ph or w % pw:
        raise DimensionError(
            f"maxpool2d: spatial dims {(h, w)} not divisible by pool {pool}")
    oh, ow = h // ph, w // pw
    windows = x.data.reshape(c, oh, ph, ow, pw).transpose(0, 1, 3, 2, 4)
    flat = windows.reshape(c, oh, ow, ph * pw)
    arg = flat.argmax(axis=-1)  # first maximal index on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(c, oh, ow, ph, pw).transpose(0, 1, 3, 2, 4)
        return (dx.reshape(c, h, w),)
    return _make("maxpool2d", out, (x,), bw)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a [C, H, W] grid.

    Statistics are taken over the spatial grid of the single example (this
    engine has no batch axis). In training mode the running statistics are
    updated in place with the given momentum and the batch statistics are
    used for normalization; in eval mode the running statistics are used.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"batchnorm2d: expected x[C,H,W], got {x.shape}")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d: affine params {gamma.shape}/{beta.shape} "
            f"do not match {c} channels")

    if training:
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    if training:
        n = x.shape[1] * x.shape[2]

        def bw(g):
            dgamma = (g * xhat).sum(axis=(1, 2))
            dbeta = g.sum(axis=(1, 2))
            gm = g.mean(axis=(1, 2))
            gxm = (g * xhat).mean(axis=(1, 2))
            dx = (gamma.data * inv_std)[:, None, None] * (
                g - gm[:, None, None] - xhat * gxm[:, None, None])
            return dx, dgamma, dbeta
    else:
        def bw(g):
            dgamma = (g * xhat).sum(axis=(1, 2))
            dbeta = g.sum(axis=(1, 2))
            dx = (gamma.data * inv_std)[:, None, None] * g
            return dx, dgamma, dbeta
    return _make("batchnorm2d", out, (x, gamma, beta), bw)


def prelu(x: Tensor, slopes: Tensor, channel_axis: int = 0) -> Tensor:
    """x for x >= 0, slope * x otherwise, one learnable slope per channel."""
    channel_axis = channel_axis % x.data.ndim
    c = x.shape[channel_axis]
    if slopes.shape != (c,):
        raise DimensionError(
            f"prelu: slopes {slopes.shape} do not match axis {channel_axis} "
            f"of input {x.shape}")
    bshape = [1] * x.data.ndim
    bshape[channel_axis] = c
    a = slopes.data.reshape(bshape)
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != channel_axis)

    def bw(g):
        dx = np.where(neg, a * g, g)
        da = (g * x.data * neg).sum(axis=reduce_axes)
        return dx, da
    return _make("prelu", out, (x, slopes), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last axis, then apply affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm: affine params {gamma.shape}/{beta.shape} "
            f"do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def bw(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        gh = g * gamma.data
        dx = inv_std * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta
    return _make("layernorm", out, (x, gamma, beta), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (numerically stable)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)
    return _make("softmax", out, (x,), bw)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)
    return _make("sigmoid", out, (x,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted dropout; active only in training mode."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        def bw(g):
            return (g,)
        return _make("dropout", x.data.copy(), (x,), bw)
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    scale_ = 1.0 / (1.0 - p)
    mask = keep * scale_

    def bw(g):
        return (g * mask,)
    return _make("dropout", x.data * mask, (x,), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, computed from logits in the fused stable form."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise DimensionError(
            f"bce_with_logits: targets {y.shape} do not match logits {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        return ((_stable_sigmoid(z) - y) * (float(g) / n),)
    return _make("bce_with_logits",
                 np.asarray(loss.mean(), dtype=z.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# finite differences (gradient-check oracle)
# ---------------------------------------------------------------------------

def numeric_gradient(f: Callable[[], float], arr: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function w.r.t. ``arr``.

    ``f`` must recompute the loss from the current contents of ``arr``;
    entries are perturbed in place and restored. Run in float64 mode.
    """
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g
