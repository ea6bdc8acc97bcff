"""Minimal deterministic reverse-mode autodiff engine over float64 numpy arrays.

Every value is a `Tensor` wrapping a contiguous float64 ndarray. Operations
build a tape of closures; `Tensor.backward()` walks the tape in reverse
topological order and accumulates gradients into `.grad` buffers. All math is
single-threaded numpy, so identical inputs give bitwise-identical outputs.

Non-finite results are treated as errors: every op validates its output when
`FINITE_CHECKS` is on (the default), so NaN/Inf surfaces at the op that
produced it instead of three layers downstream.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "batchnorm",
    "conv2d",
    "conv2d_raw",
    "conv_output_shape",
    "dense",
    "global_avg_pool",
    "h_swish",
    "log_softmax",
    "mean",
    "mul",
    "relu",
    "relu6",
    "softmax_cross_entropy",
    "tensor_sum",
]

FINITE_CHECKS = True


def _check_finite(arr: np.ndarray, what: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")


def _f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


class Tensor:
    """N-dimensional float64 array with optional gradient-tape participation."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f64(data)
        _check_finite(self.data, "Tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

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
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-accumulate gradients from this node through the tape."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = _f64(grad)
            if grad.shape != self.data.shape:
                raise ValueError("seed gradient shape mismatch")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, child_idx = stack.pop()
            if child_idx == 0:
                if id(node) in seen:
                    continue
                seen.add(id(node))
            if child_idx < len(node._prev):
                stack.append((node, child_idx + 1))
                child = node._prev[child_idx]
                if id(child) not in seen:
                    stack.append((child, 0))
            else:
                order.append(node)

        _accumulate(self, grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- scalar/elementwise sugar (same shape or python scalar only) --------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Fresh array on the second accumulation; closures never mutate .grad
    # in place, so sharing a buffer on the first assignment is safe.
    t.grad = g if t.grad is None else t.grad + g


def _needs_tape(parents: Iterable[Tensor]) -> bool:
    return any(p.requires_grad or p._prev for p in parents)


def _op(out_data: np.ndarray, parents: tuple[Tensor, ...], backward, name: str) -> Tensor:
    _check_finite(out_data, name)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if _needs_tape(parents):
        out._prev = parents
        out._backward = backward(out)
    else:
        out._prev = ()
        out._backward = None
    return out


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._prev)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(x: Tensor, y) -> Tensor:
    if isinstance(y, Tensor):
        if x.shape != y.shape:
            raise ValueError(f"add shape mismatch: {x.shape} vs {y.shape}")

        def bw(out):
            def run():
                if _wants_grad(x):
                    _accumulate(x, out.grad)
                if _wants_grad(y):
                    _accumulate(y, out.grad)
            return run

        return _op(x.data + y.data, (x, y), bw, "add")

    c = float(y)

    def bw(out):
        def run():
            if _wants_grad(x):
                _accumulate(x, out.grad)
        return run

    return _op(x.data + c, (x,), bw, "add")


def mul(x: Tensor, y) -> Tensor:
    if isinstance(y, Tensor):
        if x.shape != y.shape:
            raise ValueError(f"mul shape mismatch: {x.shape} vs {y.shape}")
        xd, yd = x.data, y.data

        def bw(out):
            def run():
                if _wants_grad(x):
                    _accumulate(x, out.grad * yd)
                if _wants_grad(y):
                    _accumulate(y, out.grad * xd)
            return run

        return _op(xd * yd, (x, y), bw, "mul")

    c = float(y)

    def bw(out):
        def run():
            if _wants_grad(x):
                _accumulate(x, out.grad * c)
        return run

    return _op(x.data * c, (x,), bw, "mul")


def tensor_sum(x: Tensor) -> Tensor:
    def bw(out):
        def run():
            if _wants_grad(x):
                _accumulate(x, np.full_like(x.data, out.grad.reshape(())))
        return run

    return _op(np.asarray(x.data.sum()), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(out):
        def run():
            if _wants_grad(x):
                _accumulate(x, np.full_like(x.data, out.grad.reshape(()) / n))
        return run

    return _op(np.asarray(x.data.mean()), (x,), bw, "mean")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(out):
        def run():
            if _wants_grad(x):
                _accumulate(x, out.grad * mask)
        return run

    return _op(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6)

    def bw(out):
        def run():
            if _wants_grad(x):
                _accumulate(x, out.grad * mask)
        return run

    return _op(np.clip(x.data, 0.0, 6.0), (x,), bw, "relu6")


def h_swish(x: Tensor) -> Tensor:
    """Hard swish x * clip(x + 3, 0, 6) / 6; global minimum -0.375 at x = -1.5.

    Backward uses the exact piecewise derivative: 0 for x <= -3,
    (2x + 3)/6 between -3 and 3, and 1 for x >= 3.
    """
    xd = x.data
    out_data = xd * np.clip(xd + 3.0, 0.0, 6.0) / 6.0

    def bw(out):
        def run():
            if _wants_grad(x):
                deriv = np.where(xd <= -3.0, 0.0,
                                 np.where(xd >= 3.0, 1.0, (2.0 * xd + 3.0) / 6.0))
                _accumulate(x, out.grad * deriv)
        return run

    return _op(out_data, (x,), bw, "h_swish")


def h_swish_raw(x: np.ndarray) -> np.ndarray:
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


# ---------------------------------------------------------------------------
# dense / pooling
# ---------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map y = x @ weight.T + bias with weight laid out [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"dense shape mismatch: x {x.shape}, weight {weight.shape}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError("dense bias shape mismatch")
        out_data = out_data + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(out):
        def run():
            g = out.grad
            if _wants_grad(x):
                _accumulate(x, g @ weight.data)
            if _wants_grad(weight):
                _accumulate(weight, g.T @ x.data)
            if bias is not None and _wants_grad(bias):
                _accumulate(bias, g.sum(axis=0))
        return run

    return _op(out_data, parents, bw, "dense")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects [N, C, H, W]")
    n, c, h, w = x.shape
    area = h * w

    def bw(out):
        def run():
            if _wants_grad(x):
                g = np.repeat(out.grad[:, :, None], area, axis=2).reshape(n, c, h, w)
                _accumulate(x, g / area)
        return run

    return _op(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_shape(h: int, w: int, kh: int, kw: int,
                      stride, padding) -> tuple[int, int]:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    return oh, ow


def _conv_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None,
                  stride, padding, pad_value: float, groups: int):
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects Cin/groups={cin_g}, input gives {cin // groups}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{wd} with padding {ph},{pw}")

    if ph or pw:
        xp = np.full((n, cin, h + 2 * ph, wd + 2 * pw), float(pad_value))
        xp[:, :, ph:ph + h, pw:pw + wd] = x
    else:
        xp = x

    cols = np.empty((n, cin, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]

    xcol = cols.reshape(n, groups, cin_g * kh * kw, oh * ow)
    wmat = w.reshape(groups, cout // groups, cin_g * kh * kw)
    out = np.matmul(wmat, xcol).reshape(n, cout, oh, ow)
    if bias is not None:
        out += bias[None, :, None, None]
    geometry = (sh, sw, ph, pw, oh, ow)
    return out, xcol, wmat, geometry


def conv2d_raw(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
               stride=1, padding=0, pad_value: float = 0.0,
               groups: int = 1) -> np.ndarray:
    """Graph-free cross-correlation; same semantics as conv2d's forward."""
    out, _, _, _ = _conv_forward(np.asarray(x, dtype=np.float64),
                                 np.asarray(w, dtype=np.float64),
                                 None if bias is None else np.asarray(bias, dtype=np.float64),
                                 stride, padding, pad_value, groups)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, pad_value: float = 0.0,
           groups: int = 1) -> Tensor:
    """2D cross-correlation with constant-value padding.

    Padding is filled with `pad_value` (0.0 default), which generalizes zero
    padding to the negative padding used for asymmetric activations.
    `groups == Cin` gives a depthwise convolution. The pad region is constant,
    so input gradients are simply the zero-padding gradients cropped.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects x [N,Cin,H,W] and weight [Cout,Cin/g,kh,kw]")
    out_data, xcol, wmat, geometry = _conv_forward(
        x.data, weight.data, None if bias is None else bias.data,
        stride, padding, pad_value, groups)
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = weight.shape
    sh, sw, ph, pw, oh, ow = geometry
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(out):
        def run():
            go = out.grad
            gom = go.reshape(n, groups, cout // groups, oh * ow)
            if _wants_grad(weight):
                gw = np.matmul(gom, xcol.transpose(0, 1, 3, 2)).sum(axis=0)
                _accumulate(weight, gw.reshape(weight.shape))
            if _wants_grad(x):
                gcol = np.matmul(wmat.transpose(0, 2, 1), gom)
                gcols = gcol.reshape(n, cin, kh, kw, oh, ow)
                gxp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gcols[:, :, i, j]
                gx = gxp[:, :, ph:ph + h, pw:pw + wd]
                _accumulate(x, np.ascontiguousarray(gx))
            if bias is not None and _wants_grad(bias):
                _accumulate(bias, go.sum(axis=(0, 2, 3)))
        return run

    return _op(out_data, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              momentum: float = 0.1, training: bool = False,
              eps: float = 1e-5, update_running: bool = True) -> Tensor:
    """Per-channel batch normalization over [N, C, H, W].

    Training mode normalizes by batch statistics (population variance) and,
    when `update_running` is set, updates the running buffers in place with
    the standard exponential rule run <- (1 - momentum)*run + momentum*batch.
    Eval mode normalizes by the running buffers. Zero-variance channels are
    safe through eps.
    """
    if x.ndim != 4:
        raise ValueError("batchnorm expects [N, C, H, W]")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("gamma/beta must have shape [C]")

    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_running:
            running_mean *= (1.0 - momentum)
            running_mean += momentum * mu
            running_var *= (1.0 - momentum)
            running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(out):
        def run():
            go = out.grad
            if _wants_grad(gamma):
                _accumulate(gamma, (go * xhat).sum(axis=(0, 2, 3)))
            if _wants_grad(beta):
                _accumulate(beta, go.sum(axis=(0, 2, 3)))
            if _wants_grad(x):
                gscaled = go * gamma.data[None, :, None, None]
                if training:
                    m_g = gscaled.mean(axis=(0, 2, 3))
                    m_gx = (gscaled * xhat).mean(axis=(0, 2, 3))
                    gx = inv_std[None, :, None, None] * (
                        gscaled - m_g[None, :, None, None]
                        - xhat * m_gx[None, :, None, None])
                else:
                    gx = gscaled * inv_std[None, :, None, None]
                _accumulate(x, gx)
        return run

    return _op(out_data, (x, gamma, beta), bw, "batchnorm")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _log_softmax_raw(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError("log_softmax expects [N, K]")
    out_data = _log_softmax_raw(x.data)
    probs = np.exp(out_data)

    def bw(out):
        def run():
            if _wants_grad(x):
                g = out.grad
                _accumulate(x, g - probs * g.sum(axis=1, keepdims=True))
        return run

    return _op(out_data, (x,), bw, "log_softmax")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels against softmax(logits)."""
    if logits.ndim != 2:
        raise ValueError("softmax_cross_entropy expects logits [N, K]")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must have shape [N]")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")

    logp = _log_softmax_raw(logits.data)
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def bw(out):
        def run():
            if _wants_grad(logits):
                g = probs.copy()
                g[np.arange(n), labels] -= 1.0
                _accumulate(logits, g * (out.grad.reshape(()) / n))
        return run

    return _op(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")
