"""Differentiable operations over engine Arrays.

Elementwise ops follow numpy broadcasting; their VJPs sum-reduce the output
gradient back to each input's shape. Reductions accept an int or tuple axis.
Shape violations raise EngineError with the op named.
"""

from __future__ import annotations

import numpy as np

from ..errors import EngineError
from . import kernels
from .array import Array, as_array, make_output, stop_grad

__all__ = [
    "add", "sub", "mul", "div", "neg", "pow_", "matmul", "reshape", "transpose",
    "mean", "sum_", "var", "relu", "log", "exp", "sqrt", "softmax", "log_softmax",
    "l2_norm", "frob_norm", "conv2d", "avg_pool2d", "adaptive_avg_pool2d",
    "cell_mean", "batch_norm", "group_norm", "channel_shuffle", "flatten2d",
    "take_rows", "cross_entropy", "kl_div", "sq_err", "stop_grad",
]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce `g` over the axes numpy broadcast to reach g.shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(name, a, b, fwd, vjp_a, vjp_b):
    a, b = as_array(a), as_array(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise EngineError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from exc

    def vjp(g):
        return (_unbroadcast(vjp_a(g, a.data, b.data), a.shape),
                _unbroadcast(vjp_b(g, a.data, b.data), b.shape))

    return make_output(data, (a, b), vjp, name)


def add(a, b) -> Array:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Array:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Array:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Array:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a) -> Array:
    a = as_array(a)
    return make_output(-a.data, (a,), lambda g: (-g,), "neg")


def pow_(a, p: float) -> Array:
    a = as_array(a)
    p = float(p)
    data = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return make_output(data, (a,), vjp, "pow")


def matmul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise EngineError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return make_output(data, (a, b), vjp, "matmul")


def reshape(a, shape) -> Array:
    a = as_array(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise EngineError(f"reshape: cannot reshape {a.shape} to {shape}") from exc

    def vjp(g):
        return (g.reshape(a.shape),)

    return make_output(data, (a,), vjp, "reshape")


def flatten2d(a) -> Array:
    """Collapse all trailing axes: [B, ...] -> [B, prod(...)]."""
    a = as_array(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes) -> Array:
    a = as_array(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise EngineError(f"transpose: invalid axes {axes} for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return make_output(data, (a,), vjp, "transpose")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Array:
    a = as_array(a)
    axes = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.shape),)

    return make_output(data, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Array:
    a = as_array(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg / count, a.shape),)

    return make_output(data, (a,), vjp, "mean")


def var(a, axis=None, keepdims: bool = False) -> Array:
    """Population (biased) variance, composed so the gradient is automatic."""
    a = as_array(a)
    m = mean(a, axis=axis, keepdims=True)
    sq = mean(mul(a, a), axis=axis, keepdims=True)
    out = sub(sq, mul(m, m))
    if not keepdims:
        axes = _norm_axis(axis, a.ndim)
        keep = tuple(s for i, s in enumerate(a.shape) if i not in axes)
        out = reshape(out, keep)
    return out


def relu(a) -> Array:
    a = as_array(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return make_output(np.where(mask, a.data, 0.0), (a,), vjp, "relu")


def log(a) -> Array:
    a = as_array(a)

    def vjp(g):
        return (g / a.data,)

    return make_output(np.log(a.data), (a,), vjp, "log")


def exp(a) -> Array:
    a = as_array(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return make_output(data, (a,), vjp, "exp")


def sqrt(a) -> Array:
    a = as_array(a)
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / data,)

    return make_output(data, (a,), vjp, "sqrt")


def softmax(a, axis: int = -1) -> Array:
    a = as_array(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return make_output(data, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Array:
    a = as_array(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_output(data, (a,), vjp, "log_softmax")


def l2_norm(a) -> Array:
    """Euclidean norm of the flattened input (scalar output).

    Subgradient 0 is used at the origin.
    """
    a = as_array(a)
    norm = float(np.sqrt((a.data * a.data).sum()))

    def vjp(g):
        if norm == 0.0:
            return (np.zeros_like(a.data),)
        return (float(g) * a.data / norm,)

    return make_output(np.float64(norm), (a,), vjp, "l2_norm")


def frob_norm(a) -> Array:
    """Frobenius norm; identical to l2_norm over the flattened entries."""
    return l2_norm(a)


def conv2d(x, w, stride: int = 1, padding: int = 0, groups: int = 1) -> Array:
    """Grouped 2-D cross-correlation: x [B,Cin,H,W], w [Cout,Cin/g,kh,kw]."""
    x, w = as_array(x), as_array(w)
    if x.ndim != 4 or w.ndim != 4:
        raise EngineError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    b_n, cin, h, wd = x.shape
    cout, cig, kh, kw = w.shape
    if cin != cig * groups or cout % groups != 0:
        raise EngineError(
            f"conv2d: channel mismatch (input {cin}, weight {w.shape}, groups {groups})")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise EngineError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if padding:
        xp = np.zeros((b_n, cin, hp, wp), dtype=np.float64)
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    wc = np.ascontiguousarray(w.data)
    data = kernels.conv2d_forward(xp, wc, stride, groups)

    def vjp(g):
        g = np.ascontiguousarray(g)
        gxp = kernels.conv2d_backward_input(g, wc, stride, groups, hp, wp)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        gw = kernels.conv2d_backward_weight(g, xp, stride, groups, kh, kw)
        return (gx, gw)

    return make_output(data, (x, w), vjp, "conv2d")


def avg_pool2d(x, k: int) -> Array:
    """Non-overlapping k x k average pooling; H and W must divide by k."""
    x = as_array(x)
    if x.ndim != 4:
        raise EngineError(f"avg_pool2d: expected 4-D input, got {x.shape}")
    b_n, c, h, w = x.shape
    if h % k or w % k:
        raise EngineError(f"avg_pool2d: window {k} does not divide {h}x{w}")
    blocks = reshape(x, (b_n, c, h // k, k, w // k, k))
    return mean(blocks, axis=(3, 5))


def adaptive_avg_pool2d(x, out_hw) -> Array:
    """Average pooling onto a fixed output grid with floor-split cells."""
    x = as_array(x)
    if x.ndim != 4:
        raise EngineError(f"adaptive_avg_pool2d: expected 4-D input, got {x.shape}")
    b_n, c, h, w = x.shape
    oh, ow = out_hw
    if oh < 1 or ow < 1 or oh > h or ow > w:
        raise EngineError(f"adaptive_avg_pool2d: bad output grid {out_hw} for {h}x{w}")
    hb = [(i * h) // oh for i in range(oh + 1)]
    wb = [(j * w) // ow for j in range(ow + 1)]
    data = np.empty((b_n, c, oh, ow), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            data[:, :, i, j] = x.data[:, :, hb[i]:hb[i + 1], wb[j]:wb[j + 1]].mean(axis=(2, 3))

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i in range(oh):
            for j in range(ow):
                n = (hb[i + 1] - hb[i]) * (wb[j + 1] - wb[j])
                gx[:, :, hb[i]:hb[i + 1], wb[j]:wb[j + 1]] += g[:, :, i, j, None, None] / n
        return (gx,)

    return make_output(data, (x,), vjp, "adaptive_avg_pool2d")


def cell_mean(x, n_p: int) -> Array:
    """Per-cell mean over batch, channels, and the cell's pixels.

    Cells are n_p x n_p tiles (edge tiles smaller); output shape is
    [ceil(H/n_p), ceil(W/n_p)].
    """
    x = as_array(x)
    if x.ndim != 4:
        raise EngineError(f"cell_mean: expected 4-D input, got {x.shape}")
    b_n, c, h, w = x.shape
    if n_p < 1:
        raise EngineError(f"cell_mean: cell size must be >= 1, got {n_p}")
    if n_p > max(h, w):
        raise EngineError(f"cell_mean: cell size {n_p} exceeds feature map {h}x{w}")
    gh = -(-h // n_p)
    gw = -(-w // n_p)
    data = np.empty((gh, gw), dtype=np.float64)
    for i in range(gh):
        for j in range(gw):
            data[i, j] = x.data[:, :, i * n_p:(i + 1) * n_p, j * n_p:(j + 1) * n_p].mean()

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i in range(gh):
            for j in range(gw):
                cell = gx[:, :, i * n_p:(i + 1) * n_p, j * n_p:(j + 1) * n_p]
                cell += g[i, j] / (b_n * c * cell.shape[2] * cell.shape[3])
        return (gx,)

    return make_output(data, (x,), vjp, "cell_mean")


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Array:
    """Channelwise batch normalization over a [B,C,H,W] input.

    In training mode the batch statistics normalize and update the running
    buffers in place: new = (1-momentum)*old + momentum*batch. Both the
    normalization and the running update use the population variance, so
    stored targets stay commensurable with batch statistics elsewhere.
    """
    x, gamma, beta = as_array(x), as_array(gamma), as_array(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise EngineError(f"batch_norm: bad shapes x={x.shape} gamma={gamma.shape} beta={beta.shape}")
    b_n, c, h, w = x.shape
    n = b_n * h * w

    if training:
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * v
    else:
        m = running_mean
        v = running_var
    inv = 1.0 / np.sqrt(v + eps)
    xh = (x.data - m[None, :, None, None]) * inv[None, :, None, None]
    data = gamma.data[None, :, None, None] * xh + beta.data[None, :, None, None]

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xh).sum(axis=(0, 2, 3))
        gxh = g * gamma.data[None, :, None, None]
        if training:
            s1 = gxh.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxh * xh).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv[None, :, None, None] / n * (n * gxh - s1 - xh * s2)
        else:
            gx = gxh * inv[None, :, None, None]
        return (gx, ggamma, gbeta)

    return make_output(data, (x, gamma, beta), vjp, "batch_norm")


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Array:
    """Per-sample, per-group normalization over [B,C,H,W]."""
    x, gamma, beta = as_array(x), as_array(gamma), as_array(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise EngineError(f"group_norm: bad shapes x={x.shape} gamma={gamma.shape} beta={beta.shape}")
    b_n, c, h, w = x.shape
    if c % groups:
        raise EngineError(f"group_norm: groups {groups} does not divide channels {c}")
    xg = x.data.reshape(b_n, groups, -1)
    m = xg.mean(axis=2, keepdims=True)
    v = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xh = ((xg - m) * inv).reshape(b_n, c, h, w)
    data = gamma.data[None, :, None, None] * xh + beta.data[None, :, None, None]
    n = xg.shape[2]

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xh).sum(axis=(0, 2, 3))
        gxh = (g * gamma.data[None, :, None, None]).reshape(b_n, groups, -1)
        xhg = xh.reshape(b_n, groups, -1)
        s1 = gxh.sum(axis=2, keepdims=True)
        s2 = (gxh * xhg).sum(axis=2, keepdims=True)
        gx = (inv / n * (n * gxh - s1 - xhg * s2)).reshape(b_n, c, h, w)
        return (gx, ggamma, gbeta)

    return make_output(data, (x, gamma, beta), vjp, "group_norm")


def channel_shuffle(x, groups: int) -> Array:
    """Interleave channels across groups (a fixed permutation)."""
    x = as_array(x)
    b_n, c, h, w = x.shape
    if c % groups:
        raise EngineError(f"channel_shuffle: groups {groups} does not divide channels {c}")
    t = reshape(x, (b_n, groups, c // groups, h, w))
    t = transpose(t, (0, 2, 1, 3, 4))
    return reshape(t, (b_n, c, h, w))


def take_rows(x, idx) -> Array:
    """Gather rows along axis 0; the VJP scatter-adds (duplicate-safe)."""
    x = as_array(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise EngineError(f"take_rows: bad index vector for axis of size {x.shape[0]}")
    data = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_output(data, (x,), vjp, "take_rows")


def cross_entropy(logits, labels) -> Array:
    """Mean negative log-likelihood of integer class labels."""
    logits = as_array(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise EngineError(f"cross_entropy: bad shapes logits={logits.shape} labels={labels.shape}")
    onehot = np.zeros(logits.shape, dtype=np.float64)
    onehot[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    picked = mul(log_softmax(logits, axis=1), Array(onehot))
    return neg(div(sum_(picked), float(logits.shape[0])))


def kl_div(p, q) -> Array:
    """KL(p || q) between probability vectors along the last axis, summed."""
    p, q = as_array(p), as_array(q)
    return sum_(mul(p, sub(log(p), log(q))))


def sq_err(a, b) -> Array:
    """Sum of squared differences."""
    d = sub(a, b)
    return sum_(mul(d, d))


def _install_operators():
    Array.__add__ = lambda self, other: add(self, other)
    Array.__radd__ = lambda self, other: add(other, self)
    Array.__sub__ = lambda self, other: sub(self, other)
    Array.__rsub__ = lambda self, other: sub(other, self)
    Array.__mul__ = lambda self, other: mul(self, other)
    Array.__rmul__ = lambda self, other: mul(other, self)
    Array.__truediv__ = lambda self, other: div(self, other)
    Array.__rtruediv__ = lambda self, other: div(other, self)
    Array.__neg__ = lambda self: neg(self)
    Array.__matmul__ = lambda self, other: matmul(self, other)
    Array.__pow__ = lambda self, p: pow_(self, p)


_install_operators()
