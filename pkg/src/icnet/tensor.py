"""Dense NCHW tensor primitives with hand-written gradients.

Activations are plain 4-D numpy arrays (batch, channel, height, width);
trainable tensors are wrapped in :class:`Param`, which carries the gradient
buffer. Every forward op here has a matching ``*_grad`` function.

Accumulation order is fixed everywhere so that identical inputs produce
identical bits: conv2d sums input channels, then kernel rows, then kernel
columns, in ascending order, and adds the bias last.
"""

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided

from icnet import kernels
from icnet.errors import ShapeError

DTYPES = (np.float32, np.float64)


class Param:
    """A trainable tensor and its gradient buffer (same shape and dtype)."""

    __slots__ = ("data", "grad", "decay")

    def __init__(self, data, decay=True):
        data = np.ascontiguousarray(data)
        if data.dtype.type not in DTYPES:
            raise TypeError(f"unsupported dtype {data.dtype}")
        self.data = data
        self.grad = np.zeros_like(data)
        # weight decay applies to conv weights and BN gamma only
        self.decay = decay

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Param(shape={self.data.shape}, dtype={self.data.dtype})"


# ---------------------------------------------------------------------------
# op accounting, used to cross-check the analytic cost model

_op_log = None


@contextmanager
def count_ops():
    """Record ``(kind, per_sample_cost)`` for every op executed in the block."""
    global _op_log
    prev, _op_log = _op_log, []
    try:
        yield _op_log
    finally:
        _op_log = prev


def _record(kind, cost):
    if _op_log is not None:
        _op_log.append((kind, int(cost)))


def _check4(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D NCHW, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{what} has an empty dimension: {x.shape}")


def conv_out_size(n, k, stride, dilation, padding):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


# ---------------------------------------------------------------------------
# convolution


def im2col(xpad, k, stride, dilation, ho, wo):
    """Patch matrix of shape (C*k*k, N*ho*wo), rows ordered (c, ki, kj)."""
    n, c, _, _ = xpad.shape
    sn, sc, sh, sw = xpad.strides
    view = as_strided(
        xpad,
        shape=(c, k, k, n, ho, wo),
        strides=(sc, dilation * sh, dilation * sw, sn, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * k * k, n * ho * wo)


def _conv_geometry(x, weight, stride, dilation, padding):
    _check4(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv weight must be (c_out, c_in, k, k), got {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {c_in}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(f"invalid conv geometry stride={stride} dilation={dilation} padding={padding}")
    ho = conv_out_size(h, k, stride, dilation, padding)
    wo = conv_out_size(w, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be {ho}x{wo} for input {h}x{w}, k={k}, d={dilation}, p={padding}")
    return n, c, h, w, c_out, k, ho, wo


def conv2d_forward(x, weight, bias=None, stride=1, dilation=1, padding=0):
    """Returns ``(y, cols)``; ``cols`` is the patch matrix reused by the backward pass."""
    n, c, h, w, c_out, k, ho, wo = _conv_geometry(x, weight, stride, dilation, padding)
    x = np.ascontiguousarray(x, dtype=weight.dtype)
    xpad = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = im2col(xpad, k, stride, dilation, ho, wo)
    out = np.zeros((c_out, n * ho * wo), dtype=weight.dtype)
    kernels.conv_accumulate(np.ascontiguousarray(weight.reshape(c_out, -1)), cols, out)
    if bias is not None:
        out += bias[:, None]
    _record("conv", c_out * c * k * k * ho * wo)
    y = out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y), cols


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding=0):
    return conv2d_forward(x, weight, bias, stride, dilation, padding)[0]


def conv2d_grad(x, weight, dy, stride=1, dilation=1, padding=0, cols=None):
    """Gradients ``(dx, dweight, dbias)`` of :func:`conv2d`."""
    n, c, h, w, c_out, k, ho, wo = _conv_geometry(x, weight, stride, dilation, padding)
    if dy.shape != (n, c_out, ho, wo):
        raise ShapeError(f"conv2d_grad: dy has shape {dy.shape}, expected {(n, c_out, ho, wo)}")
    if cols is None:
        xpad = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = im2col(np.ascontiguousarray(xpad, dtype=weight.dtype), k, stride, dilation, ho, wo)
    dy2 = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(c_out, -1)
    dweight = (dy2 @ cols.T).reshape(weight.shape)
    dbias = dy.sum(axis=(0, 2, 3))
    dcols = weight.reshape(c_out, -1).T @ dy2
    if k == 1 and stride == 1 and padding == 0:
        dx = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(dx), dweight, dbias
    dxpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=weight.dtype)
    kernels.col2im_add(dcols.reshape(c, k, k, n, ho, wo), dxpad, stride, dilation)
    dx = dxpad[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(dx), dweight, dbias


def conv_transpose2d(x, weight, bias=None, stride=2, padding=0, output_padding=0):
    """Transposed convolution; ``weight`` is (c_in, c_out, k, k).

    Output size is ``(h - 1) * stride - 2 * padding + k + output_padding``.
    """
    _check4(x)
    n, c, h, w = x.shape
    c_in, c_out, k, _ = weight.shape
    if c != c_in:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {c}, weight expects {c_in}")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d output would be {ho}x{wo}")
    x2 = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=weight.dtype).reshape(c, -1)
    cols = weight.reshape(c_in, -1).T @ x2
    hp = max((h - 1) * stride + k, padding + ho)
    wp = max((w - 1) * stride + k, padding + wo)
    ypad = np.zeros((n, c_out, hp, wp), dtype=weight.dtype)
    kernels.col2im_add(cols.reshape(c_out, k, k, n, h, w), ypad, stride, 1)
    y = ypad[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        y = y + bias[None, :, None, None]
    _record("deconv", c_in * c_out * k * k * h * w)
    return np.ascontiguousarray(y)


def conv_transpose2d_grad(x, weight, dy, stride=2, padding=0, output_padding=0):
    n, c, h, w = x.shape
    c_in, c_out, k, _ = weight.shape
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if dy.shape != (n, c_out, ho, wo):
        raise ShapeError(f"conv_transpose2d_grad: dy has shape {dy.shape}, expected {(n, c_out, ho, wo)}")
    hp = max((h - 1) * stride + k, padding + ho)
    wp = max((w - 1) * stride + k, padding + wo)
    dypad = np.zeros((n, c_out, hp, wp), dtype=weight.dtype)
    dypad[:, :, padding : padding + ho, padding : padding + wo] = dy
    cols = im2col(dypad, k, stride, 1, h, w)
    x2 = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=weight.dtype).reshape(c, -1)
    w2 = weight.reshape(c_in, -1)
    dx = (w2 @ cols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
    dweight = (x2 @ cols.T).reshape(weight.shape)
    dbias = dy.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dweight, dbias


# ---------------------------------------------------------------------------
# resampling


def _interp_coords(n_in, n_out):
    """Corner-aligned source indices (lo, hi) and fractions for each output."""
    if n_out == 1 or n_in == 1:
        z = np.zeros(n_out, dtype=np.intp)
        return z, z, np.zeros(n_out)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(np.intp), n_in - 2)
    return lo, lo + 1, src - lo


def _interp_matrix(n_in, n_out, dtype):
    """The same interpolation as a dense (n_out, n_in) matrix."""
    lo, hi, f = _interp_coords(n_in, n_out)
    a = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(a, (rows, lo), 1 - f)
    np.add.at(a, (rows, hi), f)
    return a


def bilinear_resize(x, out_h, out_w):
    """Corner-aligned bilinear resize: source coordinate = dst * (in - 1) / (out - 1).

    Each 1-D pass evaluates ``a + f * (b - a)`` so constants and linear ramps
    come through exactly.
    """
    _check4(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    _record("resize", c * out_h * out_w)
    if (h, w) == (out_h, out_w):
        return x.copy()
    lo, hi, f = _interp_coords(h, out_h)
    a = x[:, :, lo, :]
    y = a + f.astype(x.dtype)[:, None] * (x[:, :, hi, :] - a)
    lo, hi, f = _interp_coords(w, out_w)
    a = y[..., lo]
    return np.ascontiguousarray(a + f.astype(x.dtype) * (y[..., hi] - a))


def bilinear_resize_grad(x_shape, dy, dtype=None):
    n, c, h, w = x_shape
    out_h, out_w = dy.shape[2:]
    if (h, w) == (out_h, out_w):
        return dy.copy()
    dtype = dtype or dy.dtype
    ah = _interp_matrix(h, out_h, dtype)
    aw = _interp_matrix(w, out_w, dtype)
    return np.ascontiguousarray(ah.T @ dy @ aw)


def nearest_resize(label, out_h, out_w):
    """Nearest-neighbour resize of an integer map (..., H, W), pixel-centre sampling."""
    h, w = label.shape[-2:]
    rows = np.minimum(((np.arange(out_h) * 2 + 1) * h) // (2 * out_h), h - 1)
    cols = np.minimum(((np.arange(out_w) * 2 + 1) * w) // (2 * out_w), w - 1)
    return label[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------------------
# normalisation and pointwise


def batch_norm(x, gamma, beta, running_mean, running_var, eps=1e-5, momentum=0.1, train=True):
    """Returns ``(y, cache)``. Train mode updates the running stats in place."""
    _check4(x)
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ShapeError(f"batch_norm: input has {c} channels, parameters have {gamma.shape[0]}")
    _record("bn", c * x.shape[2] * x.shape[3])
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y.astype(x.dtype, copy=False), (xhat, inv_std, train)


def batch_norm_grad(dy, gamma, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (dxhat - s1 / m - xhat * (s2 / m)) * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


def relu(x):
    _record("relu", x[0].size)
    return np.maximum(x, 0)


def relu_grad(x, dy):
    # subgradient at 0 is 0
    return dy * (x > 0)


def add(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    _record("add", x[0].size)
    return x + y


def concat(xs):
    """Channel concatenation."""
    if len({x.shape[2:] for x in xs}) != 1 or len({x.shape[0] for x in xs}) != 1:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}")
    y = np.concatenate(xs, axis=1)
    _record("concat", y[0].size)
    return y


# ---------------------------------------------------------------------------
# pooling


def pool2d(x, kind, window, stride, padding=0):
    """Returns ``(y, cache)``. Max ties go to the first element in scan order."""
    _check4(x)
    if window < 1 or stride < 1:
        raise ShapeError(f"pool2d window/stride must be >= 1, got {window}/{stride}")
    n, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeError(f"pool2d window {window} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - window) // stride + 1
    wo = (w + 2 * padding - window) // stride + 1
    fill = -np.inf if kind == "max" else 0
    xpad = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill) if padding else x
    xpad = np.ascontiguousarray(xpad)
    sn, sc, sh, sw = xpad.strides
    win = as_strided(xpad, (n, c, ho, wo, window, window), (sn, sc, stride * sh, stride * sw, sh, sw), writeable=False)
    win = win.reshape(n, c, ho, wo, window * window)
    _record("pool", c * ho * wo)
    if kind == "max":
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (kind, x.shape, window, stride, padding, idx)
    if kind == "avg":
        # zero padding counts toward the average
        return win.mean(axis=-1), (kind, x.shape, window, stride, padding, None)
    raise ValueError(f"unknown pool kind {kind!r}")


def pool2d_grad(dy, cache):
    kind, shape, window, stride, padding, idx = cache
    n, c, h, w = shape
    ho, wo = dy.shape[2:]
    dxpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dy.dtype)
    if kind == "max":
        ki, kj = np.divmod(idx, window)
        rows = np.arange(ho)[None, None, :, None] * stride + ki
        cols = np.arange(wo)[None, None, None, :] * stride + kj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dxpad, (nn, cc, rows, cols), dy)
    else:
        share = dy / (window * window)
        for i in range(window):
            for j in range(window):
                dxpad[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += share
    return dxpad[:, :, padding : padding + h, padding : padding + w]


def _bin_edges(size, bins):
    return [(i * size // bins, -(-(i + 1) * size // bins)) for i in range(bins)]


def adaptive_avg_pool2d(x, bins):
    """Average pool onto a ``bins x bins`` grid by even partition of the input."""
    _check4(x)
    n, c, h, w = x.shape
    y = np.empty((n, c, bins, bins), dtype=x.dtype)
    for i, (r0, r1) in enumerate(_bin_edges(h, bins)):
        for j, (c0, c1) in enumerate(_bin_edges(w, bins)):
            y[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    _record("pool", c * bins * bins)
    return y


def adaptive_avg_pool2d_grad(x_shape, dy):
    n, c, h, w = x_shape
    bins = dy.shape[2]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i, (r0, r1) in enumerate(_bin_edges(h, bins)):
        for j, (c0, c1) in enumerate(_bin_edges(w, bins)):
            dx[:, :, r0:r1, c0:c1] += (dy[:, :, i, j] / ((r1 - r0) * (c1 - c0)))[:, :, None, None]
    return dx


# ---------------------------------------------------------------------------
# loss and gradient checking


def softmax_xent_map(logits, labels, ignore=255):
    """Mean pixel cross-entropy over non-ignored pixels.

    ``labels`` is (N, H, W) matching the logits' batch and spatial dims.
    Returns ``(loss, dlogits)``; all-ignored maps give ``(0.0, zeros)``.
    """
    _check4(logits, "logits")
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {(n, h, w)}")
    valid = labels != ignore
    count = int(valid.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, grad
    if np.any(labels[valid] >= c) or np.any(labels[valid] < 0):
        raise ShapeError(f"label values must be < {c} or equal to ignore={ignore}")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    tgt = np.where(valid, labels, 0)
    z_true = np.take_along_axis(z, tgt[:, None], axis=1)[:, 0]
    nll = np.log(se[:, 0]) - z_true
    loss = float(nll[valid].sum() / count)
    prob = ez / se
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, tgt[:, None], 1, axis=1)
    grad = (prob - onehot) * (valid[:, None] / count)
    return loss, grad.astype(logits.dtype, copy=False)


def finite_diff_check(f, x, step=1e-5, grad=None, coords=None, zero_tol=0.0):
    """Max relative error between an analytic gradient and central differences.

    ``f(x)`` returns ``(value, grad)`` (or just the value when ``grad`` is
    supplied). ``x`` is perturbed in place and restored. ``coords`` limits the
    check to the given flat indices. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-12)``; coordinates where both are below
    ``zero_tol`` count as agreeing (a structurally zero gradient, whose
    difference quotient is pure rounding noise).
    """
    if grad is None:
        _, grad = f(x)
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("finite_diff_check needs a contiguous array to perturb")
    g = np.asarray(grad).reshape(-1)
    idx = range(flat.size) if coords is None else coords

    def value(v):
        out = f(v)
        return float(out[0] if isinstance(out, tuple) else out)

    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = value(x)
        flat[i] = orig - step
        fm = value(x)
        flat[i] = orig
        num = (fp - fm) / (2 * step)
        if max(abs(g[i]), abs(num)) < zero_tol:
            continue
        err = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-12)
        worst = max(worst, err)
    return worst
