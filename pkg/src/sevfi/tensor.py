"""Dense n-d tensors on numpy with a reverse-mode gradient tape.

Layout is [batch, channel, height, width]; coordinates are (x right, y down).
Convolutions zero-pad, warping samples use a zero border, resizing clamps to
the edge. Every op output is checked finite; NaN/Inf raises NumericalError.

The tape is define-by-run: ops append a node to the innermost active
``Tape`` whenever an input requires grad, and ``backward`` replays nodes in
reverse execution order. Gradients of intermediate tensors are freed as soon
as their producer has run; leaf gradients accumulate across calls.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import NumericalError

_FLOATS = (np.float32, np.float64)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out, backward):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of executed operations (topological by construction)."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TLS.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TLS.stack.pop()
        assert popped is self
        return False


class _Stack(threading.local):
    def __init__(self):
        self.stack = []


_TLS = _Stack()


def active_tape():
    return _TLS.stack[-1] if _TLS.stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        a, b = self, _as_tensor(other, self)
        _binary_check(a, b)
        return _binary(a, b, a.data + b.data, "add",
                       lambda g: g, lambda g: g)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _as_tensor(other, self)
        _binary_check(a, b)
        return _binary(a, b, a.data - b.data, "sub",
                       lambda g: g, lambda g: -g)

    def __rsub__(self, other):
        return _as_tensor(other, self).__sub__(self)

    def __mul__(self, other):
        a, b = self, _as_tensor(other, self)
        _binary_check(a, b)
        return _binary(a, b, a.data * b.data, "mul",
                       lambda g: g * b.data, lambda g: g * a.data)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return self * (1.0 / float(other))

    def __neg__(self):
        x = self
        out = Tensor(-x.data)
        return _track(out, [x], lambda g: _accum(x, -g))

    def abs(self):
        x = self
        out = Tensor(np.abs(x.data))
        sgn = np.sign(x.data)
        return _track(out, [x], lambda g: _accum(x, g * sgn))

    def exp(self):
        x = self
        with np.errstate(over="ignore"):
            y = np.exp(x.data)
        _check_finite(y, "exp")
        out = Tensor(y)
        return _track(out, [x], lambda g: _accum(x, g * y))

    def sqrt(self):
        x = self
        y = np.sqrt(x.data)
        _check_finite(y, "sqrt")
        out = Tensor(y)
        inv = 0.5 / y
        return _track(out, [x], lambda g: _accum(x, g * inv))

    def tanh(self):
        x = self
        y = np.tanh(x.data)
        out = Tensor(y)
        return _track(out, [x], lambda g: _accum(x, g * (1.0 - y * y)))

    def sigmoid(self):
        x = self
        d = x.data
        y = np.empty_like(d)
        pos = d >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ex = np.exp(d[~pos])
        y[~pos] = ex / (1.0 + ex)
        out = Tensor(y)
        return _track(out, [x], lambda g: _accum(x, g * y * (1.0 - y)))

    def relu(self):
        x = self
        mask = x.data > 0
        out = Tensor(np.where(mask, x.data, 0.0))
        return _track(out, [x], lambda g: _accum(x, g * mask))

    def leaky_relu(self, alpha=0.1):
        x = self
        mask = x.data > 0
        out = Tensor(np.where(mask, x.data, alpha * x.data))
        slope = np.where(mask, 1.0, alpha).astype(x.dtype)
        return _track(out, [x], lambda g: _accum(x, g * slope))

    def clamp(self, lo, hi):
        x = self
        out = Tensor(np.clip(x.data, lo, hi))
        mask = ((x.data > lo) & (x.data < hi)).astype(x.dtype)
        return _track(out, [x], lambda g: _accum(x, g * mask))

    def sum(self):
        x = self
        out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
        return _track(out, [x],
                      lambda g: _accum(x, np.full_like(x.data, g)))

    def mean(self):
        x = self
        out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
        inv = 1.0 / x.data.size
        return _track(out, [x],
                      lambda g: _accum(x, np.full_like(x.data, g * inv)))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        out = Tensor(x.data.reshape(shape))
        old = x.data.shape
        return _track(out, [x], lambda g: _accum(x, g.reshape(old)))


# -- tape plumbing -------------------------------------------------------


def _track(out, inputs, backward):
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    node = _Node(out, backward)
    out._node = node
    out._tape = tape
    tape.nodes.append(node)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss):
    """Reverse accumulation from a scalar loss into leaf gradients."""
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise ValueError("backward expects a scalar Tensor loss")
    if loss._tape is None:
        raise ValueError("loss is not on a tape")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(loss._tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        node.backward(g)
        node.out.grad = None  # intermediates freed; leaves carry no node


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _binary_check(a, b):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"incompatible shapes {a.shape} vs {b.shape} "
                     "(only equal-shape or scalar broadcasting)")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _binary(a, b, data, what, da, db):
    _check_finite(data, what)
    out = Tensor(data)

    def bwd(g):
        _accum(a, _reduce_to(da(g), a.data.shape))
        _accum(b, _reduce_to(db(g), b.data.shape))

    return _track(out, [a, b], bwd)


# -- convolution ---------------------------------------------------------


def _conv_out_size(H, W, kh, kw, stride, padding):
    num_h = H + 2 * padding - kh
    num_w = W + 2 * padding - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ValueError(f"non-integral conv output for input {H}x{W}, "
                         f"kernel {kh}x{kw}, stride {stride}, pad {padding}")
    return num_h // stride + 1, num_w // stride + 1


def _im2col(x, kh, kw, stride, padding):
    """x [N,C,H,W] -> contiguous columns [N, C, kh, kw, Ho, Wo]."""
    N, C, H, W = x.shape
    Ho, Wo = _conv_out_size(H, W, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (N, C, kh, kw, Ho, Wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return np.ascontiguousarray(view), Ho, Wo


def _col2im(dcols, x_shape, stride, padding):
    """dcols [N, C, kh, kw, Ho, Wo] -> gradient w.r.t. the unpadded input."""
    N, C, H, W = x_shape
    kh, kw = dcols.shape[2], dcols.shape[3]
    Ho, Wo = dcols.shape[4], dcols.shape[5]
    dx = np.zeros((N, C, H + 2 * padding, W + 2 * padding), dtype=dcols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            dx[:, :, ky:ky + stride * Ho:stride,
               kx:kx + stride * Wo:stride] += dcols[:, :, ky, kx]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of x [N,C,H,W] with weight [K,C,kh,kw] (+ bias [K])."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    N, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel extents must be odd")
    cols, Ho, Wo = _im2col(x.data, kh, kw, stride, padding)
    cols2 = cols.reshape(N, C * kh * kw, Ho * Wo)
    w2 = weight.data.reshape(K, C * kh * kw)
    out = np.empty((N, K, Ho * Wo), dtype=x.dtype)
    for n in range(N):
        np.matmul(w2, cols2[n], out=out[n])
    out = out.reshape(N, K, Ho, Wo)
    if bias is not None:
        if bias.shape != (K,):
            raise ValueError("conv2d bias must have shape [K]")
        out = out + bias.data.reshape(1, K, 1, 1)
    _check_finite(out, "conv2d")
    result = Tensor(out)
    inputs = [x, weight] + ([bias] if bias is not None else [])

    def bwd(g):
        g2 = g.reshape(N, K, Ho * Wo)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            cols_b, _, _ = _im2col(x.data, kh, kw, stride, padding)
            cb2 = cols_b.reshape(N, C * kh * kw, Ho * Wo)
            dw = np.zeros((K, C * kh * kw), dtype=g.dtype)
            for n in range(N):
                dw += g2[n] @ cb2[n].T
            _accum(weight, dw.reshape(weight.shape))
        if x.requires_grad:
            dcols = np.empty((N, C * kh * kw, Ho * Wo), dtype=g.dtype)
            for n in range(N):
                np.matmul(w2.T, g2[n], out=dcols[n])
            dcols = dcols.reshape(N, C, kh, kw, Ho, Wo)
            _accum(x, _col2im(dcols, x.data.shape, stride, padding))

    return _track(result, inputs, bwd)


# -- bilinear sampling ----------------------------------------------------


def _gather(img, xs, ys):
    """Zero-border bilinear read of img [C,H,W] at float coords.

    Returns (values [C,*coord_shape], parts) where parts carries the four
    neighbour reads needed by the coordinate gradient.
    """
    C, H, W = img.shape
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = xs - x0f
    fy = ys - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    parts = []
    vals = None
    for xi, yi, w in ((x0, y0, (1.0 - fx) * (1.0 - fy)),
                      (x0 + 1, y0, fx * (1.0 - fy)),
                      (x0, y0 + 1, (1.0 - fx) * fy),
                      (x0 + 1, y0 + 1, fx * fy)):
        inb = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        xc = np.clip(xi, 0, W - 1)
        yc = np.clip(yi, 0, H - 1)
        v = img[:, yc, xc] * inb
        contrib = v * w
        vals = contrib if vals is None else vals + contrib
        parts.append((v, w, xi, yi, inb))
    return vals, (parts, fx, fy)


def _scatter(shape, xs, ys, dvals, dtype):
    """Transpose of _gather: route dvals [C,*S] back onto a [C,H,W] grid."""
    C, H, W = shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - np.floor(xs)
    fy = ys - np.floor(ys)
    acc = np.zeros(C * H * W)
    coff = np.arange(C, dtype=np.int64) * (H * W)
    for xi, yi, w in ((x0, y0, (1.0 - fx) * (1.0 - fy)),
                      (x0 + 1, y0, fx * (1.0 - fy)),
                      (x0, y0 + 1, (1.0 - fx) * fy),
                      (x0 + 1, y0 + 1, fx * fy)):
        inb = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        if not inb.any():
            continue
        flat = yi[inb] * W + xi[inb]
        contrib = (dvals * w)[:, inb]
        idx = (coff.reshape(C, 1) + flat.reshape(1, -1)).ravel()
        acc += np.bincount(idx, weights=contrib.reshape(C, -1).ravel(),
                           minlength=C * H * W)
    return acc.reshape(C, H, W).astype(dtype, copy=False)


def _coord_grads(parts, fx, fy, gsum):
    """d(sample)/dx and /dy from the four neighbour reads; gsum [*S]."""
    (v00, _, _, _, _), (v10, _, _, _, _), (v01, _, _, _, _), (v11, _, _, _, _) = parts
    dvdx = ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy)
    dvdy = ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx)
    return (dvdx * gsum).sum(axis=0), (dvdy * gsum).sum(axis=0)


def bilinear_sample(image, coords):
    """Sample image [C,H,W] at coords [2,H',W'] (channel 0 = x, 1 = y)."""
    if image.data.ndim != 3 or coords.data.ndim != 3 or coords.shape[0] != 2:
        raise ValueError("bilinear_sample expects image [C,H,W], coords [2,H',W']")
    xs = coords.data[0]
    ys = coords.data[1]
    vals, aux = _gather(image.data, xs, ys)
    _check_finite(vals, "bilinear_sample")
    out = Tensor(vals)

    def bwd(g):
        if image.requires_grad:
            _accum(image, _scatter(image.shape, xs, ys, g, image.dtype))
        if coords.requires_grad:
            parts, fx, fy = aux
            dx, dy = _coord_grads(parts, fx, fy, g)
            _accum(coords, np.stack([dx, dy]).astype(coords.dtype, copy=False))

    return _track(out, [image, coords], bwd)


# -- deformable convolution ------------------------------------------------


def _deform_cols(x_n, off_n, kh, kw, padding):
    """Columns [C, kh, kw, H, W] of one sample under per-tap offsets."""
    C, H, W = x_n.shape
    gy, gx = np.meshgrid(np.arange(H, dtype=x_n.dtype),
                         np.arange(W, dtype=x_n.dtype), indexing="ij")
    cols = np.empty((C, kh, kw, H, W), dtype=x_n.dtype)
    auxes = []
    for ky in range(kh):
        for kx in range(kw):
            tap = ky * kw + kx
            xs = gx + (kx - padding) + off_n[2 * tap]
            ys = gy + (ky - padding) + off_n[2 * tap + 1]
            vals, aux = _gather(x_n, xs, ys)
            cols[:, ky, kx] = vals
            auxes.append((xs, ys, aux))
    return cols, auxes


def deform_conv(x, offset, weight, bias=None, padding=1):
    """Deformable cross-correlation, stride 1, output same H,W as input.

    offset [N, 2*kh*kw, H, W] holds per-tap (dx, dy) pairs ordered row-major
    over the kernel window. With all offsets zero this reproduces conv2d
    bit-for-bit.
    """
    N, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ValueError(f"deform_conv channel mismatch: input {C}, weight {Cw}")
    if offset.shape != (N, 2 * kh * kw, H, W):
        raise ValueError(f"deform_conv offset shape {offset.shape} != "
                         f"{(N, 2 * kh * kw, H, W)}")
    if padding != (kh - 1) // 2 or padding != (kw - 1) // 2:
        raise ValueError("deform_conv requires padding = (k-1)/2")
    w2 = weight.data.reshape(K, C * kh * kw)
    out = np.empty((N, K, H * W), dtype=x.dtype)
    for n in range(N):
        cols, _ = _deform_cols(x.data[n], offset.data[n], kh, kw, padding)
        np.matmul(w2, cols.reshape(C * kh * kw, H * W), out=out[n])
    out = out.reshape(N, K, H, W)
    if bias is not None:
        out = out + bias.data.reshape(1, K, 1, 1)
    _check_finite(out, "deform_conv")
    result = Tensor(out)
    inputs = [x, offset, weight] + ([bias] if bias is not None else [])

    def bwd(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        g2 = g.reshape(N, K, H * W)
        dw = np.zeros((K, C * kh * kw), dtype=g.dtype) if weight.requires_grad else None
        dx = np.zeros_like(x.data) if x.requires_grad else None
        doff = np.zeros_like(offset.data) if offset.requires_grad else None
        for n in range(N):
            cols, auxes = _deform_cols(x.data[n], offset.data[n], kh, kw, padding)
            if dw is not None:
                dw += g2[n] @ cols.reshape(C * kh * kw, H * W).T
            if dx is None and doff is None:
                continue
            dcols = (w2.T @ g2[n]).reshape(C, kh, kw, H, W)
            for ky in range(kh):
                for kx in range(kw):
                    tap = ky * kw + kx
                    xs, ys, aux = auxes[tap]
                    dvals = dcols[:, ky, kx]
                    if dx is not None:
                        dx[n] += _scatter(x.data[n].shape, xs, ys, dvals, g.dtype)
                    if doff is not None:
                        parts, fx, fy = aux
                        ddx, ddy = _coord_grads(parts, fx, fy, dvals)
                        doff[n, 2 * tap] += ddx
                        doff[n, 2 * tap + 1] += ddy
        if dw is not None:
            _accum(weight, dw.reshape(weight.shape))
        if dx is not None:
            _accum(x, dx)
        if doff is not None:
            _accum(offset, doff)

    return _track(result, inputs, bwd)


# -- resizing --------------------------------------------------------------


def _resize_axis(n_in, n_out, dtype):
    """Half-pixel source coords with edge clamping; exact for 2x up/down."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    f = (src - i0).astype(dtype)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, f


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize over the trailing two axes of a 3-d or 4-d tensor."""
    if x.data.ndim not in (3, 4):
        raise ValueError("resize_bilinear expects a 3-d or 4-d tensor")
    if out_h < 1 or out_w < 1:
        raise ValueError("resize target extents must be positive")
    H, W = x.shape[-2:]
    lead = x.shape[:-2]
    flat = x.data.reshape(-1, H, W)
    y0, y1, fy = _resize_axis(H, out_h, x.dtype)
    x0, x1, fx = _resize_axis(W, out_w, x.dtype)
    rows = flat[:, :, x0] * (1.0 - fx) + flat[:, :, x1] * fx
    out = (rows[:, y0, :] * (1.0 - fy)[None, :, None]
           + rows[:, y1, :] * fy[None, :, None])
    out = out.reshape(lead + (out_h, out_w))
    _check_finite(out, "resize_bilinear")
    result = Tensor(out)

    def bwd(g):
        gf = g.reshape(-1, out_h, out_w)
        ry = np.zeros((out_h, H), dtype=g.dtype)
        np.add.at(ry, (np.arange(out_h), y0), 1.0 - fy)
        np.add.at(ry, (np.arange(out_h), y1), fy)
        rx = np.zeros((out_w, W), dtype=g.dtype)
        np.add.at(rx, (np.arange(out_w), x0), 1.0 - fx)
        np.add.at(rx, (np.arange(out_w), x1), fx)
        mid = np.matmul(ry.T, gf)  # (H,out_h) @ (L,out_h,out_w)
        dx = np.matmul(mid, rx)    # (L,H,out_w) @ (out_w,W)
        _accum(x, dx.reshape(x.data.shape))

    return _track(result, [x], bwd)


def upsample2x(x):
    H, W = x.shape[-2:]
    return resize_bilinear(x, 2 * H, 2 * W)


def downsample2x(x):
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError("downsample2x needs even extents")
    return resize_bilinear(x, H // 2, W // 2)


# -- shape ops --------------------------------------------------------------


def concat_channels(*tensors):
    """Concatenate along the channel axis (axis -3) of 3-d or 4-d tensors."""
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two tensors")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != ref.data.ndim or t.shape[-2:] != ref.shape[-2:]:
            raise ValueError("concat_channels spatial mismatch")
        if t.data.ndim == 4 and t.shape[0] != ref.shape[0]:
            raise ValueError("concat_channels batch mismatch")
    data = np.concatenate([t.data for t in tensors], axis=-3)
    out = Tensor(data)
    widths = [t.shape[-3] for t in tensors]

    def bwd(g):
        start = 0
        for t, w in zip(tensors, widths):
            _accum(t, g[..., start:start + w, :, :])
            start += w

    return _track(out, list(tensors), bwd)


def slice_channels(x, start, stop):
    out = Tensor(np.ascontiguousarray(x.data[..., start:stop, :, :]))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :, :] = g
        _accum(x, full)

    return _track(out, [x], bwd)


def crop2d(x, y0, y1, x0, x1):
    out = Tensor(np.ascontiguousarray(x.data[..., y0:y1, x0:x1]))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[..., y0:y1, x0:x1] = g
        _accum(x, full)

    return _track(out, [x], bwd)


def softmax_channel(x):
    """Per-pixel softmax over the channel axis (axis -3)."""
    d = x.data
    m = d.max(axis=-3, keepdims=True)
    e = np.exp(d - m)
    s = e / e.sum(axis=-3, keepdims=True)
    _check_finite(s, "softmax_channel")
    out = Tensor(s)

    def bwd(g):
        dot = (g * s).sum(axis=-3, keepdims=True)
        _accum(x, s * (g - dot))

    return _track(out, [x], bwd)


# -- pooling / attention helpers --------------------------------------------


def global_avg_pool(x):
    d = x.data
    out = Tensor(d.mean(axis=(-2, -1), keepdims=True))
    hw = d.shape[-2] * d.shape[-1]

    def bwd(g):
        _accum(x, np.broadcast_to(g / hw, d.shape).astype(g.dtype, copy=True))

    return _track(out, [x], bwd)


def global_max_pool(x):
    d = x.data
    lead = d.shape[:-2]
    flat = d.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)
                 .reshape(lead + (1, 1)))

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g.reshape(lead + (1,)), axis=-1)
        _accum(x, dflat.reshape(d.shape))

    return _track(out, [x], bwd)


def channel_mean(x):
    d = x.data
    out = Tensor(d.mean(axis=-3, keepdims=True))
    c = d.shape[-3]

    def bwd(g):
        _accum(x, np.broadcast_to(g / c, d.shape).astype(g.dtype, copy=True))

    return _track(out, [x], bwd)


def channel_max(x):
    d = x.data
    idx = d.argmax(axis=-3, keepdims=True)
    out = Tensor(np.take_along_axis(d, idx, axis=-3))

    def bwd(g):
        dd = np.zeros_like(d)
        np.put_along_axis(dd, idx, g, axis=-3)
        _accum(x, dd)

    return _track(out, [x], bwd)


def mul_channelwise(x, gate):
    """x [N,C,H,W] * gate [N,C,1,1]."""
    out = Tensor(x.data * gate.data)

    def bwd(g):
        _accum(x, g * gate.data)
        if gate.requires_grad:
            _accum(gate, (g * x.data).sum(axis=(-2, -1), keepdims=True))

    return _track(out, [x, gate], bwd)


def mul_pixelwise(x, gate):
    """x [...,C,H,W] * gate [...,1,H,W]."""
    if gate.shape[-3] != 1 or gate.shape[-2:] != x.shape[-2:]:
        raise ValueError("mul_pixelwise gate must be [...,1,H,W] matching x")
    out = Tensor(x.data * gate.data)

    def bwd(g):
        _accum(x, g * gate.data)
        if gate.requires_grad:
            _accum(gate, (g * x.data).sum(axis=-3, keepdims=True))

    return _track(out, [x, gate], bwd)


# -- finite-difference checking ----------------------------------------------


def grad_check(f, params, eps=1e-6):
    """Max relative error between tape gradients and central differences.

    ``f(*params)`` must be a pure scalar-valued tensor function, smooth at
    the probe point (callers keep bilinear coords away from integers and
    kinked penalties away from their kinks).
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape():
        loss = f(*params)
    if loss.data.shape != ():
        raise ValueError("grad_check needs a scalar-valued function")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    max_err = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*params).data)
            flat[i] = orig - eps
            fm = float(f(*params).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            err = abs(aflat[i] - num) / max(abs(aflat[i]), abs(num), 1e-8)
            if err > max_err:
                max_err = err
    return max_err
