# tensor.py - Dense NCHW kernels the network is composed from
'''
Every feature map is a numpy array in batch-channel-height-width layout.
float32 is used for training and inference, float64 for gradient checks
and oracle tests. All kernels here are pure: they never modify their
inputs and return freshly allocated arrays.

Backward kernels live next to their forward kernel so the autograd tape
only has to wire them together.
'''

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.float32, "f64": np.float64}

LN_EPS = 1e-6

_SQRT_HALF = 0.5 ** 0.5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_debug = os.environ.get("RSHAZE_DEBUG", "") not in ("", "0")


def set_debug(enabled=True):
    global _debug
    _debug = bool(enabled)


def debug_enabled():
    return _debug


def check_finite(x, op):
    if _debug and not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return x


def as_tensor(data, dtype="f32"):
    x = np.ascontiguousarray(data, dtype=DTYPES.get(dtype, dtype))
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-4 (n, c, h, w) tensor, got shape {x.shape}")
    return x


# ---------------------------------------------------------------- convolution

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel must be an odd positive integer, got {self.kernel}")
        for field_name in ("in_channels", "out_channels", "stride", "dilation", "groups"):
            if getattr(self, field_name) < 1:
                raise ShapeError(f"{field_name} must be positive")
        if self.padding < 0:
            raise ShapeError("padding must be non-negative")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}"
            )

    @classmethod
    def same(cls, in_channels, out_channels, kernel=1, dilation=1, groups=1, bias=True):
        # stride 1 with p = d(k-1)/2 keeps h, w unchanged
        return cls(in_channels, out_channels, kernel, 1, dilation * (kernel - 1) // 2,
                   dilation, groups, bias)

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    @property
    def span(self):
        return self.dilation * (self.kernel - 1) + 1

    @property
    def param_count(self):
        count = int(np.prod(self.weight_shape))
        return count + self.out_channels if self.bias else count

    def output_hw(self, h, w):
        h_out = (h + 2 * self.padding - self.span) // self.stride + 1
        w_out = (w + 2 * self.padding - self.span) // self.stride + 1
        return h_out, w_out

    def flops(self, h_out, w_out):
        k2 = self.kernel * self.kernel
        return 2 * k2 * (self.in_channels // self.groups) * self.out_channels * h_out * w_out

    @property
    def is_pointwise(self):
        return self.kernel == 1 and self.stride == 1 and self.padding == 0


def _check_conv(x, w, spec):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d expects {spec.in_channels} input channels, got shape {x.shape}")
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"conv2d weight shape {w.shape} != {spec.weight_shape}")
    h, wd = x.shape[2:]
    if spec.span > h + 2 * spec.padding or spec.span > wd + 2 * spec.padding:
        raise ShapeError(f"kernel span {spec.span} larger than padded input {h}x{wd}")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(spec, h_out, w_out):
    k, d, s = spec.kernel, spec.dilation, spec.stride
    for i in range(k):
        for j in range(k):
            yield i, j, (slice(None), slice(None),
                         slice(i * d, i * d + s * (h_out - 1) + 1, s),
                         slice(j * d, j * d + s * (w_out - 1) + 1, s))


def _im2col(xp, spec, h_out, w_out):
    n, c = xp.shape[:2]
    k = spec.kernel
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=xp.dtype)
    for i, j, window in _windows(spec, h_out, w_out):
        cols[:, :, i, j] = xp[window]
    return cols


def _is_depthwise(spec):
    return spec.groups > 1 and spec.groups == spec.in_channels == spec.out_channels


def conv2d(x, w, b, spec):
    _check_conv(x, w, spec)
    n, _, h, wd = x.shape
    g = spec.groups
    cin_g, cout_g = spec.in_channels // g, spec.out_channels // g
    h_out, w_out = spec.output_hw(h, wd)

    if _is_depthwise(spec):
        xp = _pad(x, spec.padding)
        out = np.zeros((n, spec.out_channels, h_out, w_out), dtype=np.result_type(x, w))
        for i, j, window in _windows(spec, h_out, w_out):
            out += w[:, 0, i, j].reshape(1, -1, 1, 1) * xp[window]
    elif g == 1 and spec.is_pointwise:
        out = np.matmul(w.reshape(spec.out_channels, spec.in_channels), x.reshape(n, spec.in_channels, h * wd))
    elif g == 1:
        cols = _im2col(_pad(x, spec.padding), spec, h_out, w_out).reshape(n, -1, h_out * w_out)
        out = np.matmul(w.reshape(spec.out_channels, -1), cols)
    elif spec.is_pointwise:
        wg = w.reshape(g, cout_g, cin_g)
        out = np.einsum("ngchw,goc->ngohw", x.reshape(n, g, cin_g, h, wd), wg, optimize=True)
    else:
        cols = _im2col(_pad(x, spec.padding), spec, h_out, w_out)
        cols = cols.reshape(n, g, cin_g, spec.kernel, spec.kernel, h_out, w_out)
        wg = w.reshape(g, cout_g, cin_g, spec.kernel, spec.kernel)
        out = np.einsum("ngcijhw,gocij->ngohw", cols, wg, optimize=True)

    out = out.reshape(n, spec.out_channels, h_out, w_out)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return check_finite(out, "conv2d")


def _scatter_cols(gcols, xp_shape, dtype, spec, h_out, w_out):
    gxp = np.zeros(xp_shape, dtype=dtype)
    for i, j, window in _windows(spec, h_out, w_out):
        gxp[window] += gcols[:, :, i, j]
    return gxp


def conv2d_backward(grad, x, w, spec, need_x=True, need_w=True):
    n, _, h, wd = x.shape
    g = spec.groups
    cin_g, cout_g = spec.in_channels // g, spec.out_channels // g
    h_out, w_out = grad.shape[2:]
    gx = gw = None
    gb = grad.sum(axis=(0, 2, 3))
    k, p = spec.kernel, spec.padding

    if _is_depthwise(spec):
        xp = _pad(x, p)
        if need_w:
            gw = np.zeros_like(w)
            for i, j, window in _windows(spec, h_out, w_out):
                gw[:, 0, i, j] = (grad * xp[window]).sum(axis=(0, 2, 3))
        if need_x:
            gxp = np.zeros_like(xp)
            for i, j, window in _windows(spec, h_out, w_out):
                gxp[window] += grad * w[:, 0, i, j].reshape(1, -1, 1, 1)
            gx = gxp[:, :, p:p + h, p:p + wd]
        return gx, gw, gb

    if g == 1:
        grad_r = grad.reshape(n, spec.out_channels, h_out * w_out)
        w2 = w.reshape(spec.out_channels, -1)
        if spec.is_pointwise:
            cols = x.reshape(n, spec.in_channels, h * wd)
        else:
            cols = _im2col(_pad(x, p), spec, h_out, w_out).reshape(n, -1, h_out * w_out)
        if need_w:
            gw = np.tensordot(grad_r, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if need_x:
            gcols = np.matmul(w2.T, grad_r)
            if spec.is_pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, spec.in_channels, k, k, h_out, w_out)
                gxp = _scatter_cols(gcols, (n, spec.in_channels, h + 2 * p, wd + 2 * p), x.dtype,
                                    spec, h_out, w_out)
                gx = gxp[:, :, p:p + h, p:p + wd]
        return gx, gw, gb

    grad_g = grad.reshape(n, g, cout_g, h_out, w_out)
    if spec.is_pointwise:
        wg = w.reshape(g, cout_g, cin_g)
        if need_w:
            gw = np.einsum("ngohw,ngchw->goc", grad_g, x.reshape(n, g, cin_g, h, wd),
                           optimize=True).reshape(w.shape)
        if need_x:
            gx = np.einsum("ngohw,goc->ngchw", grad_g, wg, optimize=True).reshape(x.shape)
        return gx, gw, gb

    xp = _pad(x, p)
    wg = w.reshape(g, cout_g, cin_g, k, k)
    if need_w:
        cols = _im2col(xp, spec, h_out, w_out).reshape(n, g, cin_g, k, k, h_out, w_out)
        gw = np.einsum("ngohw,ngcijhw->gocij", grad_g, cols, optimize=True).reshape(w.shape)
    if need_x:
        gcols = np.einsum("ngohw,gocij->ngcijhw", grad_g, wg, optimize=True)
        gcols = gcols.reshape(n, spec.in_channels, k, k, h_out, w_out)
        gxp = _scatter_cols(gcols, xp.shape, xp.dtype, spec, h_out, w_out)
        gx = gxp[:, :, p:p + h, p:p + wd]
    return gx, gw, gb


# ---------------------------------------------------------------- matrices

def matmul(a, b):
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul expects two 2-D or two batched 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(np.matmul(a, b), "matmul")


def matmul_backward(grad, a, b):
    return np.matmul(grad, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), grad)


def softmax_lastdim(x, scale=1.0):
    if x.shape[-1] == 0:
        raise ShapeError("softmax over an empty row")
    s = x * scale
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return check_finite(e / e.sum(axis=-1, keepdims=True), "softmax_lastdim")


def softmax_backward(grad, y, x, scale):
    gs = y * (grad - (grad * y).sum(axis=-1, keepdims=True))
    return gs * scale, (gs * x).sum()


# ---------------------------------------------------------------- normalization / pooling

def normalize_channels(x, eps=LN_EPS):
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    return centered * inv, inv


def layer_norm_channels(x, gamma, beta, eps=LN_EPS):
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer norm affine must have {x.shape[1]} entries")
    xhat, _ = normalize_channels(x, eps)
    return check_finite(xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1),
                        "layer_norm_channels")


def layer_norm_backward(grad, x, gamma, eps=LN_EPS):
    xhat, inv = normalize_channels(x, eps)
    gxhat = grad * gamma.reshape(1, -1, 1, 1)
    gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
    return gx, (grad * xhat).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))


def _pool_bins(size, out):
    # adaptive bins: [floor(i*size/out), ceil((i+1)*size/out))
    return [(i * size // out, -(-(i + 1) * size // out)) for i in range(out)]


def adaptive_avg_pool(x, out_hw=(1, 1)):
    n, c, h, w = x.shape
    oh, ow = out_hw
    if h < 1 or w < 1:
        raise ShapeError("adaptive pooling over an empty spatial extent")
    if (oh, ow) == (1, 1):
        return x.mean(axis=(2, 3), keepdims=True)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i, (h0, h1) in enumerate(_pool_bins(h, oh)):
        for j, (w0, w1) in enumerate(_pool_bins(w, ow)):
            out[:, :, i, j] = x[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
    return out


def adaptive_avg_pool_backward(grad, in_shape):
    n, c, h, w = in_shape
    oh, ow = grad.shape[2:]
    gx = np.zeros(in_shape, dtype=grad.dtype)
    for i, (h0, h1) in enumerate(_pool_bins(h, oh)):
        for j, (w0, w1) in enumerate(_pool_bins(w, ow)):
            area = (h1 - h0) * (w1 - w0)
            gx[:, :, h0:h1, w0:w1] += grad[:, :, i:i + 1, j:j + 1] / area
    return gx


# ---------------------------------------------------------------- rearrangement

def pixel_unshuffle(x, r):
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: {h}x{w} not divisible by {r}")
    out = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out).reshape(n, c * r * r, h // r, w // r)


def pixel_shuffle(x, r):
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    out = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out).reshape(n, c // (r * r), h * r, w * r)


def concat_channels(xs):
    if not xs:
        raise ShapeError("concat of zero tensors")
    ref = (xs[0].shape[0],) + tuple(xs[0].shape[2:])
    for x in xs[1:]:
        if (x.shape[0],) + tuple(x.shape[2:]) != ref:
            raise ShapeError(f"concat_channels: {x.shape} does not match batch/spatial dims {ref}")
    return np.concatenate(xs, axis=1)


def split_channels(x, sizes):
    if sum(sizes) != x.shape[1] or any(s < 0 for s in sizes):
        raise ShapeError(f"split sizes {sizes} do not cover {x.shape[1]} channels")
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(part) for part in np.split(x, bounds, axis=1)]


def reflect_pad_to_multiple(x, multiple):
    h, w = x.shape[2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect"), (h, w)


# ---------------------------------------------------------------- pointwise

def _broadcast_check(x, y, op):
    try:
        np.broadcast_shapes(np.shape(x), np.shape(y))
    except ValueError:
        raise ShapeError(f"{op}: shapes {np.shape(x)} and {np.shape(y)} do not match") from None


def add(x, y):
    _broadcast_check(x, y, "add")
    return check_finite(np.add(x, y), "add")


def sub(x, y):
    _broadcast_check(x, y, "sub")
    return check_finite(np.subtract(x, y), "sub")


def mul(x, y):
    _broadcast_check(x, y, "mul")
    return check_finite(np.multiply(x, y), "mul")


def gelu(x):
    # exact erf form: x * Phi(x)
    return check_finite(0.5 * x * (1.0 + erf(x * _SQRT_HALF)), "gelu")


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def relu(x):
    return np.maximum(x, 0)


ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op, x, y=None):
    if op == "gelu":
        return gelu(x)
    if op not in ELEMENTWISE:
        raise ValueError(f"unknown elementwise op: {op}")
    return ELEMENTWISE[op](x, y)
