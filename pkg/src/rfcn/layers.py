"""Feed-forward layer primitives with explicit forward and backward passes.

All spatial ops use NCHW tensors and the cross-correlation convention (no
kernel flip). Convolution is implemented as im2col + matmul; transposed
convolution is the exact adjoint of convolution with the same kernel, so
deconv_forward(g) equals the grad_x that conv2d_backward would produce for
grad_out = g (plus an output-channel bias).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class ConvKernel:
    """Convolution weights of shape (f, c, k_h, k_w) with stride and zero-pad.

    Used by conv2d (c input channels -> f output channels, bias length f) and
    by deconv2d in transposed orientation (f input channels -> c output
    channels, bias length c).
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be rank 4, got {self.weights.shape}")
        f, c, kh, kw = self.weights.shape
        if min(f, c, kh, kw) < 1:
            raise ShapeError(f"degenerate kernel shape {self.weights.shape}")
        if self.stride < 1 or self.pad < 0:
            raise ShapeError(f"invalid stride {self.stride} / pad {self.pad}")
        if self.bias.ndim != 1 or self.bias.shape[0] not in (f, c):
            raise ShapeError(
                f"bias shape {self.bias.shape} fits neither {f} nor {c} channels")


@dataclass
class LayerActivationCache:
    """Values saved by a forward pass for the matching backward call."""

    kind: str
    input_shape: tuple
    data: dict = field(default_factory=dict)


def _im2col(x, kh, kw, stride):
    """(n, c, h, w) -> (n, c*kh*kw, ho*wo) patch matrix."""
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, ho, wo), (sn, sc, sh, sw, sh * stride, sw * stride))
    return np.ascontiguousarray(windows).reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols, n, c, hp, wp, kh, kw, stride):
    """Adjoint of _im2col: scatter-add patches back into an (n, c, hp, wp) image."""
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    x = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return x


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv_output_dim(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def deconv_output_dim(h, k, stride, pad):
    return (h - 1) * stride + k - 2 * pad


def conv2d_forward(x, k):
    """Cross-correlate x (n, c, h, w) with k, adding bias per output channel."""
    f, c, kh, kw = k.weights.shape
    n, cx, h, w = x.shape
    if cx != c:
        raise ShapeError(f"input has {cx} channels, kernel expects {c}")
    if h + 2 * k.pad < kh or w + 2 * k.pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (pad {k.pad})")
    if k.bias.shape[0] != f:
        raise ShapeError(f"conv bias length {k.bias.shape[0]} != {f} filters")
    xp = _pad(x, k.pad)
    cols, ho, wo = _im2col(xp, kh, kw, k.stride)
    w2 = k.weights.reshape(f, c * kh * kw)
    y = np.matmul(w2, cols).reshape(n, f, ho, wo) + k.bias.reshape(1, f, 1, 1)
    cache = LayerActivationCache("conv", x.shape, {"cols": cols, "out_hw": (ho, wo)})
    return y, cache


def conv2d_backward(grad_out, cache, k):
    """Gradients of conv2d_forward w.r.t. input, weights, and bias."""
    f, c, kh, kw = k.weights.shape
    n, _, h, w = cache.input_shape
    ho, wo = cache.data["out_hw"]
    if grad_out.shape != (n, f, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, f, ho, wo)}")
    cols = cache.data["cols"]
    gy = grad_out.reshape(n, f, ho * wo)
    grad_b = gy.sum(axis=(0, 2))
    grad_w = np.einsum("nfl,nkl->fk", gy, cols).reshape(f, c, kh, kw)
    w2 = k.weights.reshape(f, c * kh * kw)
    grad_cols = np.matmul(w2.T, gy)
    gx = _col2im(grad_cols, n, c, h + 2 * k.pad, w + 2 * k.pad, kh, kw, k.stride)
    p = k.pad
    if p:
        gx = gx[:, :, p:-p, p:-p]
    return gx, grad_w, grad_b


def deconv2d_forward(x, k):
    """Transposed convolution: x (n, f, h, w) -> (n, c, (h-1)S + k_h - 2P, ...)."""
    f, c, kh, kw = k.weights.shape
    n, fx, h, w = x.shape
    if fx != f:
        raise ShapeError(f"input has {fx} channels, transposed kernel expects {f}")
    if k.bias.shape[0] != c:
        raise ShapeError(f"deconv bias length {k.bias.shape[0]} != {c} output channels")
    ho = deconv_output_dim(h, kh, k.stride, k.pad)
    wo = deconv_output_dim(w, kw, k.stride, k.pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"deconv output dims {ho}x{wo} not positive")
    w2 = k.weights.reshape(f, c * kh * kw)
    xf = x.reshape(n, f, h * w)
    cols = np.matmul(w2.T, xf)
    yp = _col2im(cols, n, c, ho + 2 * k.pad, wo + 2 * k.pad, kh, kw, k.stride)
    p = k.pad
    y = yp[:, :, p:-p, p:-p] if p else yp
    y = y + k.bias.reshape(1, c, 1, 1)
    cache = LayerActivationCache("deconv", x.shape, {"xf": xf, "out_hw": (ho, wo)})
    return y, cache


def deconv2d_backward(grad_out, cache, k):
    f, c, kh, kw = k.weights.shape
    n, _, h, w = cache.input_shape
    ho, wo = cache.data["out_hw"]
    if grad_out.shape != (n, c, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, c, ho, wo)}")
    grad_b = grad_out.sum(axis=(0, 2, 3))
    gp = _pad(grad_out, k.pad)
    gcols, _, _ = _im2col(gp, kh, kw, k.stride)
    w2 = k.weights.reshape(f, c * kh * kw)
    grad_x = np.matmul(w2, gcols).reshape(n, f, h, w)
    xf = cache.data["xf"]
    grad_w = np.einsum("nfl,nkl->fk", xf, gcols).reshape(f, c, kh, kw)
    return grad_x, grad_w, grad_b


def maxpool2d_forward(x, window, stride=None):
    """Max pooling; ties break to the first maximum in row-major scan order."""
    stride = stride or window
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    sn, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, c, ho, wo, window, window), (sn, sc, sh * stride, sw * stride, sh, sw))
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = LayerActivationCache(
        "pool", x.shape, {"arg": arg, "window": window, "stride": stride})
    return np.ascontiguousarray(y), cache


def maxpool2d_backward(grad_out, cache):
    n, c, h, w = cache.input_shape
    arg = cache.data["arg"]
    window = cache.data["window"]
    stride = cache.data["stride"]
    if grad_out.shape != arg.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {arg.shape}")
    ho, wo = arg.shape[2], arg.shape[3]
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    iy = oy[None, None] * stride + arg // window
    ix = ox[None, None] * stride + arg % window
    grad_x = np.zeros((n, c, h, w), dtype=grad_out.dtype)
    ni = np.arange(n).reshape(n, 1, 1, 1)
    ci = np.arange(c).reshape(1, c, 1, 1)
    np.add.at(grad_x, (np.broadcast_to(ni, arg.shape), np.broadcast_to(ci, arg.shape), iy, ix),
              grad_out)
    return grad_x


def relu_forward(x):
    cache = LayerActivationCache("relu", x.shape, {"mask": x > 0})
    return np.maximum(x, 0), cache


def relu_backward(grad_out, cache):
    if grad_out.shape != cache.input_shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {cache.input_shape}")
    return grad_out * cache.data["mask"]


def dense_forward(x, w, b):
    """Affine map W x + b on a rank-1 input."""
    if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"dense shapes incompatible: W {w.shape}, x {x.shape}")
    y = w @ x + b
    cache = LayerActivationCache("dense", x.shape, {"x": x})
    return y, cache


def dense_backward(grad_out, cache, w):
    x = cache.data["x"]
    if grad_out.shape[0] != w.shape[0]:
        raise ShapeError(f"grad_out length {grad_out.shape} != {w.shape[0]}")
    grad_x = w.T @ grad_out
    grad_w = np.outer(grad_out, x)
    return grad_x, grad_w, grad_out.copy()


def flatten(x):
    """Row-major linearization to rank 1."""
    return np.ascontiguousarray(x).reshape(-1)


def unflatten(v, shape):
    shape = tuple(int(s) for s in shape)
    if v.size != int(np.prod(shape)):
        raise ShapeError(f"cannot unflatten {v.size} values into {shape}")
    return v.reshape(shape)


def bilinear_kernel(f, c, k, dtype=np.float32):
    """Bilinear-interpolation deconv weights (f, c, k, k), identity across
    matching channel pairs."""
    factor = (k + 1) // 2
    center = factor - 1 if k % 2 == 1 else factor - 0.5
    og = np.ogrid[:k, :k]
    filt = (1 - abs(og[0] - center) / factor) * (1 - abs(og[1] - center) / factor)
    w = np.zeros((f, c, k, k), dtype=dtype)
    for i in range(min(f, c)):
        w[i, i] = filt
    return w
