"""Forward and backward passes for every layer kind the networks use.

Each layer is a small class holding its parameters as :class:`~pdunet.tensor.Tensor`
objects (gradient buffers included) plus whatever forward-pass cache its
backward pass needs.  Backward passes accumulate into ``param.grad`` and
return the gradient with respect to the layer input.

The convolution runs as im2col + one batched BLAS matmul; the column
buffer is rebuilt in backward from the cached padded input so the
steady-state memory cost stays proportional to the feature maps.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateBatchError, LabelError, ShapeError
from .tensor import Tensor


def effective_extent(k: int, dilation: int) -> int:
    """Input span of a dilated kernel: k + (k-1)*(dilation-1)."""
    return k + (k - 1) * (dilation - 1)


def conv_output_extent(size: int, k: int, stride: int, dilation: int,
                       padding: int) -> int:
    return (size + 2 * padding - effective_extent(k, dilation)) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int,
            out_h: int, out_w: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C*k*k, out_h*out_w) columns."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, out_h, out_w),
        strides=(sn, sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
        writeable=False,
    )
    return view.reshape(n, c * k * k, out_h * out_w)


def _col2im(cols: np.ndarray, xp_shape: tuple, k: int, stride: int,
            dilation: int, out_h: int, out_w: int) -> np.ndarray:
    """Scatter-add columns back onto the padded input grid."""
    n, c, hp, wp = xp_shape
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, out_h, out_w)
    for u in range(k):
        hs = u * dilation
        for v in range(k):
            ws = v * dilation
            xp[:, :, hs:hs + stride * out_h:stride,
               ws:ws + stride * out_w:stride] += cols[:, :, u, v]
    return xp


class Conv2d:
    """Square-kernel 2D convolution with dilation, stride and zero padding.

    y[n,o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] * x[n,c, i*s + u*D - p, j*s + v*D - p]
    with out-of-range taps reading zero.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, dilation: int = 1, padding: int = 0,
                 dtype=np.float32):
        if kernel < 1 or stride < 1 or dilation < 1 or padding < 0:
            raise ShapeError("kernel/stride/dilation must be >= 1, padding >= 0")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        self.weight = Tensor(np.zeros(
            (out_channels, in_channels, kernel, kernel), dtype=dtype))
        self.bias = Tensor(np.zeros((1, out_channels, 1, 1), dtype=dtype))
        self._xp = None
        self._out_hw = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def buffers(self):
        return []

    def out_shape(self, x_shape: tuple) -> tuple:
        n, c, h, w = x_shape
        if c != self.in_channels:
            raise ShapeError(
                f"expected {self.in_channels} input channels, got {c}")
        eff = effective_extent(self.kernel, self.dilation)
        if eff > h + 2 * self.padding or eff > w + 2 * self.padding:
            raise ShapeError(
                f"effective kernel {eff} exceeds padded input "
                f"({h + 2 * self.padding}x{w + 2 * self.padding})")
        oh = conv_output_extent(h, self.kernel, self.stride, self.dilation,
                                self.padding)
        ow = conv_output_extent(w, self.kernel, self.stride, self.dilation,
                                self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError("empty convolution output")
        return (n, self.out_channels, oh, ow)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        n, _, oh, ow = self.out_shape(x.shape)
        p = self.padding
        xp = x.data if p == 0 else np.pad(
            x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _im2col(xp, self.kernel, self.stride, self.dilation, oh, ow)
        w2 = self.weight.data.reshape(self.out_channels, -1)
        y = np.matmul(w2[np.newaxis], cols)
        y = y.reshape(n, self.out_channels, oh, ow)
        y += self.bias.data
        self._xp = xp
        self._out_hw = (oh, ow)
        return Tensor(y)

    def backward(self, grad_y: Tensor) -> Tensor:
        if self._xp is None:
            raise RuntimeError("backward called before forward")
        oh, ow = self._out_hw
        gy = grad_y.data
        n = gy.shape[0]
        if gy.shape != (n, self.out_channels, oh, ow):
            raise ShapeError(f"grad shape {gy.shape} does not match forward "
                             f"output {(n, self.out_channels, oh, ow)}")
        g2 = gy.reshape(n, self.out_channels, oh * ow)

        self.bias.ensure_grad()[0, :, 0, 0] += gy.sum(axis=(0, 2, 3))

        cols = _im2col(self._xp, self.kernel, self.stride, self.dilation,
                       oh, ow)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
        self.weight.ensure_grad()[...] += gw.reshape(self.weight.shape)

        w2 = self.weight.data.reshape(self.out_channels, -1)
        gcols = np.matmul(w2.T[np.newaxis], g2)
        gxp = _col2im(gcols, self._xp.shape, self.kernel, self.stride,
                      self.dilation, oh, ow)
        p = self.padding
        gx = gxp if p == 0 else gxp[:, :, p:-p, p:-p]
        return Tensor(gx)


class BatchNorm2d:
    """Per-channel batch normalization over the (N, H, W) axes."""

    def __init__(self, channels: int, momentum: float = 0.1,
                 epsilon: float = 1e-5, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ShapeError("momentum must lie in (0, 1)")
        if epsilon <= 0.0:
            raise ShapeError("epsilon must be positive")
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Tensor(np.ones((1, channels, 1, 1), dtype=dtype))
        self.beta = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype))
        self.running_mean = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype))
        self.running_var = Tensor(np.ones((1, channels, 1, 1), dtype=dtype))
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean),
                ("running_var", self.running_var)]

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {c}")
        xd = x.data
        if train:
            m = n * h * w
            if m == 1:
                raise DegenerateBatchError(
                    "batch statistics are undefined for a single element")
            mean = xd.mean(axis=(0, 2, 3), keepdims=True)
            var = xd.var(axis=(0, 2, 3), keepdims=True)
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            xhat = (xd - mean) * inv_std
            mom = self.momentum
            self.running_mean.data *= 1.0 - mom
            self.running_mean.data += mom * mean
            # running variance uses the unbiased estimate, normalization
            # the biased one
            self.running_var.data *= 1.0 - mom
            self.running_var.data += mom * var * (m / (m - 1))
            self._cache = ("train", xhat, inv_std, m)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var.data + self.epsilon)
            xhat = (xd - self.running_mean.data) * inv_std
            self._cache = ("infer", xhat, inv_std, None)
        return Tensor(self.gamma.data * xhat + self.beta.data)

    def backward(self, grad_y: Tensor) -> Tensor:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        mode, xhat, inv_std, m = self._cache
        gy = grad_y.data
        self.gamma.ensure_grad()[...] += (gy * xhat).sum(
            axis=(0, 2, 3), keepdims=True)
        self.beta.ensure_grad()[...] += gy.sum(axis=(0, 2, 3), keepdims=True)
        dxhat = gy * self.gamma.data
        if mode == "infer":
            return Tensor(dxhat * inv_std)
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
        return Tensor(gx)


class PReLU:
    """Rectifier with a learnable per-channel negative-side slope."""

    def __init__(self, channels: int, init: float = 0.25, dtype=np.float32):
        self.channels = channels
        self.slope = Tensor(np.full((1, channels, 1, 1), init, dtype=dtype))
        self._x = None

    def params(self):
        return [("slope", self.slope)]

    def buffers(self):
        return []

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"expected {self.channels} channels, got {x.shape[1]}")
        self._x = x.data
        return Tensor(np.where(x.data >= 0, x.data, self.slope.data * x.data))

    def backward(self, grad_y: Tensor) -> Tensor:
        xd = self._x
        gy = grad_y.data
        neg = xd < 0
        self.slope.ensure_grad()[...] += np.where(neg, gy * xd, 0.0).sum(
            axis=(0, 2, 3), keepdims=True)
        gx = np.where(neg, gy * self.slope.data, gy)
        return Tensor(gx)


class UpsampleNearest2x:
    """Replicate every pixel into a 2x2 block; backward pools the block sum."""

    def __init__(self):
        self._in_shape = None

    def params(self):
        return []

    def buffers(self):
        return []

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        n, c, h, w = x.shape
        self._in_shape = x.shape
        y = np.broadcast_to(x.data[:, :, :, np.newaxis, :, np.newaxis],
                            (n, c, h, 2, w, 2))
        return Tensor(np.ascontiguousarray(y).reshape(n, c, 2 * h, 2 * w))

    def backward(self, grad_y: Tensor) -> Tensor:
        n, c, h, w = self._in_shape
        gy = grad_y.data
        if gy.shape != (n, c, 2 * h, 2 * w):
            raise ShapeError(f"grad shape {gy.shape} does not match upsampled "
                             f"output {(n, c, 2 * h, 2 * w)}")
        return Tensor(gy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))


class MaxPool2x2:
    """2x2/stride-2 max pooling (used by the original-style network only)."""

    def __init__(self):
        self._cache = None

    def params(self):
        return []

    def buffers(self):
        return []

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"pooling needs even extents, got {h}x{w}")
        blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h // 2, w // 2, 4)
        idx = flat.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return Tensor(np.take_along_axis(
            flat, idx[..., np.newaxis], axis=-1)[..., 0])

    def backward(self, grad_y: Tensor) -> Tensor:
        (n, c, h, w), idx = self._cache
        gflat = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_y.data.dtype)
        np.put_along_axis(gflat, idx[..., np.newaxis],
                          grad_y.data[..., np.newaxis], axis=-1)
        gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(
            0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return Tensor(gx)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two maps along the channel axis, ``a`` first."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat needs matching batch/spatial extents: {a.shape} vs {b.shape}")
    return Tensor(np.concatenate([a.data, b.data], axis=1))


def split_channels(g: Tensor, first_channels: int) -> tuple:
    """Inverse of :func:`concat_channels` for the backward pass."""
    if not 0 < first_channels < g.shape[1]:
        raise ShapeError(f"cannot split {g.shape[1]} channels at "
                         f"{first_channels}")
    return (Tensor(g.data[:, :first_channels].copy()),
            Tensor(g.data[:, first_channels:].copy()))


def softmax(logits: Tensor) -> np.ndarray:
    """Channel-axis softmax with max subtraction for stability."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: Tensor, labels: np.ndarray):
    """Mean per-pixel cross-entropy and its gradient w.r.t. the logits.

    ``labels`` is an integer (N, H, W) map; the loss averages
    -log p(label) over all N*H*W pixels and the returned gradient is
    (softmax - onehot) / (N*H*W).
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits "
                         f"spatial extents {(n, h, w)}")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"labels must lie in [0, {c}), got "
                         f"[{labels.min()}, {labels.max()}]")
    p = softmax(logits)
    npix = n * h * w
    ni, hi, wi = np.ogrid[:n, :h, :w]
    picked = p[ni, labels, hi, wi]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = p.copy()
    grad[ni, labels, hi, wi] -= 1.0
    grad /= npix
    return loss, Tensor(grad)
