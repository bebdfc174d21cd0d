"""Differentiable layers for the toy segmentation nets: conv2d, relu, bilinear resize."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Var, record, relu, value

__all__ = ["Conv2dLayer", "conv2d", "conv2d_raw", "relu", "upsample_bilinear", "resize_bilinear",
           "bilinear_matrix", "init_params", "conv_output_size"]


@dataclass
class Conv2dLayer:
    """Square-kernel convolution; ``weight``/``bias`` may be ndarrays or tape Vars."""

    weight: np.ndarray | Var  # [C_out, C_in, k, k]
    bias: np.ndarray | Var  # [C_out]
    stride: int = 1
    dilation: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be positive")
        if self.padding is None:
            self.padding = self.dilation * (self.kernel_size - 1) // 2

    @classmethod
    def create(cls, c_in: int, c_out: int, k: int, stride: int = 1, dilation: int = 1,
               padding: int | None = None, dtype=np.float32) -> "Conv2dLayer":
        return cls(np.zeros((c_out, c_in, k, k), dtype), np.zeros(c_out, dtype), stride, dilation, padding)

    @property
    def kernel_size(self) -> int:
        return value(self.weight).shape[-1]

    @property
    def in_channels(self) -> int:
        return value(self.weight).shape[1]

    @property
    def out_channels(self) -> int:
        return value(self.weight).shape[0]

    def bind(self, weight, bias) -> "Conv2dLayer":
        return Conv2dLayer(weight, bias, self.stride, self.dilation, self.padding)

    def __call__(self, x):
        return conv2d(x, self)


def conv_output_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _gather(xp, k, stride, dilation, ho, wo):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            r, s = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r:r + stride * (ho - 1) + 1:stride, s:s + stride * (wo - 1) + 1:stride]
    return cols.reshape(b, c * k * k, ho * wo)


def _scatter(dcols, xp_shape, k, stride, dilation, ho, wo):
    b, c = xp_shape[:2]
    dcols = dcols.reshape(b, c, k, k, ho, wo)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            r, s = i * dilation, j * dilation
            dxp[:, :, r:r + stride * (ho - 1) + 1:stride, s:s + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
    return dxp


def conv2d_raw(x, weight, bias, stride: int = 1, dilation: int = 1, padding: int = 0):
    """Cross-correlation with zero padding; im2col followed by one batched matmul."""
    vx, vw, vb = value(x), value(weight), value(bias)
    if vx.ndim != 4:
        raise ValueError(f"conv2d expects [B, C, H, W], got {vx.shape}")
    c_out, c_in, k, k2 = vw.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if vx.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {vx.shape[1]}, weight expects {c_in}")
    bsz, _, h, w = vx.shape
    ho = conv_output_size(h, k, stride, dilation, padding)
    wo = conv_output_size(w, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"degenerate conv output {ho}x{wo} for input {h}x{w}")
    p = padding
    xp = np.pad(vx, ((0, 0), (0, 0), (p, p), (p, p))) if p else vx
    if k == 1 and stride == 1 and p == 0:
        cols = vx.reshape(bsz, c_in, h * w)
    else:
        cols = _gather(xp, k, stride, dilation, ho, wo)
    wmat = vw.reshape(c_out, -1)
    out = np.matmul(wmat, cols) + vb.reshape(1, c_out, 1)
    out = out.reshape(bsz, c_out, ho, wo)

    def bw(g, needs):
        g2 = g.reshape(bsz, c_out, ho * wo)
        gx = gw = gb = None
        if needs[0]:
            dcols = np.matmul(wmat.T, g2)
            if k == 1 and stride == 1 and p == 0:
                gx = dcols.reshape(vx.shape)
            else:
                dxp = _scatter(dcols, xp.shape, k, stride, dilation, ho, wo)
                gx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        if needs[1]:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(vw.shape)
        if needs[2]:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb
    return record("conv2d", out, (x, weight, bias), bw)


def conv2d(x, layer: Conv2dLayer):
    return conv2d_raw(x, layer.weight, layer.bias, layer.stride, layer.dilation, layer.padding)


@lru_cache(maxsize=64)
def _bilinear_matrix(n_out: int, n_in: int, dtype: str) -> np.ndarray:
    a = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[o, i0] += 1.0 - lam
        a[o, i1] += lam
    a = a.astype(dtype)
    a.setflags(write=False)
    return a


def bilinear_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix for 1-D linear resampling with half-pixel centres (align_corners=False)."""
    return _bilinear_matrix(n_out, n_in, np.dtype(dtype).str)


def resize_bilinear(x, height: int, width: int):
    """Separable bilinear resize of the two trailing axes; exact copy when sizes match."""
    vx = value(x)
    h, w = vx.shape[-2:]
    if (h, w) == (height, width):
        return record("resize", vx.copy(), (x,), lambda g, n: (g,))
    ah = bilinear_matrix(height, h, vx.dtype)
    aw = bilinear_matrix(width, w, vx.dtype)
    out = np.matmul(np.matmul(ah, vx), aw.T)
    return record("resize", out, (x,), lambda g, n: (np.matmul(np.matmul(ah.T, g), aw),))


def upsample_bilinear(x, height: int, width: int):
    h, w = value(x).shape[-2:]
    if height < h or width < w:
        raise ValueError(f"upsample target {height}x{width} is smaller than source {h}x{w}")
    return resize_bilinear(x, height, width)


def init_params(layer: Conv2dLayer, rng: np.random.Generator) -> None:
    """Uniform fan-in scaled weights in +-sqrt(6 / fan_in), zero bias."""
    w = value(layer.weight)
    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    bound = np.sqrt(6.0 / fan_in)
    layer.weight = rng.uniform(-bound, bound, size=w.shape).astype(w.dtype)
    layer.bias = np.zeros(w.shape[0], dtype=w.dtype)
