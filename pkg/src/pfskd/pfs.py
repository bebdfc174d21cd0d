"""Pixel-wise feature similarity maps and the similarity distillation loss.

For a feature map ``f`` of shape [B, C, H, W], every location i gets a
probability vector over all H*W locations: the softmax of its inner products
with every other location.  Stacked, these rows form a row-stochastic
[B, HW, HW] matrix ``M``.  Two networks with different channel widths but the
same feature resolution produce comparable ``M``, which is what makes the
representation usable for teacher/student transfer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value
from .nn import Conv2dLayer, conv2d, init_params
from .tensor import NonFiniteError


@dataclass
class PfsMap:
    M: np.ndarray | Var  # [B, HW, HW]
    height: int
    width: int

    @property
    def shape(self):
        return value(self.M).shape

    def row(self, b: int, i: int) -> np.ndarray:
        """Similarity of location ``i`` to every location, as an H x W map."""
        return np.asarray(value(self.M)[b, i]).reshape(self.height, self.width)


@dataclass
class CPfsTransforms:
    w1: Conv2dLayer
    w2: Conv2dLayer

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator | None = None, dtype=np.float32) -> "CPfsTransforms":
        reduced = reduced_channels(channels)
        t = cls(Conv2dLayer.create(channels, reduced, 1, dtype=dtype),
                Conv2dLayer.create(channels, reduced, 1, dtype=dtype))
        if rng is not None:
            init_params(t.w1, rng)
            init_params(t.w2, rng)
        return t


def reduced_channels(c: int) -> int:
    return max(1, c // 8)


def _similarity(f1, f2, height: int, width: int) -> PfsMap:
    b, c1 = value(f1).shape[:2]
    c2 = value(f2).shape[1]
    n = height * width
    left = ad.transpose(ad.reshape(f1, (b, c1, n)), (0, 2, 1))  # [B, HW, C]
    right = ad.reshape(f2, (b, c2, n))  # [B, C, HW]
    logits = ad.matmul(left, right)
    return PfsMap(ad.softmax(logits, axis=-1), height, width)


def _check(f_in):
    v = value(f_in)
    if v.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] features, got {v.shape}")
    if not np.isfinite(v).all():
        raise NonFiniteError("PFS input contains NaN or Inf")
    if v.shape[2] * v.shape[3] < 1:
        raise ValueError("PFS needs at least one spatial location")


def s_pfs(f_in) -> PfsMap:
    """Similarity map computed directly from raw features."""
    _check(f_in)
    h, w = value(f_in).shape[2:]
    return _similarity(f_in, f_in, h, w)


def c_pfs(f_in, t: CPfsTransforms) -> PfsMap:
    """Similarity map computed from two learned 1x1 projections of the features."""
    _check(f_in)
    c = value(f_in).shape[1]
    if t.w1.in_channels != c or t.w2.in_channels != c:
        raise ValueError(f"transforms expect {t.w1.in_channels} channels, features have {c}")
    h, w = value(f_in).shape[2:]
    return _similarity(conv2d(f_in, t.w1), conv2d(f_in, t.w2), h, w)


def pfs_loss(pfs_t: PfsMap, pfs_s: PfsMap):
    """Mean over locations of the L1 distance between teacher and student rows, averaged over the batch.

    The teacher map is normally an ndarray (frozen network); either side may be a Var.
    """
    mt, ms = value(pfs_t.M), value(pfs_s.M)
    if mt.shape != ms.shape:
        raise ValueError(f"PFS shape mismatch {mt.shape} vs {ms.shape}: teacher and student "
                         "features must share spatial dims (check output strides)")
    b, n, _ = mt.shape
    total = ad.sum_(ad.abs_(ad.sub(pfs_t.M, pfs_s.M)))
    return ad.scale(total, 1.0 / (n * b))


def augment(f_in, pfs: PfsMap, gamma):
    """Residual aggregation ``f + gamma * (f @ M^T)`` with f viewed as [B, C, HW]."""
    v = value(f_in)
    b, c, h, w = v.shape
    if (h, w) != (pfs.height, pfs.width) or value(pfs.M).shape != (b, h * w, h * w):
        raise ValueError(f"PFS map {value(pfs.M).shape} does not match features {v.shape}")
    f = ad.reshape(f_in, (b, c, h * w))
    agg = ad.matmul(f, ad.transpose(pfs.M, (0, 2, 1)))
    return ad.add(f_in, ad.mul(gamma, ad.reshape(agg, (b, c, h, w))))
