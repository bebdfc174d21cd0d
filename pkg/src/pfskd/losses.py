"""Segmentation and distillation objectives.

All per-pixel losses share one reduction rule: pixels whose label equals
``ignore_index`` are dropped, and the rest are averaged (``mean``) or summed
(``sum``).  Teacher quantities always enter as constants.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import value
from .nn import Conv2dLayer, conv2d
from .pfs import pfs_loss
from .tensor import softmax

log = logging.getLogger(__name__)

MODES = ("none", "pfs", "gap", "pfs+gap", "post_softmax", "hint", "attention")


@dataclass
class LossConfig:
    mu: float = 1.0
    lam: float = 1e3
    temperature: float = 1.0
    ignore_index: int = 255
    pixel_reduction: str = "mean"
    attention_norm: str = "l2"

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ValueError("mu and lambda must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.pixel_reduction not in ("mean", "sum"):
            raise ValueError(f"pixel_reduction must be 'mean' or 'sum', got {self.pixel_reduction!r}")
        if self.attention_norm not in ("l2", "none"):
            raise ValueError(f"attention_norm must be 'l2' or 'none', got {self.attention_norm!r}")


def _onehot(labels: np.ndarray, num_classes: int, ignore_index: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    valid = labels != ignore_index
    bad = valid & (labels >= num_classes)
    if bad.any():
        raise ValueError(f"label {int(labels[bad].max())} out of range for {num_classes} classes")
    safe = np.where(valid, labels, 0).astype(np.intp)
    onehot = (np.arange(num_classes).reshape(1, -1, 1, 1) == safe[:, None]) & valid[:, None]
    return onehot.astype(dtype), valid


def _reduce(per_pixel, valid: np.ndarray, cfg: LossConfig):
    """Sum a [B, H, W] per-pixel loss (zero at ignored pixels) and normalise per the config."""
    total = ad.sum_(per_pixel)
    n = int(valid.sum())
    if n == 0:
        log.warning("no valid pixels in batch; loss is 0")
        return ad.scale(total, 0.0)
    if cfg.pixel_reduction == "mean":
        return ad.scale(total, 1.0 / n)
    return total


def _check_logits(logits, labels):
    v = value(logits)
    if v.ndim != 4:
        raise ValueError(f"logits must be [B, c, H, W], got {v.shape}")
    if np.asarray(labels).shape != (v.shape[0],) + v.shape[2:]:
        raise ValueError(f"labels {np.asarray(labels).shape} do not match logits {v.shape}")


def _hard_terms(logits, labels, cfg):
    _check_logits(logits, labels)
    logp = ad.log_softmax(logits, axis=1)
    onehot, valid = _onehot(labels, value(logits).shape[1], cfg.ignore_index, value(logits).dtype)
    hard = ad.neg(ad.sum_(ad.mul(logp, onehot), axis=1))
    return logp, onehot, valid, hard


def hard_ce(logits, labels, cfg: LossConfig | None = None):
    """Pixel-wise cross entropy against ground truth."""
    cfg = cfg or LossConfig()
    _, _, valid, hard = _hard_terms(logits, labels, cfg)
    return _reduce(hard, valid, cfg)


def soft_targets(teacher_logits, temperature: float = 1.0) -> np.ndarray:
    """Per-pixel class distribution of the teacher, softened by ``temperature``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(value(teacher_logits))
    return softmax(z / z.dtype.type(temperature), axis=1)


def gap_weights(p_t: np.ndarray, p_s: np.ndarray, labels, cfg: LossConfig | None = None) -> np.ndarray:
    """Per-pixel weight max(0, p_t* - p_s*) on the ground-truth class; 0 at ignored pixels.

    Inputs are probabilities (constants), so the result never carries gradient.
    """
    cfg = cfg or LossConfig()
    p_t, p_s = np.asarray(value(p_t)), np.asarray(value(p_s))
    onehot, valid = _onehot(labels, p_t.shape[1], cfg.ignore_index, p_t.dtype)
    pt_star = (p_t * onehot).sum(axis=1)
    ps_star = (p_s * onehot).sum(axis=1)
    return np.where(valid, np.maximum(pt_star - ps_star, 0), 0).astype(p_t.dtype)


@dataclass
class PixelTerms:
    hard: object  # reduced hard CE (Var or ndarray)
    soft: object  # reduced (weighted) soft cross entropy
    weights: np.ndarray = field(repr=False)


def _pixel_terms(student_logits, teacher_logits, labels, cfg: LossConfig, weighted: bool,
                 weights: np.ndarray | None = None) -> PixelTerms:
    if value(student_logits).shape != np.shape(value(teacher_logits)):
        raise ValueError(f"student logits {value(student_logits).shape} vs teacher "
                         f"{np.shape(value(teacher_logits))}")
    logp, onehot, valid, hard = _hard_terms(student_logits, labels, cfg)
    p_t = soft_targets(teacher_logits, cfg.temperature)
    soft = ad.neg(ad.sum_(ad.mul(logp, p_t), axis=1))
    if weights is not None:
        w = np.where(valid, np.asarray(weights, dtype=p_t.dtype), 0).astype(p_t.dtype)
    elif weighted:
        w = gap_weights(p_t, softmax(value(student_logits), axis=1), labels, cfg)
    else:
        w = valid.astype(p_t.dtype)
    return PixelTerms(_reduce(hard, valid, cfg), _reduce(ad.mul(soft, w), valid, cfg), w)


def kd_pixel_loss(student_logits, teacher_logits, labels, cfg: LossConfig | None = None,
                  weights: np.ndarray | None = None):
    """Hard CE plus the knowledge-gap weighted soft cross entropy, per pixel.

    The gap weights are recomputed from the current probabilities unless
    ``weights`` ([B, H, W]) is given; either way they are constants for backward.
    """
    cfg = cfg or LossConfig()
    t = _pixel_terms(student_logits, teacher_logits, labels, cfg, weighted=True, weights=weights)
    return ad.add(t.hard, ad.scale(t.soft, cfg.mu))


def baseline_post_softmax(student_logits, teacher_logits, labels, cfg: LossConfig | None = None):
    """Unweighted soft-prediction mimic: every valid pixel gets weight 1."""
    cfg = cfg or LossConfig()
    t = _pixel_terms(student_logits, teacher_logits, labels, cfg, weighted=False)
    return ad.add(t.hard, ad.scale(t.soft, cfg.mu))


def baseline_hint(student_feat, teacher_feat, adapter: Conv2dLayer):
    """Mean squared error between adapted student features and teacher features."""
    ts = np.shape(value(teacher_feat))
    ss = value(student_feat).shape
    if ss[0] != ts[0] or ss[2:] != ts[2:]:
        raise ValueError(f"hint features differ in batch/spatial dims: {ss} vs {ts}")
    diff = ad.sub(conv2d(student_feat, adapter), teacher_feat)
    return ad.mean(ad.mul(diff, diff))


def attention_map(feat, norm: str = "l2"):
    """Channel-mean map, flattened to [B, HW] and scaled to unit L2 norm (zero maps stay zero)."""
    v = value(feat)
    b, _, h, w = v.shape
    a = ad.reshape(ad.mean(feat, axis=1), (b, h * w))
    if norm == "none":
        return a
    sq = ad.sum_(ad.mul(a, a), axis=1, keepdims=True)
    norm = ad.sqrt(ad.clamp_min(sq, np.finfo(v.dtype).tiny))
    return ad.div(a, ad.clamp_min(norm, 1e-12))


def baseline_attention(student_feat, teacher_feat, norm: str = "l2"):
    """Mean squared difference between normalised channel-mean attention maps."""
    ss = value(student_feat).shape
    ts = np.shape(value(teacher_feat))
    if ss[0] != ts[0] or ss[2:] != ts[2:]:
        raise ValueError(f"attention features differ in batch/spatial dims: {ss} vs {ts}")
    d = ad.sub(attention_map(student_feat, norm), attention_map(teacher_feat, norm))
    return ad.mean(ad.mul(d, d))


@dataclass
class LossBreakdown:
    hard: float
    soft_weighted: float
    pfs: float
    total: float


def total_loss(student_out: dict, teacher_out: dict, labels, cfg: LossConfig | None = None,
               mode: str = "pfs+gap", adapter: Conv2dLayer | None = None, weights: np.ndarray | None = None):
    """Combined objective for one distillation mode; returns (loss, breakdown).

    ``student_out``/``teacher_out`` hold ``logits``, ``feat`` and ``pfs`` as
    produced by the network forward.  ``weights`` freezes the gap weights
    (used for gradient checking).  The three logged terms are combined in
    float64 so that ``total == hard + mu * soft_weighted + lam * pfs`` holds
    exactly for the logged values.
    """
    cfg = cfg or LossConfig()
    if mode not in MODES:
        raise ValueError(f"unknown distillation mode {mode!r}; expected one of {MODES}")
    zs, zt = student_out["logits"], teacher_out.get("logits") if teacher_out else None

    if mode in ("gap", "pfs+gap", "post_softmax"):
        t = _pixel_terms(zs, zt, labels, cfg, weighted=mode != "post_softmax",
                         weights=weights if mode != "post_softmax" else None)
        hard, extra = t.hard, t.soft
    else:
        hard = hard_ce(zs, labels, cfg)
        extra = None
        if mode == "hint":
            if adapter is None:
                raise ValueError("hint mode needs an adapter convolution")
            extra = baseline_hint(student_out["feat"], teacher_out["feat"], adapter)
        elif mode == "attention":
            extra = baseline_attention(student_out["feat"], teacher_out["feat"], cfg.attention_norm)

    pfs_term = pfs_loss(teacher_out["pfs"], student_out["pfs"]) if mode in ("pfs", "pfs+gap") else None

    total = ad.astype(hard, np.float64)
    if extra is not None:
        total = ad.add(total, ad.scale(ad.astype(extra, np.float64), cfg.mu))
    if pfs_term is not None:
        total = ad.add(total, ad.scale(ad.astype(pfs_term, np.float64), cfg.lam))

    def f(x):
        return 0.0 if x is None else float(value(x))
    breakdown = LossBreakdown(f(hard), f(extra), f(pfs_term), float(value(total)))
    return total, breakdown


__all__ = ["LossConfig", "MODES", "hard_ce", "soft_targets", "gap_weights", "kd_pixel_loss",
           "baseline_post_softmax", "baseline_hint", "baseline_attention", "attention_map",
           "total_loss", "LossBreakdown"]
