"""Synthetic shapes segmentation data, training-time augmentation and batching.

Every sample is a pure function of ``(master seed, split, index)``: a
randomly oriented, weakly tinted grey background gradient, one to three
hard-edged shapes (circle, rectangle, triangle), and uniform noise.  Each
shape class has a mean colour; per-shape jitter makes colours of different
classes overlap, so colour alone does not determine the label.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .nn import resize_bilinear
from .tensor import load_tensor, save_tensor

IGNORE = 255
CLASS_NAMES = ("background", "circle", "rectangle", "triangle")
# per-class mean RGB; per-shape jitter makes the colour cue overlap between classes
CLASS_COLORS = np.array([[0.5, 0.5, 0.5], [0.85, 0.25, 0.2], [0.25, 0.75, 0.25], [0.25, 0.3, 0.85]])
_SPLIT_CODES = {"train": 0, "val": 1}


@dataclass
class DatasetSpec:
    num_classes: int = 4
    size: int = 48
    min_shapes: int = 1
    max_shapes: int = 3
    noise: float = 0.1
    color_jitter: float = 0.3
    n_train: int = 500
    n_val: int = 100
    seed: int = 0
    output_stride: int = 4

    def __post_init__(self):
        if self.num_classes != 4:
            raise ValueError("the shapes generator defines exactly 4 classes")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("train/val counts must be >= 1")
        if self.size % self.output_stride:
            raise ValueError(f"image size {self.size} not divisible by output stride {self.output_stride}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


class SegBatch(NamedTuple):
    images: np.ndarray  # [B, 3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [B, H, W] uint8
    indices: np.ndarray  # dataset indices of the samples


def _shape_mask(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if cls == 1:
        r = rng.uniform(0.12, 0.22) * size
        cy, cx = rng.uniform(r, size - r, 2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if cls == 2:
        h, w = rng.uniform(0.2, 0.42, 2) * size
        y0 = rng.uniform(0, size - h)
        x0 = rng.uniform(0, size - w)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    # triangle: three vertices at random angles around a centre
    r = rng.uniform(0.16, 0.26) * size
    cy, cx = rng.uniform(r, size - r, 2)
    ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.3, 0.3, 3)
    vy, vx = cy + r * np.sin(ang), cx + r * np.cos(ang)
    inside = np.ones((size, size), bool)
    signs = []
    for a in range(3):
        b = (a + 1) % 3
        signs.append((vx[b] - vx[a]) * (yy - vy[a]) - (vy[b] - vy[a]) * (xx - vx[a]))
    signs = np.stack(signs)
    inside &= (signs >= 0).all(0) | (signs <= 0).all(0)
    return inside


def make_sample(spec: DatasetSpec, split: str, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Render sample ``index`` of ``split``; deterministic in (spec.seed, split, index)."""
    rng = np.random.default_rng([spec.seed, _SPLIT_CODES[split], index])
    n = spec.size
    while True:
        c0 = rng.uniform(0.25, 0.75, (2, 1)) + rng.uniform(-0.1, 0.1, (2, 3))
        c0, c1 = c0[0], c0[1]
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
        t = (np.cos(theta) * xx + np.sin(theta) * yy)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
        label = np.zeros((n, n), np.uint8)
        for _ in range(rng.integers(spec.min_shapes, spec.max_shapes + 1)):
            cls = int(rng.integers(1, spec.num_classes))
            mask = _shape_mask(cls, n, rng)
            color = CLASS_COLORS[cls] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
            img[:, mask] = np.clip(color, 0, 1)[:, None]
            label[mask] = cls
        img = img + rng.uniform(-spec.noise, spec.noise, img.shape)
        if (label == 0).any():
            return np.clip(img, 0, 1).astype(np.float32), label


def generate(spec: DatasetSpec, out_dir: str | os.PathLike | None = None):
    """Build train and val splits in memory, and write them under ``out_dir`` if given."""
    splits = {}
    for split, count in (("train", spec.n_train), ("val", spec.n_val)):
        samples = [make_sample(spec, split, i) for i in range(count)]
        splits[split] = (np.stack([s[0] for s in samples]), np.stack([s[1] for s in samples]))
    if out_dir is not None:
        write_dataset(spec, splits, out_dir)
    return splits


def write_dataset(spec: DatasetSpec, splits: dict, out_dir: str | os.PathLike) -> None:
    root = Path(out_dir)
    for split, (imgs, lbls) in splits.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i, (img, lbl) in enumerate(zip(imgs, lbls)):
            save_tensor(img, d / f"{i:05d}.img.pfst")
            save_tensor(lbl, d / f"{i:05d}.lbl.pfst")
    manifest = {"spec": asdict(spec), "seed": spec.seed,
                "counts": {k: int(v[0].shape[0]) for k, v in splits.items()},
                "classes": list(CLASS_NAMES)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(root: str | os.PathLike) -> tuple[DatasetSpec, dict]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = DatasetSpec(**manifest["spec"])
    splits = {}
    for split, count in manifest["counts"].items():
        d = root / split
        imgs = [load_tensor(d / f"{i:05d}.img.pfst") for i in range(count)]
        lbls = [load_tensor(d / f"{i:05d}.lbl.pfst") for i in range(count)]
        splits[split] = (np.stack(imgs), np.stack(lbls))
    return spec, splits


def _round(v: float) -> int:
    return int(np.floor(v + 0.5))


def scaled_size(n: int, s: float) -> int:
    return max(1, _round(s * n))


def _resize_nearest(label: np.ndarray, h: int, w: int) -> np.ndarray:
    ih, iw = label.shape
    ry = np.minimum(((np.arange(h) + 0.5) * ih / h).astype(int), ih - 1)
    rx = np.minimum(((np.arange(w) + 0.5) * iw / w).astype(int), iw - 1)
    return label[ry[:, None], rx[None, :]]


def _fit(a: np.ndarray, h: int, w: int, fill) -> np.ndarray:
    """Centre-crop or pad the trailing two axes of ``a`` to (h, w)."""
    out = np.full(a.shape[:-2] + (h, w), fill, dtype=a.dtype)
    ah, aw = a.shape[-2:]
    sy, dy = (ah - h) // 2 if ah >= h else 0, 0 if ah >= h else (h - ah) // 2
    sx, dx = (aw - w) // 2 if aw >= w else 0, 0 if aw >= w else (w - aw) // 2
    ch, cw = min(h, ah), min(w, aw)
    out[..., dy:dy + ch, dx:dx + cw] = a[..., sy:sy + ch, sx:sx + cw]
    return out


def augment_sample(img: np.ndarray, label: np.ndarray, rng: np.random.Generator,
                   flip: bool | None = None, scale: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip (p=0.5) and random rescale in [0.5, 1.5], back to the input size.

    Images resize bilinearly and pad with 0; labels resize nearest and pad with 255.
    ``flip``/``scale`` override the random draws (both draws still happen).
    """
    draw_flip = rng.random() < 0.5
    draw_scale = rng.uniform(0.5, 1.5)
    flip = draw_flip if flip is None else flip
    scale = draw_scale if scale is None else scale
    h, w = label.shape
    if flip:
        img = img[..., ::-1]
        label = label[..., ::-1]
    nh, nw = scaled_size(h, scale), scaled_size(w, scale)
    if (nh, nw) != (h, w):
        img = _fit(resize_bilinear(np.ascontiguousarray(img), nh, nw), h, w, 0)
        label = _fit(_resize_nearest(label, nh, nw), h, w, IGNORE)
    return np.ascontiguousarray(img), np.ascontiguousarray(label)


def batches(images: np.ndarray, labels: np.ndarray, batch_size: int, epoch_seed: int,
            augment: bool = True, shuffle: bool = True) -> Iterator[SegBatch]:
    """Seeded shuffle, per-sample augmentation seeded by (epoch seed, sample index); last partial batch kept."""
    n = len(images)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size {batch_size} must be in [1, {n}]")
    order = np.random.default_rng(epoch_seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if augment:
            pairs = [augment_sample(images[i], labels[i], np.random.default_rng([epoch_seed, int(i)])) for i in idx]
            imgs = np.stack([p[0] for p in pairs])
            lbls = np.stack([p[1] for p in pairs])
        else:
            imgs, lbls = images[idx], labels[idx]
        yield SegBatch(imgs, lbls, idx)
