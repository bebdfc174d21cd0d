"""Dump single rows of a network's PFS map as images and CSV, plus a locality score for them."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Network
from .pfs import PfsMap, s_pfs

SOURCES = ("module", "feature")


class CoordinateError(ValueError):
    """Requested pixel lies outside the image or feature map."""


def feature_coords(y: int, x: int, img_h: int, img_w: int, stride: int) -> tuple[int, int]:
    """Map an input pixel to its feature-map cell (integer division by the output stride)."""
    if not (0 <= y < img_h and 0 <= x < img_w):
        raise CoordinateError(f"pixel ({y},{x}) outside image of size {img_h}x{img_w}")
    fy, fx = y // stride, x // stride
    if not (0 <= fy < img_h // stride and 0 <= fx < img_w // stride):
        raise CoordinateError(f"pixel ({y},{x}) maps to ({fy},{fx}), outside the feature map")
    return fy, fx


def pfs_map(net: Network, image: np.ndarray, source: str = "module") -> PfsMap:
    """PFS map of one [C,H,W] image.

    ``module`` is the map the network's own PFS layer computes (C-PFS for the default teacher);
    ``feature`` is S-PFS of the backbone features, which needs no learned transform.
    """
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}, got {source!r}")
    out = net.forward(np.asarray(image, dtype=net.dtype)[None])
    if source == "feature":
        return s_pfs(out["feat"])
    if out["pfs"] is None:
        raise ValueError("network has no PFS module; use source='feature'")
    return out["pfs"]


def pfs_rows(net: Network, image: np.ndarray, coords, source: str = "module") -> list[np.ndarray]:
    """PFS rows (H' x W' maps) for each input pixel in ``coords``, from one forward pass."""
    img = np.asarray(image, dtype=net.dtype)
    if img.ndim != 3:
        raise ValueError(f"expected a [C,H,W] image, got shape {img.shape}")
    _, h, w = img.shape
    s = net.spec.output_stride
    cells = [feature_coords(int(y), int(x), h, w, s) for y, x in coords]
    pfs = pfs_map(net, img, source)
    return [pfs.row(0, fy * pfs.width + fx) for fy, fx in cells]


def write_pgm(path, gray: np.ndarray) -> None:
    g = np.asarray(gray, np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode())
        fh.write(g.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """``rgb`` is [H, W, 3] uint8."""
    a = np.ascontiguousarray(rgb, np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        fh.write(a.tobytes())


def read_pnm(path) -> np.ndarray:
    """Minimal reader for the P5/P6 files written here (no comments)."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    body = parts[4]
    if magic == b"P5":
        return np.frombuffer(body, np.uint8, h * w).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(body, np.uint8, h * w * 3).reshape(h, w, 3)
    raise ValueError(f"not a P5/P6 file: {magic!r}")


def heatmap(row: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Linear min-max scaling to 0..255. Returns (gray, lo, hi); raw = lo + gray/255*(hi-lo)."""
    lo, hi = float(row.min()), float(row.max())
    if hi > lo:
        gray = np.rint((row - lo) / (hi - lo) * 255)
    else:
        gray = np.zeros(row.shape)
    return gray.astype(np.uint8), lo, hi


def marked_image(image: np.ndarray, y: int, x: int, arm: int = 2) -> np.ndarray:
    """[C,H,W] float image in [0,1] to [H,W,3] uint8 with a red cross at (y, x)."""
    rgb = np.rint(np.clip(np.transpose(image[:3], (1, 2, 0)), 0, 1) * 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    for d in range(-arm, arm + 1):
        for yy, xx in ((y + d, x + d), (y + d, x - d)):
            if 0 <= yy < h and 0 <= xx < w:
                rgb[yy, xx] = (255, 0, 0)
    return rgb


def dump(net: Network, image: np.ndarray, coords, out_dir, tag: str = "pfs",
         source: str = "module") -> list[Path]:
    """Write heatmap PGM, scale sidecar, raw CSV and marked PPM per pixel. Returns the written paths."""
    rows = pfs_rows(net, image, coords, source)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (y, x), row in zip(coords, rows):
        stem = out / f"{tag}_y{y}_x{x}"
        gray, lo, hi = heatmap(row)
        write_pgm(f"{stem}.pgm", gray)
        Path(f"{stem}.scale.txt").write_text(f"min {lo!r}\nmax {hi!r}\n")
        np.savetxt(f"{stem}.csv", row, delimiter=",", fmt="%.17g")
        write_ppm(f"{stem}.input.ppm", marked_image(np.asarray(image), y, x))
        written += [Path(f"{stem}{ext}") for ext in (".pgm", ".scale.txt", ".csv", ".input.ppm")]
    return written


def class_coverage(label: np.ndarray, cls: int, stride: int) -> np.ndarray:
    """Fraction of each stride x stride cell covered by ``cls``."""
    m = (np.asarray(label) == cls).astype(np.float64)
    h, w = m.shape
    return m.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))


def top_decile_overlap(row: np.ndarray, coverage: np.ndarray) -> float:
    """Share of the mass in the top 10% of cells that lands on the class, weighting each cell by coverage."""
    flat, cov = row.ravel(), coverage.ravel()
    k = max(1, int(np.ceil(flat.size / 10)))
    top = np.argsort(flat, kind="stable")[-k:]
    mass = flat[top].sum()
    return float((flat[top] * cov[top]).sum() / mass) if mass > 0 else 0.0


@dataclass
class OverlapScore:
    y: int
    x: int
    cls: int
    overlap: float  # share of top-decile mass on the pixel's own class
    prior: float  # share of image pixels with that class

    @property
    def ratio(self) -> float:
        return self.overlap / self.prior if self.prior > 0 else float("inf")


def overlap_scores(net: Network, image: np.ndarray, label: np.ndarray, coords,
                   source: str = "module") -> list[OverlapScore]:
    """Score how strongly each pixel's PFS row concentrates on its own class region."""
    rows = pfs_rows(net, image, coords, source)
    label = np.asarray(label)
    stride = net.spec.output_stride
    scores = []
    for (y, x), row in zip(coords, rows):
        cls = int(label[y, x])
        cov = class_coverage(label, cls, stride)
        scores.append(OverlapScore(int(y), int(x), cls, top_decile_overlap(row, cov), float((label == cls).mean())))
    return scores


def sample_interior(labels: np.ndarray, n: int, seed: int, stride: int, ignore_index: int = 255):
    """Pick ``n`` (image index, y, x) foreground pixels whose whole stride cell carries their class.

    Such a pixel's feature describes only its own object, so its PFS row has a well-defined target region.
    """
    labels = np.asarray(labels)
    fg = np.argwhere((labels != 0) & (labels != ignore_index))
    rng = np.random.default_rng(seed)
    picks = []
    for j in rng.permutation(len(fg)):
        i, y, x = (int(v) for v in fg[j])
        cy, cx = y - y % stride, x - x % stride
        if (labels[i, cy:cy + stride, cx:cx + stride] == labels[i, y, x]).all():
            picks.append((i, y, x))
            if len(picks) == n:
                return picks
    raise ValueError(f"only {len(picks)} interior foreground pixels available, need {n}")
