"""Scalar-loop reference implementations and the random-instance equivalence suite.

Each reference works on plain Python floats from ``ndarray.tolist()`` with
explicit loops and ``math`` functions, so it shares no code path with the
vectorised kernels it checks.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import losses, pfs
from .autodiff import value
from .nn import Conv2dLayer, conv2d_raw, conv_output_size, upsample_bilinear


def matmul_loop(a, b):
    a, b = np.asarray(a).tolist(), np.asarray(b).tolist()
    m, k, n = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)]


def softmax_loop(row):
    mx = max(row)
    e = [math.exp(v - mx) for v in row]
    s = sum(e)
    return [v / s for v in e]


def _locations(f):
    """[C][H][W] nested list -> list of per-location channel vectors in row-major order."""
    c, h, w = len(f), len(f[0]), len(f[0][0])
    return [[f[ch][y][x] for ch in range(c)] for y in range(h) for x in range(w)]


def _pfs_from(left, right):
    n = len(left)
    out = []
    for i in range(n):
        logits = [sum(left[i][c] * right[j][c] for c in range(len(left[i]))) for j in range(n)]
        out.append(softmax_loop(logits))
    return out


def s_pfs_loop(f):
    """f: [B, C, H, W] -> [B][HW][HW]."""
    return [_pfs_from(_locations(fb), _locations(fb)) for fb in np.asarray(f).tolist()]


def conv1x1_loop(fb, w, b):
    c_out, c_in = len(w), len(w[0])
    h, wd = len(fb[0]), len(fb[0][0])
    return [[[b[o] + sum(w[o][i][0][0] * fb[i][y][x] for i in range(c_in)) for x in range(wd)]
             for y in range(h)] for o in range(c_out)]


def c_pfs_loop(f, w1, b1, w2, b2):
    w1, b1, w2, b2 = (np.asarray(v).tolist() for v in (w1, b1, w2, b2))
    out = []
    for fb in np.asarray(f).tolist():
        out.append(_pfs_from(_locations(conv1x1_loop(fb, w1, b1)), _locations(conv1x1_loop(fb, w2, b2))))
    return out


def pfs_loss_loop(mt, ms):
    mt, ms = np.asarray(mt).tolist(), np.asarray(ms).tolist()
    total = 0.0
    for bt, bs in zip(mt, ms):
        n = len(bt)
        total += sum(sum(abs(bt[i][j] - bs[i][j]) for j in range(n)) for i in range(n)) / n
    return total / len(mt)


def augment_loop(f, m, gamma):
    f, m = np.asarray(f).tolist(), np.asarray(m).tolist()
    out = []
    for fb, mb in zip(f, m):
        c, h, w = len(fb), len(fb[0]), len(fb[0][0])
        flat = [[fb[ch][y][x] for y in range(h) for x in range(w)] for ch in range(c)]
        n = h * w
        res = []
        for ch in range(c):
            agg = [sum(flat[ch][j] * mb[i][j] for j in range(n)) for i in range(n)]
            res.append([[flat[ch][y * w + x] + gamma * agg[y * w + x] for x in range(w)] for y in range(h)])
        out.append(res)
    return out


def conv2d_loop(x, w, b, stride=1, dilation=1, padding=0):
    """Direct six-nested-loop cross-correlation with zero padding."""
    x, w, b = np.asarray(x).tolist(), np.asarray(w).tolist(), np.asarray(b).tolist()
    bsz, c_in, h, wd = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    c_out, k = len(w), len(w[0][0])
    ho = conv_output_size(h, k, stride, dilation, padding)
    wo = conv_output_size(wd, k, stride, dilation, padding)
    out = [[[[0.0] * wo for _ in range(ho)] for _ in range(c_out)] for _ in range(bsz)]
    for n in range(bsz):
        for o in range(c_out):
            for oy in range(ho):
                for ox in range(wo):
                    acc = b[o]
                    for i in range(c_in):
                        for ky in range(k):
                            iy = oy * stride + ky * dilation - padding
                            if not 0 <= iy < h:
                                continue
                            for kx in range(k):
                                ix = ox * stride + kx * dilation - padding
                                if 0 <= ix < wd:
                                    acc += w[o][i][ky][kx] * x[n][i][iy][ix]
                    out[n][o][oy][ox] = acc
    return out


def bilinear_loop(x, height, width):
    """Closed-form half-pixel bilinear interpolation of the last two axes of [B, C, h, w]."""
    x = np.asarray(x).tolist()
    h, w = len(x[0][0]), len(x[0][0][0])

    def taps(o, n_out, n_in):
        src = max((o + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        return i0, min(i0 + 1, n_in - 1), src - i0
    out = []
    for xb in x:
        ob = []
        for xc in xb:
            rows = []
            for oy in range(height):
                y0, y1, ly = taps(oy, height, h)
                row = []
                for ox in range(width):
                    x0, x1, lx = taps(ox, width, w)
                    row.append((1 - ly) * ((1 - lx) * xc[y0][x0] + lx * xc[y0][x1])
                               + ly * ((1 - lx) * xc[y1][x0] + lx * xc[y1][x1]))
                rows.append(row)
            ob.append(rows)
        out.append(ob)
    return out


def _pixel_losses(zs, zt, labels, mu, temperature, ignore, mode):
    zs, zt, labels = np.asarray(zs).tolist(), np.asarray(zt).tolist(), np.asarray(labels).tolist()
    total, count = 0.0, 0
    for b in range(len(zs)):
        c = len(zs[b])
        for y in range(len(zs[b][0])):
            for x in range(len(zs[b][0][0])):
                lab = labels[b][y][x]
                if lab == ignore:
                    continue
                s = [zs[b][i][y][x] for i in range(c)]
                t = [zt[b][i][y][x] / temperature for i in range(c)]
                ps, pt = softmax_loop(s), softmax_loop(t)
                mx = max(s)
                lse = mx + math.log(sum(math.exp(v - mx) for v in s))
                logp = [v - lse for v in s]
                hard = -logp[lab]
                soft = -sum(pt[i] * logp[i] for i in range(c))
                if mode == "hard":
                    term = hard
                elif mode == "post_softmax":
                    term = hard + mu * soft
                else:
                    term = hard + mu * max(0.0, pt[lab] - ps[lab]) * soft
                total += term
                count += 1
    return total / count if count else 0.0


def hard_ce_loop(zs, labels, ignore=255):
    return _pixel_losses(zs, zs, labels, 0.0, 1.0, ignore, "hard")


def kd_pixel_loop(zs, zt, labels, mu=1.0, temperature=1.0, ignore=255):
    return _pixel_losses(zs, zt, labels, mu, temperature, ignore, "gap")


def post_softmax_loop(zs, zt, labels, mu=1.0, temperature=1.0, ignore=255):
    return _pixel_losses(zs, zt, labels, mu, temperature, ignore, "post_softmax")


def hint_loop(fs, ft, w, b):
    adapted = conv2d_loop(fs, w, b)
    ft = np.asarray(ft).tolist()
    total, n = 0.0, 0
    for ab, tb in zip(adapted, ft):
        for ac, tc in zip(ab, tb):
            for ar, tr in zip(ac, tc):
                for a, t in zip(ar, tr):
                    total += (a - t) ** 2
                    n += 1
    return total / n


def _attention_loop(f):
    maps = []
    for fb in np.asarray(f).tolist():
        c, h, w = len(fb), len(fb[0]), len(fb[0][0])
        a = [sum(fb[ch][y][x] for ch in range(c)) / c for y in range(h) for x in range(w)]
        norm = math.sqrt(sum(v * v for v in a))
        maps.append([v / norm if norm > 0 else 0.0 for v in a])
    return maps


def attention_loop(fs, ft):
    ms, mt = _attention_loop(fs), _attention_loop(ft)
    total, n = 0.0, 0
    for a, b in zip(ms, mt):
        for u, v in zip(a, b):
            total += (u - v) ** 2
            n += 1
    return total / n


def confusion_loop(pred, gt, num_classes, ignore=255):
    counts = [[0] * num_classes for _ in range(num_classes)]
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if g != ignore:
            counts[g][p] += 1
    return counts


# --- random-instance equivalence suite -------------------------------------------------------

@dataclass
class OracleResult:
    name: str
    instances: int
    max_abs_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_abs_err <= self.tol


def _err(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)), initial=0.0))


def _dims(rng, max_b=2, max_c=8, max_hw=6):
    return (int(rng.integers(1, max_b + 1)), int(rng.integers(1, max_c + 1)),
            int(rng.integers(1, max_hw + 1)), int(rng.integers(1, max_hw + 1)))


def _case_matmul(rng):
    m, k, n = rng.integers(1, 9, 3)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    from .tensor import matmul
    return _err(matmul(a, b), matmul_loop(a, b))


def _case_s_pfs(rng):
    f = rng.standard_normal(_dims(rng))
    return _err(value(pfs.s_pfs(f).M), s_pfs_loop(f))


def _case_c_pfs(rng):
    f = rng.standard_normal(_dims(rng))
    t = pfs.CPfsTransforms.create(f.shape[1], rng, dtype=np.float64)
    t.w1.bias = rng.standard_normal(t.w1.bias.shape)
    t.w2.bias = rng.standard_normal(t.w2.bias.shape)
    return _err(value(pfs.c_pfs(f, t).M), c_pfs_loop(f, t.w1.weight, t.w1.bias, t.w2.weight, t.w2.bias))


def _case_pfs_loss(rng):
    b, c, h, w = _dims(rng)
    a = pfs.s_pfs(rng.standard_normal((b, c, h, w)))
    s = pfs.s_pfs(rng.standard_normal((b, c, h, w)))
    return abs(float(pfs.pfs_loss(a, s)) - pfs_loss_loop(a.M, s.M))


def _case_augment(rng):
    f = rng.standard_normal(_dims(rng))
    m = pfs.s_pfs(rng.standard_normal(f.shape))
    gamma = float(rng.standard_normal())
    return _err(pfs.augment(f, m, np.float64(gamma)), augment_loop(f, m.M, gamma))


def _case_conv2d(rng):
    b, c, h, w = _dims(rng)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    dilation = int(rng.choice([1, 2, 4]))
    padding = dilation * (k - 1) // 2
    if conv_output_size(min(h, w), k, stride, dilation, padding) < 1:
        padding = dilation * (k - 1)
    c_out = int(rng.integers(1, 9))
    x = rng.standard_normal((b, c, h, w))
    wt = rng.standard_normal((c_out, c, k, k))
    bias = rng.standard_normal(c_out)
    return _err(conv2d_raw(x, wt, bias, stride, dilation, padding), conv2d_loop(x, wt, bias, stride, dilation, padding))


def _case_upsample(rng):
    b, c, h, w = _dims(rng)
    x = rng.standard_normal((b, c, h, w))
    th, tw = h + int(rng.integers(0, 7)), w + int(rng.integers(0, 7))
    return _err(upsample_bilinear(x, th, tw), bilinear_loop(x, th, tw))


def _logits_case(rng):
    b, c, h, w = _dims(rng)
    c = max(c, 2)
    zs = rng.standard_normal((b, c, h, w)) * 2
    zt = rng.standard_normal((b, c, h, w)) * 2
    labels = rng.integers(0, c, (b, h, w))
    labels[rng.random((b, h, w)) < 0.15] = 255
    labels[0, 0, 0] = 0
    mu = float(rng.uniform(0, 2))
    temp = float(rng.uniform(0.5, 3))
    return zs, zt, labels, losses.LossConfig(mu=mu, temperature=temp)


def _case_hard_ce(rng):
    zs, _, labels, cfg = _logits_case(rng)
    return abs(float(losses.hard_ce(zs, labels, cfg)) - hard_ce_loop(zs, labels))


def _case_kd_pixel(rng):
    zs, zt, labels, cfg = _logits_case(rng)
    got = float(losses.kd_pixel_loss(zs, zt, labels, cfg))
    return abs(got - kd_pixel_loop(zs, zt, labels, cfg.mu, cfg.temperature))


def _case_post_softmax(rng):
    zs, zt, labels, cfg = _logits_case(rng)
    got = float(losses.baseline_post_softmax(zs, zt, labels, cfg))
    return abs(got - post_softmax_loop(zs, zt, labels, cfg.mu, cfg.temperature))


def _case_hint(rng):
    b, cs, h, w = _dims(rng)
    ct = int(rng.integers(1, 9))
    fs, ft = rng.standard_normal((b, cs, h, w)), rng.standard_normal((b, ct, h, w))
    wt, bias = rng.standard_normal((ct, cs, 1, 1)), rng.standard_normal(ct)
    got = float(losses.baseline_hint(fs, ft, Conv2dLayer(wt, bias)))
    return abs(got - hint_loop(fs, ft, wt, bias))


def _case_attention(rng):
    b, cs, h, w = _dims(rng)
    ct = int(rng.integers(1, 9))
    fs, ft = rng.standard_normal((b, cs, h, w)), rng.standard_normal((b, ct, h, w))
    return abs(float(losses.baseline_attention(fs, ft)) - attention_loop(fs, ft))


CASES = {
    "matmul": _case_matmul,
    "s_pfs": _case_s_pfs,
    "c_pfs": _case_c_pfs,
    "pfs_loss": _case_pfs_loss,
    "augment": _case_augment,
    "conv2d": _case_conv2d,
    "upsample_bilinear": _case_upsample,
    "hard_ce": _case_hard_ce,
    "kd_pixel_loss": _case_kd_pixel,
    "baseline_post_softmax": _case_post_softmax,
    "baseline_hint": _case_hint,
    "baseline_attention": _case_attention,
}


def run_oracle_suite(instances: int = 200, seed: int = 0, tol: float = 1e-10, names=None) -> list[OracleResult]:
    results = []
    for k, (name, case) in enumerate(CASES.items()):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        worst = max(case(rng) for _ in range(instances))
        results.append(OracleResult(name, instances, worst, tol, time.perf_counter() - t0))
    return results
