"""Central-difference gradient checks for every differentiable op and loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses, pfs
from .autodiff import GradcheckReport, gradcheck
from .models import SegNetSpec, build
from .nn import Conv2dLayer, conv2d_raw, upsample_bilinear


def _probe(rng, shape):
    """Fixed random weights turning a tensor-valued op into a scalar."""
    r = rng.standard_normal(shape)
    return lambda out: ad.sum_(ad.mul(out, r))


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _elementwise(rng):
    shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 4))))
    p = _probe(rng, shape)
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    pos = rng.uniform(0.5, 2.0, shape)
    sh = _away_from_zero(rng, shape)
    bshape = (1,) * (len(shape) - 1) + (shape[-1],)
    bb = rng.standard_normal(bshape)
    return [
        ("add", lambda x, y: p(ad.add(x, y)), [a, b]),
        ("add_broadcast", lambda x, y: p(ad.add(x, y)), [a, bb]),
        ("sub", lambda x, y: p(ad.sub(x, y)), [a, b]),
        ("mul", lambda x, y: p(ad.mul(x, y)), [a, b]),
        ("mul_broadcast", lambda x, y: p(ad.mul(x, y)), [a, bb]),
        ("div", lambda x, y: p(ad.div(x, y)), [a, pos]),
        ("scale", lambda x: p(ad.scale(x, 1.7)), [a]),
        ("abs", lambda x: p(ad.abs_(x)), [sh]),
        ("exp", lambda x: p(ad.exp(x)), [a]),
        ("log", lambda x: p(ad.log(x)), [pos]),
        ("sqrt", lambda x: p(ad.sqrt(x)), [pos]),
        ("max0", lambda x: p(ad.relu(x)), [sh]),
        ("clamp_min", lambda x: p(ad.clamp_min(x, 0.0)), [sh]),
    ]


def _reductions(rng):
    shape = tuple(int(s) for s in rng.integers(2, 5, size=3))
    axis = int(rng.integers(0, 3))
    x = rng.standard_normal(shape)
    pr = _probe(rng, tuple(s for i, s in enumerate(shape) if i != axis))
    return [
        ("sum", lambda v: ad.sum_(ad.mul(v, v)), [x]),
        ("sum_axis", lambda v: pr(ad.sum_(v, axis=axis)), [x]),
        ("mean_axis", lambda v: pr(ad.mean(v, axis=axis)), [x]),
        ("max_axis", lambda v: pr(ad.max_(v, axis=axis)), [x]),
        ("reshape", lambda v: _probe(np.random.default_rng(1), (shape[0] * shape[1], shape[2]))(
            ad.reshape(v, (shape[0] * shape[1], shape[2]))), [x]),
        ("transpose", lambda v: _probe(np.random.default_rng(2), shape[::-1])(ad.transpose(v)), [x]),
    ]


def _linalg(rng):
    m, k, n = (int(v) for v in rng.integers(1, 7, 3))
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    bsz = int(rng.integers(1, 3))
    a3, b3 = rng.standard_normal((bsz, m, k)), rng.standard_normal((bsz, k, n))
    x = rng.standard_normal((m, n)) * 2
    return [
        ("matmul", lambda u, v: _probe(np.random.default_rng(3), (m, n))(ad.matmul(u, v)), [a, b]),
        ("matmul_batched", lambda u, v: _probe(np.random.default_rng(4), (bsz, m, n))(ad.matmul(u, v)), [a3, b3]),
        ("softmax_rows", lambda v: _probe(np.random.default_rng(5), (m, n))(ad.softmax_rows(v)), [x]),
        ("log_softmax", lambda v: _probe(np.random.default_rng(6), (m, n))(ad.log_softmax(v, axis=1)), [x]),
    ]


def _layers(rng):
    b, c, h, w = 1 + int(rng.integers(0, 2)), int(rng.integers(1, 4)), int(rng.integers(3, 7)), int(rng.integers(3, 7))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    dil = int(rng.choice([1, 2, 4]))
    pad = dil * (k - 1) // 2
    c_out = int(rng.integers(1, 4))
    x = rng.standard_normal((b, c, h, w))
    wt = rng.standard_normal((c_out, c, k, k)) * 0.5
    bias = rng.standard_normal(c_out)
    out_shape = conv2d_raw(x, wt, bias, stride, dil, pad).shape
    pc = _probe(rng, out_shape)
    th, tw = h + int(rng.integers(0, 5)), w + int(rng.integers(0, 5))
    pu = _probe(rng, (b, c, th, tw))
    return [
        (f"conv2d_k{k}_s{stride}_d{dil}", lambda u, v, z: pc(conv2d_raw(u, v, z, stride, dil, pad)), [x, wt, bias]),
        ("upsample_bilinear", lambda u: pu(upsample_bilinear(u, th, tw)), [x]),
    ]


def _pfs_checks(rng):
    b, c, h, w = 1 + int(rng.integers(0, 2)), int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    f = rng.standard_normal((b, c, h, w)) * 0.7
    ft = rng.standard_normal((b, c, h, w)) * 0.7
    n = h * w
    pm = _probe(rng, (b, n, n))
    cc = max(c, 8)
    fc = rng.standard_normal((b, cc, h, w)) * 0.7
    r = pfs.reduced_channels(cc)
    w1, w2 = rng.standard_normal((r, cc, 1, 1)) * 0.5, rng.standard_normal((r, cc, 1, 1)) * 0.5
    b1, b2 = rng.standard_normal(r) * 0.1, rng.standard_normal(r) * 0.1
    teacher = pfs.s_pfs(ft)
    pa = _probe(rng, (b, c, h, w))
    gamma = np.array(rng.standard_normal())

    def cpfs(x, u1, v1, u2, v2):
        return pm(pfs.c_pfs(x, pfs.CPfsTransforms(Conv2dLayer(u1, v1), Conv2dLayer(u2, v2))).M)

    def aug(x, g):
        return pa(pfs.augment(x, pfs.s_pfs(x), g))
    return [
        ("s_pfs", lambda x: pm(pfs.s_pfs(x).M), [f]),
        ("c_pfs", cpfs, [fc, w1, b1, w2, b2]),
        ("pfs_loss", lambda x: pfs.pfs_loss(teacher, pfs.s_pfs(x)), [f]),
        ("augment", aug, [f, gamma]),
    ]


def frozen_gap_weights(zs, zt, labels, cfg):
    """Gap weights at the base point; finite differences must hold them fixed, as backward does."""
    return losses.gap_weights(losses.soft_targets(zt, cfg.temperature), losses.soft_targets(zs, 1.0), labels, cfg)


def _loss_checks(rng):
    b, c, h, w = 1 + int(rng.integers(0, 2)), int(rng.integers(2, 6)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
    zs = rng.standard_normal((b, c, h, w))
    zt = rng.standard_normal((b, c, h, w)) * 2
    labels = rng.integers(0, c, (b, h, w))
    labels[rng.random((b, h, w)) < 0.2] = 255
    labels.flat[0] = 0
    cfg = losses.LossConfig(mu=float(rng.uniform(0.5, 2)), temperature=float(rng.uniform(0.5, 2)))
    w0 = frozen_gap_weights(zs, zt, labels, cfg)
    cs, ct = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    fs, ftt = rng.standard_normal((b, cs, h, w)), rng.standard_normal((b, ct, h, w))
    aw, ab = rng.standard_normal((ct, cs, 1, 1)) * 0.5, rng.standard_normal(ct) * 0.1
    return [
        ("hard_ce", lambda z: losses.hard_ce(z, labels, cfg), [zs]),
        ("post_softmax_mimic", lambda z: losses.baseline_post_softmax(z, zt, labels, cfg), [zs]),
        ("kd_pixel_loss", lambda z: losses.kd_pixel_loss(z, zt, labels, cfg, weights=w0), [zs]),
        ("baseline_hint", lambda x, u, v: losses.baseline_hint(x, ftt, Conv2dLayer(u, v)), [fs, aw, ab]),
        ("baseline_attention", lambda x: losses.baseline_attention(x, ftt), [fs]),
    ]


TINY_STUDENT = SegNetSpec(stem=[(4, 2)], body=[(4, 2)], pfs_variant="s_pfs", num_classes=3)
TINY_TEACHER = SegNetSpec(stem=[(4, 2)], body=[(8, 2)], pfs_variant="c_pfs", num_classes=3)


def _total_checks(rng, size=8):
    """total_loss through a small student net, every mode, with the teacher as constants."""
    seed = int(rng.integers(0, 2**31))
    student = build(TINY_STUDENT, seed, np.float64)
    teacher = build(TINY_TEACHER, seed + 1, np.float64)
    teacher.params["pfs.gamma"] = np.array(0.3)
    student.params["pfs.gamma"] = np.array(0.2)
    x = rng.random((2, 3, size, size))
    labels = rng.integers(0, 3, (2, size, size))
    t_out = teacher.forward(x)
    names = list(student.params)
    cfg = losses.LossConfig(mu=1.0, lam=10.0)

    w0 = frozen_gap_weights(student.forward(x)["logits"], t_out["logits"], labels, cfg)

    def make(mode):
        def f(*vals):
            out = student.forward(x, dict(zip(names, vals)))
            return losses.total_loss(out, t_out, labels, cfg, mode, weights=w0)[0]
        return f
    vals = [student.params[k] for k in names]
    return [(f"total_loss[{m}]", make(m), vals) for m in ("pfs+gap", "pfs", "gap", "post_softmax", "attention")]


def network_gradcheck(size: int = 16, seed: int = 0, max_coords: int = 40) -> GradcheckReport:
    """End-to-end check of the pfs+gap total loss through the default student at a small input size."""
    from .models import student_spec, teacher_spec
    rng = np.random.default_rng(seed)
    student = build(student_spec(), seed, np.float64)
    teacher = build(teacher_spec(), seed + 1, np.float64)
    student.params["pfs.gamma"] = np.array(0.1)
    teacher.params["pfs.gamma"] = np.array(0.1)
    x = rng.random((1, 3, size, size))
    labels = rng.integers(0, 4, (1, size, size))
    t_out = teacher.forward(x)
    names = list(student.params)
    cfg = losses.LossConfig()
    w0 = frozen_gap_weights(student.forward(x)["logits"], t_out["logits"], labels, cfg)

    def f(*vals):
        out = student.forward(x, dict(zip(names, vals)))
        return losses.total_loss(out, t_out, labels, cfg, "pfs+gap", weights=w0)[0]
    return gradcheck(f, [student.params[k] for k in names], name="student_total_loss", max_coords=max_coords,
                     rng=np.random.default_rng(seed))


GROUPS = (_elementwise, _reductions, _linalg, _layers, _pfs_checks, _loss_checks)


def run_grad_suite(rounds: int = 4, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                   include_network: bool = True) -> list[GradcheckReport]:
    reports = []
    for r in range(rounds):
        for g, group in enumerate(GROUPS):
            rng = np.random.default_rng([seed, r, g])
            for name, f, inputs in group(rng):
                reports.append(gradcheck(f, inputs, h=h, tol=tol, name=name))
        rng = np.random.default_rng([seed, r, 99])
        for name, f, inputs in _total_checks(rng):
            reports.append(gradcheck(f, inputs, h=h, tol=tol, name=name, max_coords=25, rng=rng))
    if include_network:
        reports.append(network_gradcheck())
    return reports
