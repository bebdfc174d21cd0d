"""Acceptance criteria, one test per criterion, each recording a PASS/FAIL line for the terminal summary.

Criteria 5, 6 and 8 share one multi-seed training run (about 15-20 minutes on one CPU core).
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from pfskd import losses
from pfskd.data import DatasetSpec, generate
from pfskd.experiment import ExperimentConfig, directional_checks, format_table, run_comparison
from pfskd.export import overlap_scores, sample_interior
from pfskd.gradsuite import run_grad_suite
from pfskd.losses import LossConfig
from pfskd.models import build, checkpoint_bytes, checkpoint_from_bytes, student_spec
from pfskd.oracles import run_oracle_suite
from pfskd.pfs import augment, s_pfs
from pfskd.tensor import tensor_from_buffer, tensor_to_bytes
from pfskd.trainer import TrainConfig, distill, poly_lr, train_teacher

# student runs use lambda = 1; see README "Distillation experiment" for why the default 1e3 is not used here
EXPERIMENT = ExperimentConfig(loss=LossConfig(lam=1.0))


def record(number: int, name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_LINES.append(f"criterion {number} {name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())


@pytest.fixture(scope="module")
def experiment():
    return run_comparison(EXPERIMENT)


def test_criterion_1_oracle_equivalence():
    t0 = time.time()
    results = run_oracle_suite(instances=200, seed=0, tol=1e-10)
    elapsed = time.time() - t0
    names = {r.name for r in results}
    required = {"matmul", "s_pfs", "c_pfs", "pfs_loss", "augment", "conv2d", "upsample_bilinear",
                "hard_ce", "kd_pixel_loss", "baseline_post_softmax", "baseline_hint", "baseline_attention"}
    worst = max(r.max_abs_err for r in results)
    ok = required <= names and all(r.passed and r.instances >= 200 for r in results) and elapsed < 60
    record(1, "oracle equivalence", ok, f"{len(results)} kernels x 200, max err {worst:.1e}, {elapsed:.1f}s")
    assert required <= names, required - names
    assert all(r.passed for r in results), [(r.name, r.max_abs_err) for r in results if not r.passed]
    assert elapsed < 60


def test_criterion_2_gradient_suite():
    t0 = time.time()
    reports = run_grad_suite(rounds=4, seed=0, h=1e-5, tol=1e-4)
    elapsed = time.time() - t0
    names = {r.name for r in reports}
    required = {"pfs_loss", "post_softmax_mimic", "kd_pixel_loss", "total_loss[pfs+gap]", "baseline_hint",
                "baseline_attention", "s_pfs", "c_pfs", "augment", "student_total_loss"}
    failed = [(r.name, r.max_rel_err) for r in reports if not r.passed]
    worst = max(r.max_rel_err for r in reports)
    ok = required <= names and not failed and len(reports) >= 100 and elapsed < 300
    record(2, "gradient suite", ok, f"{len(reports)} checks, max rel err {worst:.1e}, {elapsed:.1f}s")
    assert required <= names, required - names
    assert not failed, failed
    assert len(reports) >= 100
    assert elapsed < 300


def test_criterion_3_structural_invariants():
    rng = np.random.default_rng(3)
    worst_row = 0.0
    for k in range(1000):
        b, c, h, w = (int(v) for v in rng.integers(1, [3, 9, 7, 7]))
        dtype = np.float32 if k % 2 else np.float64
        m = s_pfs((rng.standard_normal((b, c, h, w)) * rng.uniform(0.1, 3)).astype(dtype)).M
        worst_row = max(worst_row, float(np.abs(m.sum(-1) - 1).max()))
    rows_ok = worst_row <= 1e-6

    gap_ok = True
    for _ in range(1000):
        c = int(rng.integers(2, 6))
        pt = losses.soft_targets(rng.standard_normal((1, c, 2, 2)) * 3)
        ps = losses.soft_targets(rng.standard_normal((1, c, 2, 2)) * 3)
        lab = rng.integers(0, c, (1, 2, 2))
        lab[0, 0, 0] = 255
        w = losses.gap_weights(pt, ps, lab)
        onehot = np.eye(c)[np.where(lab == 255, 0, lab)].transpose(0, 3, 1, 2)
        expect = np.maximum((pt * onehot).sum(1) - (ps * onehot).sum(1), 0)
        expect[lab == 255] = 0
        gap_ok &= bool(((w >= 0) & (w <= 1)).all() and np.array_equal(w, expect))

    f = rng.standard_normal((2, 8, 5, 4))
    identity_ok = np.array_equal(augment(f, s_pfs(f), np.array(0.0)), f)

    g = rng.standard_normal((1, 16, 4, 4))
    padded = np.concatenate([g, np.zeros_like(g)], axis=1)
    pad_err = float(np.abs(s_pfs(padded).M - s_pfs(g).M).max())

    fs, ft = rng.standard_normal((2, 4, 5, 5)), rng.standard_normal((2, 6, 5, 5))
    base = float(losses.baseline_attention(fs, ft))
    scale_err = max(abs(float(losses.baseline_attention(a * fs, b * ft)) - base) for a, b in ((2.5, 1), (1, 0.3),
                                                                                             (7.0, 0.01)))
    ok = rows_ok and gap_ok and identity_ok and pad_err <= 1e-12 and scale_err <= 1e-10
    record(3, "structural invariants", ok,
           f"row err {worst_row:.1e}, gap rule {gap_ok}, gamma=0 identity {identity_ok}, "
           f"pad err {pad_err:.1e}, attention scale err {scale_err:.1e}")
    assert rows_ok and gap_ok and identity_ok
    assert pad_err <= 1e-12 and scale_err <= 1e-10


def test_criterion_4_formula_exactness():
    total = 63 * 60
    lr_err = max(abs(poly_lr(0.01, it, total) - 0.01 * (1 - it / total) ** 0.9) for it in range(total + 1))

    splits = generate(DatasetSpec(n_train=16, n_val=8))
    teacher = train_teacher(TrainConfig(epochs=1), splits).net
    worst = 0.0
    for mode, lam in (("pfs+gap", 1e3), ("pfs", 10.0), ("post_softmax", 1e3), ("attention", 1e3), ("hint", 1e3)):
        cfg = TrainConfig(epochs=1, mode=mode, loss=LossConfig(lam=lam, mu=0.7))
        for s in distill(cfg, teacher, splits).step_log:
            expect = s["L_hard"] + 0.7 * s["L_soft_weighted"] + lam * s["L_pfs"]
            worst = max(worst, abs(s["L_total"] - expect))

    cfg = TrainConfig()
    defaults = {"mu": cfg.loss.mu, "lambda": cfg.loss.lam, "T": cfg.loss.temperature, "momentum": cfg.momentum,
                "weight_decay": cfg.weight_decay, "base_lr": cfg.base_lr, "epochs": cfg.epochs}
    expected = {"mu": 1.0, "lambda": 1e3, "T": 1.0, "momentum": 0.9, "weight_decay": 1e-4, "base_lr": 0.01, "epochs": 60}
    ok = lr_err <= 1e-12 and worst <= 1e-9 and defaults == expected
    record(4, "formula exactness", ok, f"poly err {lr_err:.1e}, decomposition err {worst:.1e}, defaults {defaults}")
    assert lr_err <= 1e-12
    assert worst <= 1e-9
    assert defaults == expected


def test_criterion_5_directional_result(experiment):
    checks = directional_checks(experiment)
    table = format_table(experiment)
    print("\n" + table)
    failed = [k for k, v in checks.items() if not v]
    detail = (f"none {experiment.mean('none'):.4f}, post_softmax {experiment.mean('post_softmax'):.4f}, "
              f"pfs+gap {experiment.mean('pfs+gap'):.4f}, wins {experiment.wins('pfs+gap')}/5, "
              f"teacher {experiment.teacher_miou:.4f}, {experiment.seconds / 60:.1f} min")
    if failed:
        detail += f"; failed: {', '.join(failed)}"
    record(5, "directional distillation result", not failed, detail)
    for line in table.splitlines():
        ACCEPTANCE_LINES.append("    " + line)
    assert not failed, f"{failed}\n{table}"


def test_criterion_6_ablation_table(experiment):
    means = {m: experiment.mean(m) for m in ("pfs", "gap", "none")}
    order = means["pfs"] >= means["gap"] >= means["none"]
    record(6, "ablation table emitted", True,
           "means " + ", ".join(f"{k} {v:.4f}" for k, v in means.items())
           + f"; pfs >= gap >= none {'holds' if order else 'does not hold'} (reported, not asserted)")
    assert set(experiment.scores) >= {"pfs", "gap", "none"}


def test_criterion_7_determinism_and_round_trips():
    splits = generate(DatasetSpec(n_train=16, n_val=8))
    teacher = train_teacher(TrainConfig(epochs=1), splits).net
    before = teacher.param_hash()
    cfg = TrainConfig(epochs=2, mode="pfs+gap", seed=4)
    a, b = distill(cfg, teacher, splits), distill(cfg, teacher, splits)
    logs_equal = a.step_log == b.step_log and a.epoch_log == b.epoch_log
    hash_ok = teacher.param_hash() == before and a.teacher_hash == (before, before)

    rng = np.random.default_rng(7)
    tensors_ok = True
    for dtype in (np.float32, np.float64, np.uint8):
        t = (rng.standard_normal((2, 3, 4, 5)) * 40).astype(dtype)
        back, _ = tensor_from_buffer(tensor_to_bytes(t))
        tensors_ok &= back.dtype == t.dtype and back.tobytes() == t.tobytes()
    ck_ok = True
    for net in (a.net, teacher, build(student_spec(), 9, np.float64)):
        buf = checkpoint_bytes(net)
        back = checkpoint_from_bytes(buf)
        ck_ok &= checkpoint_bytes(back) == buf and back.param_hash() == net.param_hash()
    ok = logs_equal and hash_ok and tensors_ok and ck_ok
    record(7, "determinism and round trips", ok,
           f"logs identical {logs_equal}, teacher hash unchanged {hash_ok}, tensor {tensors_ok}, checkpoint {ck_ok}")
    assert logs_equal and hash_ok and tensors_ok and ck_ok


def test_criterion_8_visualization(experiment):
    splits = generate(EXPERIMENT.dataset)
    imgs, lbls = splits["val"]
    teacher = experiment.teacher
    picks = sample_interior(lbls, 10, seed=0, stride=teacher.spec.output_stride)

    def ratios(source):
        return [overlap_scores(teacher, imgs[i], lbls[i], [(y, x)], source=source)[0].ratio for i, y, x in picks]
    feat = ratios("feature")
    module = ratios("module")
    hits = sum(r >= 1.5 for r in feat)
    module_hits = sum(r >= 1.5 for r in module)
    record(8, "visualization contract", hits >= 7,
           f"feature-level map {hits}/10 pixels with overlap >= 1.5x prior; "
           f"learned C-PFS layer map {module_hits}/10 (reported)")
    assert hits >= 7, [round(r, 2) for r in feat]
