"""
Teacher, student and distillation in a few minutes
==================================================

Trains a small teacher on the synthetic shapes dataset, then two students
against it: one with hard labels only and one with the PFS + gap objective.
Epoch counts are cut down so the script finishes on a laptop CPU.
"""

import logging

from pfskd.data import CLASS_NAMES, DatasetSpec, generate
from pfskd.losses import LossConfig
from pfskd.metrics import report_table
from pfskd.trainer import TrainConfig, distill, evaluate, train_teacher

logging.basicConfig(level=logging.INFO, format="%(message)s")

############################################################
# Data: 48x48 images with circles, rectangles and triangles on a noisy background

splits = generate(DatasetSpec(n_train=200, n_val=50))
imgs, lbls = splits["train"]
print("train images", imgs.shape, imgs.dtype, "labels", lbls.shape, lbls.dtype)

############################################################
# Teacher: wider and deeper, with a learned C-PFS module

teacher = train_teacher(TrainConfig(epochs=15), splits).net
print(report_table(evaluate(teacher, *splits["val"]), CLASS_NAMES))

############################################################
# Two students from the same seed

for mode in ("none", "pfs+gap"):
    cfg = TrainConfig(epochs=10, mode=mode, seed=1, loss=LossConfig(lam=1.0))
    run = distill(cfg, teacher, splits)
    print(f"{mode:8s} best val mIoU {run.best_miou:.4f} (epoch {run.best_epoch})")
