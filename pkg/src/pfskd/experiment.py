"""Multi-seed teacher/student comparison on the synthetic dataset.

One teacher is trained (falling back to other seeds if it does not beat the
vanilla student clearly), then one student per (mode, seed) is distilled from
it and scored by best validation mIoU.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSpec, generate
from .losses import LossConfig
from .models import Network
from .trainer import TrainConfig, distill, train_teacher

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seeds: tuple = (1, 2, 3, 4, 5)
    modes: tuple = ("none", "post_softmax", "pfs+gap", "pfs", "gap")
    teacher_seeds: tuple = (0, 100, 200)  # first is used; the rest are fallbacks
    teacher_epochs: int = 40
    student_epochs: int = 20
    loss: LossConfig = field(default_factory=LossConfig)
    min_teacher_margin: float = 0.02
    dataset: DatasetSpec = field(default_factory=DatasetSpec)


@dataclass
class ExperimentResult:
    teacher_seed: int
    teacher_miou: float
    scores: dict  # mode -> {seed: best val mIoU}
    seconds: float
    rejected_teachers: list = field(default_factory=list)  # (seed, teacher mIoU, vanilla mean)
    teacher: Network | None = field(default=None, repr=False)

    def mean(self, mode: str) -> float:
        return float(np.mean(list(self.scores[mode].values())))

    def wins(self, mode: str, over: str = "none") -> int:
        return sum(self.scores[mode][s] > self.scores[over][s] for s in self.scores[mode])


def _student(cfg: ExperimentConfig, mode: str, seed: int, teacher: Network, splits) -> float:
    tc = TrainConfig(epochs=cfg.student_epochs, mode=mode, seed=seed, loss=cfg.loss)
    t0 = time.time()
    r = distill(tc, teacher, splits)
    log.info("  %-13s seed %d  mIoU %.4f  (%.0fs)", mode, seed, r.best_miou, time.time() - t0)
    return r.best_miou


def run_comparison(cfg: ExperimentConfig | None = None, splits: dict | None = None) -> ExperimentResult:
    cfg = cfg or ExperimentConfig()
    splits = generate(cfg.dataset) if splits is None else splits
    t0 = time.time()
    scores: dict = {m: {} for m in cfg.modes}
    rejected = []
    for tseed in cfg.teacher_seeds:
        teacher_run = train_teacher(TrainConfig(epochs=cfg.teacher_epochs, seed=tseed), splits)
        teacher, t_miou = teacher_run.net, teacher_run.best_miou
        log.info("teacher seed %d: val mIoU %.4f", tseed, t_miou)
        # vanilla students do not depend on the teacher, so they are reused across fallbacks
        for s in cfg.seeds:
            if s not in scores["none"]:
                scores["none"][s] = _student(cfg, "none", s, teacher, splits)
        vanilla = float(np.mean(list(scores["none"].values())))
        if t_miou - vanilla >= cfg.min_teacher_margin:
            break
        rejected.append((tseed, t_miou, vanilla))
        log.warning("teacher seed %d beats vanilla by only %.4f; trying the next seed", tseed, t_miou - vanilla)
    else:
        raise RuntimeError(f"no teacher seed in {cfg.teacher_seeds} beats the vanilla student by "
                           f"{cfg.min_teacher_margin}")
    for mode in cfg.modes:
        if mode == "none":
            continue
        for s in cfg.seeds:
            scores[mode][s] = _student(cfg, mode, s, teacher, splits)
    return ExperimentResult(tseed, t_miou, scores, time.time() - t0, rejected, teacher)


def directional_checks(res: ExperimentResult) -> dict[str, bool]:
    """The pass/fail conditions for the combined mode; every other mode is reported only."""
    full, post, van = res.mean("pfs+gap"), res.mean("post_softmax"), res.mean("none")
    n = len(res.scores["none"])
    return {
        "teacher beats vanilla by >= 0.02": res.teacher_miou - van >= 0.02,
        "pfs+gap > post_softmax": full > post,
        "post_softmax > none": post > van,
        "pfs+gap - none >= 0.01": full - van >= 0.01,
        f"pfs+gap beats none on >= {n - 1}/{n} seeds": res.wins("pfs+gap") >= n - 1,
    }


def format_table(res: ExperimentResult) -> str:
    seeds = sorted(res.scores["none"])
    head = f"{'mode':<13}" + "".join(f"  s{s:<5}" for s in seeds) + "    mean   wins"
    lines = [f"teacher (seed {res.teacher_seed}) val mIoU {res.teacher_miou:.4f}", head]
    for mode, per_seed in res.scores.items():
        cells = "".join(f"  {per_seed[s]:.4f}" for s in seeds)
        wins = "" if mode == "none" else f"  {res.wins(mode)}/{len(seeds)}"
        lines.append(f"{mode:<13}{cells}  {res.mean(mode):.4f}{wins}")
    return "\n".join(lines)
