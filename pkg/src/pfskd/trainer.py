"""SGD with poly learning-rate decay, teacher training and distillation loops."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .data import batches
from .losses import MODES, LossConfig, total_loss
from .metrics import ConfusionMatrix, SegScores, miou
from .models import Network, SegNetSpec, build, save_checkpoint, student_spec, teacher_spec
from .nn import Conv2dLayer, init_params
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

STEP_COLUMNS = ["step", "lr", "L_hard", "L_soft_weighted", "L_pfs", "L_total"]
EPOCH_COLUMNS = ["epoch", "mean_loss", "val_miou", "val_pixel_acc", "best"]


class ConfigError(ValueError):
    """Invalid or unknown configuration key."""


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    mode: str = "none"
    seed: int = 0
    dtype: str = "float32"
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss: LossConfig = field(default_factory=LossConfig)
    net: dict | None = None  # SegNetSpec as JSON; None picks the default for the role
    dataset: str | None = None
    out: str | None = None
    augment: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = _from_dict(LossConfig, self.loss, "loss")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.base_lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("need base_lr > 0, 0 <= momentum < 1, weight_decay >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d, "")


def _from_dict(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


# --- optimisation --------------------------------------------------------------------------

def poly_lr(base_lr: float, it: int, total_iter: int, power: float = 0.9) -> float:
    if total_iter <= 0 or not 0 <= it <= total_iter:
        raise ValueError(f"need 0 <= iter <= total_iter and total_iter > 0, got {it}/{total_iter}")
    return base_lr * (1.0 - it / total_iter) ** power


def no_decay(name: str) -> bool:
    return name.endswith(".bias") or name.endswith("gamma")


@dataclass
class OptimState:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_iters: int = 1
    iter: int = 0
    buffers: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, opt: OptimState, lr: float) -> None:
    """v <- momentum * v + g + wd * p ;  p <- p - lr * v.  Biases and gamma skip weight decay."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        d = g if no_decay(name) or opt.weight_decay == 0 else g + p.dtype.type(opt.weight_decay) * p
        v = opt.buffers.get(name)
        v = d.copy() if v is None else p.dtype.type(opt.momentum) * v + d
        opt.buffers[name] = v
        params[name] = (p - p.dtype.type(lr) * v).astype(p.dtype)
    opt.iter += 1


# --- evaluation ----------------------------------------------------------------------------

def predict(net: Network, images: np.ndarray, batch_size: int = 50) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        logits = net.forward(images[s:s + batch_size].astype(net.dtype))["logits"]
        out.append(np.argmax(logits, axis=1).astype(np.uint8))
    return np.concatenate(out)


def evaluate(net: Network, images: np.ndarray, labels: np.ndarray, batch_size: int = 50) -> SegScores:
    cm = ConfusionMatrix(net.spec.num_classes)
    cm.accumulate(predict(net, images, batch_size), labels)
    return miou(cm)


# --- training loops ------------------------------------------------------------------------

@dataclass
class TrainResult:
    net: Network  # best-by-val-mIoU weights
    final: Network
    best_miou: float
    best_epoch: int
    step_log: list = field(repr=False, default_factory=list)
    epoch_log: list = field(repr=False, default_factory=list)
    teacher_hash: tuple | None = None


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def fit(net: Network, splits: dict, cfg: TrainConfig, teacher: Network | None = None,
        adapter: Conv2dLayer | None = None, progress: bool = False) -> TrainResult:
    """Generic loop: taped student forward, total loss for ``cfg.mode``, backward, SGD."""
    mode = cfg.mode
    if mode != "none" and teacher is None:
        raise ValueError(f"mode {mode!r} needs a teacher")
    dtype = np.dtype(cfg.dtype)
    train_x, train_y = splits["train"]
    val_x, val_y = splits["val"]
    train_x = train_x.astype(dtype)
    per_epoch = math.ceil(len(train_x) / cfg.batch_size)
    opt = OptimState(cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.epochs * per_epoch)
    adapter_params = {}
    if adapter is not None:
        adapter_params = {"adapter.weight": adapter.weight, "adapter.bias": adapter.bias}
    best = (-1.0, -1, net.copy())
    step_log, epoch_log = [], []
    for epoch in range(cfg.epochs):
        losses = []
        for batch in batches(train_x, train_y, cfg.batch_size, epoch_seed(cfg.seed, epoch), augment=cfg.augment):
            lr = poly_lr(cfg.base_lr, opt.iter, opt.total_iters)
            tape = Tape()
            p = net.bind(tape)
            ap = {k: tape.leaf(v, name=k) for k, v in adapter_params.items()}
            s_out = net.forward(batch.images, p)
            t_out = teacher.forward(batch.images) if mode != "none" else None
            bound_adapter = adapter.bind(ap["adapter.weight"], ap["adapter.bias"]) if ap else None
            loss, bd = total_loss(s_out, t_out, batch.labels, cfg.loss, mode, bound_adapter)
            if not np.isfinite(bd.total):
                raise NonFiniteError(f"non-finite loss at step {opt.iter} (epoch {epoch})")
            tape.backward(loss)
            grads = {k: v.grad for k, v in p.items()}
            grads.update({k: v.grad for k, v in ap.items()})
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise NonFiniteError(f"non-finite gradient at step {opt.iter}")
            params = dict(net.params)
            params.update(adapter_params)
            step = opt.iter
            sgd_step(params, grads, opt, lr)
            for k in net.params:
                net.params[k] = params[k]
            for k in adapter_params:
                adapter_params[k] = params[k]
            step_log.append({"step": step, "lr": lr, "L_hard": bd.hard, "L_soft_weighted": bd.soft_weighted,
                             "L_pfs": bd.pfs, "L_total": bd.total})
            losses.append(bd.total)
        scores = evaluate(net, val_x, val_y)
        improved = scores.mean_iou > best[0]
        if improved:
            best = (scores.mean_iou, epoch, net.copy())
        epoch_log.append({"epoch": epoch, "mean_loss": float(np.mean(losses)), "val_miou": scores.mean_iou,
                          "val_pixel_acc": scores.pixel_acc, "best": int(improved)})
        if progress:
            log.info("epoch %d loss %.4f val mIoU %.4f", epoch, np.mean(losses), scores.mean_iou)
    if adapter is not None:
        adapter.weight, adapter.bias = adapter_params["adapter.weight"], adapter_params["adapter.bias"]
    result = TrainResult(best[2], net, best[0], best[1], step_log, epoch_log)
    if cfg.out:
        save_run(result, cfg)
    return result


def save_run(result: TrainResult, cfg: TrainConfig, name: str = "model") -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.net, out / f"{name}.pfck")
    write_csv(out / "steps.csv", STEP_COLUMNS, result.step_log)
    write_csv(out / "epochs.csv", EPOCH_COLUMNS, result.epoch_log)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def _spec(cfg: TrainConfig, default: SegNetSpec) -> SegNetSpec:
    return SegNetSpec.from_json(cfg.net) if cfg.net is not None else default


def load_splits(cfg: TrainConfig) -> dict:
    from .data import load_dataset
    if cfg.dataset is None:
        raise ConfigError("dataset: no dataset path given")
    if not os.path.exists(os.path.join(cfg.dataset, "manifest.json")):
        raise ConfigError(f"dataset: no manifest.json under {cfg.dataset}")
    return load_dataset(cfg.dataset)[1]


def train_teacher(cfg: TrainConfig, splits: dict | None = None, progress: bool = False) -> TrainResult:
    """Hard cross entropy only; keeps the best-val-mIoU weights."""
    if cfg.mode != "none":
        raise ConfigError("train_teacher runs with mode 'none'")
    splits = load_splits(cfg) if splits is None else splits
    net = build(_spec(cfg, teacher_spec()), cfg.seed, np.dtype(cfg.dtype))
    return fit(net, splits, cfg, progress=progress)


def make_adapter(student: Network, teacher: Network, seed: int) -> Conv2dLayer:
    layer = Conv2dLayer.create(student.spec.feat_channels, teacher.spec.feat_channels, 1, dtype=student.dtype)
    init_params(layer, np.random.default_rng([seed, 7]))
    return layer


def distill(cfg: TrainConfig, teacher: Network, splits: dict | None = None, progress: bool = False) -> TrainResult:
    """Train a student against a frozen teacher; the teacher's parameter hash is checked after the run."""
    splits = load_splits(cfg) if splits is None else splits
    student = build(_spec(cfg, student_spec(teacher.spec.num_classes)), cfg.seed, np.dtype(cfg.dtype))
    if student.spec.output_stride != teacher.spec.output_stride:
        raise ValueError(f"student output stride {student.spec.output_stride} != teacher "
                         f"{teacher.spec.output_stride}: PFS maps would not align")
    if student.spec.num_classes != teacher.spec.num_classes:
        raise ValueError("student and teacher disagree on the number of classes")
    teacher = teacher if teacher.dtype == student.dtype else _cast(teacher, student.dtype)
    before = teacher.param_hash()
    adapter = make_adapter(student, teacher, cfg.seed) if cfg.mode == "hint" else None
    result = fit(student, splits, cfg, teacher=teacher if cfg.mode != "none" else None, adapter=adapter,
                 progress=progress)
    after = teacher.param_hash()
    if before != after:
        raise RuntimeError("teacher parameters changed during distillation")
    result.teacher_hash = (before, after)
    return result


def _cast(net: Network, dtype) -> Network:
    return Network(net.spec, {k: v.astype(dtype) for k, v in net.params.items()})
