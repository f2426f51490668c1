"""Teacher training, student distillation, evaluation and the attribution gap."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .attribution import layer_pairs, student_maps, teacher_maps
from .data import Dataset, batches, trim
from .distill import (DistillConfig, LossBreakdown, attribution_loss, ce_loss, logit_kd_loss,
                      total_loss)
from .metrics import CLASSIFICATION_METRICS, MetricResult, compute
from .model import Model, ModelConfig, forward, predict_logits, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    warmup: float = 0.1
    clip_norm: float = 1.0
    metric: str = "accuracy"

    def validate(self) -> list[str]:
        errors = []
        if not isinstance(self.lr, (int, float)) or isinstance(self.lr, bool) or not self.lr > 0:
            errors.append(f"lr must be > 0, got {self.lr!r}")
        for name in ("batch_size",):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                errors.append(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.epochs, int) or isinstance(self.epochs, bool) or self.epochs < 0:
            errors.append(f"epochs must be a non-negative integer, got {self.epochs!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            errors.append(f"seed must be an integer, got {self.seed!r}")
        if not isinstance(self.warmup, (int, float)) or not 0 <= self.warmup < 1:
            errors.append(f"warmup must lie in [0, 1), got {self.warmup!r}")
        if not isinstance(self.clip_norm, (int, float)) or self.clip_norm < 0:
            errors.append(f"clip_norm must be >= 0, got {self.clip_norm!r}")
        if self.metric not in ("accuracy", "f1", "matthews", "spearman"):
            errors.append(f"metric must be accuracy/f1/matthews/spearman, got {self.metric!r}")
        return errors


@dataclass
class TrainReport:
    kind: str
    seed: int
    metric: str
    epochs: list[dict] = field(default_factory=list)
    best_dev_metric: float | None = None
    best_epoch: int | None = None
    best_checkpoint: str | None = None
    steps: int = 0
    wall_clock_seconds: float = 0.0
    vanilla_equivalent: bool | None = None
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def deterministic_view(self) -> dict:
        """Everything except timing, for reproducibility comparisons."""
        d = self.as_dict()
        d.pop("wall_clock_seconds")
        return d


class Adam:
    """Adam with linear warmup then linear decay and global-norm clipping."""

    def __init__(self, params: dict[str, E.Tensor], lr: float, total_steps: int, warmup: float = 0.1,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float = 1.0):
        self.params = params
        self.lr = lr
        self.total = max(int(total_steps), 1)
        self.warmup_steps = int(math.ceil(warmup * self.total))
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``."""
        w, total = self.warmup_steps, self.total
        if step < w:
            return self.lr * (step + 1) / w
        return self.lr * max(total - step, 0) / max(total - w, 1)

    def step(self, grads: dict[str, np.ndarray]) -> float:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        lr = self.lr_at(self.t)
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
        return norm


def _param_grads(loss: E.Tensor, model: Model) -> dict[str, np.ndarray]:
    names = list(model.params)
    gs = E.grad(loss, [model.params[k] for k in names])
    return {k: g.data for k, g in zip(names, gs)}


def _steps_per_epoch(n: int, size: int) -> int:
    return (n + size - 1) // size


# --- evaluation -------------------------------------------------------------

def predictions(model: Model, data: Dataset, batch_size: int = 64) -> np.ndarray:
    out = []
    for b in batches(data, batch_size, shuffle=False):
        logits = predict_logits(model, b.ids, b.mask)
        out.append(logits[:, 0] if model.config.is_regression else np.argmax(logits, axis=-1))
    return np.concatenate(out) if out else np.zeros(0)


def dev_loss(model: Model, data: Dataset, batch_size: int = 64) -> float:
    """Mean cross-entropy (squared error for regression) over a split."""
    total = 0.0
    with E.no_grad():
        for b in batches(data, batch_size, shuffle=False):
            total += ce_loss(forward(model, b.ids, b.mask), b.labels).item() * len(b.index)
    return total / len(data)


def evaluate(model: Model, data: Dataset, metric: str = "accuracy", batch_size: int = 64) -> MetricResult:
    if model.config.is_regression and metric in CLASSIFICATION_METRICS:
        raise ValueError(f"metric {metric!r} needs a classification model")
    if not model.config.is_regression and metric == "spearman":
        raise ValueError("spearman needs a regression model")
    return compute(metric, predictions(model, data, batch_size), data.labels)


# --- loops ------------------------------------------------------------------

def _run_loop(kind, model, train, dev, epochs, batch_size, seed, metric, step_fn, opt,
              report, out_dir, ckpt_name, extra, losses_sink):
    best_arrays, best_loss = None, math.inf
    start = time.perf_counter()
    step = 0
    for epoch in range(epochs):
        totals: dict[str, list[float]] = {}
        for b in batches(train, batch_size, seed=seed * 1000 + epoch, shuffle=True):
            try:
                loss, breakdown = step_fn(b)
                if not math.isfinite(breakdown.total):
                    raise E.NonFiniteError("loss is not finite")
                grads = _param_grads(loss, model)
            except E.NonFiniteError as exc:
                report.wall_clock_seconds = time.perf_counter() - start
                raise TrainingDiverged(f"{kind} training diverged at step {step}: {exc}", report) from exc
            opt.step(grads)
            losses_sink.append(breakdown)
            for key, val in (("total", breakdown.total), ("ce", breakdown.ce),
                             ("logit_kd", breakdown.logit_kd), ("attr", breakdown.attr)):
                if val is not None:
                    totals.setdefault(key, []).append(val)
            step += 1
        row = {"epoch": epoch + 1, **{f"train_{k}": float(np.mean(v)) for k, v in totals.items()}}
        if dev is not None and len(dev):
            score = evaluate(model, dev, metric).value
            loss = dev_loss(model, dev)
            row["dev_metric"], row["dev_loss"] = score, loss
        else:
            score, loss = -row.get("train_total", 0.0), 0.0
        report.epochs.append(row)
        log.info("%s epoch %d: %s", kind, epoch + 1, row)
        # equal metrics (common once accuracy saturates) go to the lower dev loss
        if (report.best_dev_metric is None or score > report.best_dev_metric
                or (score == report.best_dev_metric and loss < best_loss)):
            report.best_dev_metric, best_loss = score, loss
            report.best_epoch = epoch + 1
            best_arrays = {k: v.copy() for k, v in model.named_arrays().items()}
            if out_dir is not None:
                path = save_checkpoint(model, Path(out_dir) / ckpt_name, extra)
                report.best_checkpoint = str(path)
    if best_arrays is not None:
        model.load_arrays(best_arrays)
    report.steps = step
    report.wall_clock_seconds = time.perf_counter() - start
    return model, report


def train_teacher(train: Dataset, dev: Dataset | None, model_config: ModelConfig,
                  optim: OptimConfig = OptimConfig(), out_dir=None, extra: dict | None = None,
                  losses: list | None = None) -> tuple[Model, TrainReport]:
    """Train a model from scratch with cross-entropy; keep the best dev epoch."""
    if len(train) == 0:
        raise ValueError("training set is empty")
    model = Model(model_config)
    report = TrainReport("teacher", optim.seed, optim.metric,
                         config={"model": asdict(model_config), "optim": asdict(optim)})
    total_steps = optim.epochs * _steps_per_epoch(len(train), optim.batch_size)
    opt = Adam(model.params, optim.lr, total_steps, optim.warmup, clip_norm=optim.clip_norm)

    def step_fn(b):
        ce = ce_loss(forward(model, b.ids, b.mask), b.labels)
        return ce, LossBreakdown(ce.item(), 0.0, None, ce.item(), 0.0, 0.0, 1.0)

    sink = losses if losses is not None else []
    return _run_loop("teacher", model, train, dev, optim.epochs, optim.batch_size, optim.seed,
                     optim.metric, step_fn, opt, report, out_dir, "teacher.ckpt", extra, sink)


class TeacherCache:
    """Per-example teacher maps, valid because the teacher never changes."""

    def __init__(self):
        self.maps: dict[tuple[int, int], np.ndarray] = {}

    def get(self, layer: int, index: np.ndarray, ids: np.ndarray, mask: np.ndarray, compute):
        lengths = mask.sum(axis=1).astype(int)
        missing = [j for j, i in enumerate(index) if (layer, int(i)) not in self.maps]
        if missing:
            sub_ids, sub_mask = trim(ids[missing], mask[missing])
            fresh = compute(sub_ids, sub_mask)
            for row, j in enumerate(missing):
                self.maps[(layer, int(index[j]))] = fresh[row, :, :lengths[j]]
        views = self.maps[(layer, int(index[0]))].shape[0]
        out = np.zeros((len(index), views, mask.shape[1]))
        for j, i in enumerate(index):
            cached = self.maps[(layer, int(i))]
            out[j, :, :cached.shape[1]] = cached
        return out


def distill_step(teacher: Model, student: Model, ids: np.ndarray, mask: np.ndarray, labels,
                 cfg: DistillConfig, cache: TeacherCache | None = None, index=None):
    """Build the total loss for one batch; returns (loss Tensor, LossBreakdown)."""
    mask = np.asarray(mask, dtype=np.float64)
    t_logits = predict_logits(teacher, ids, mask)
    if cfg.mode == "vanilla":
        s_logits = forward(student, ids, mask)
        attr = None
    else:
        k = cfg.topk or teacher.config.hidden_dim
        pairs = layer_pairs(cfg.attr_layer, teacher.config.num_layers, student.config.num_layers)
        terms, s_logits = [], None
        for t_layer, s_layer in pairs:
            def t_maps(i, m_, t_layer=t_layer):
                return teacher_maps(teacher, i, m_, k, cfg.ig_steps, t_layer, cfg.attr_target)
            if cache is not None and index is not None:
                at = cache.get(t_layer, index, ids, mask, t_maps)
            else:
                at = t_maps(ids, mask)
            a_s, logits = student_maps(student, ids, mask, cfg.ig_steps, s_layer, cfg.attr_target)
            if s_logits is None:
                s_logits = logits
            terms.append(attribution_loss(at, a_s))
        attr = terms[0]
        for t in terms[1:]:
            attr = E.add(attr, t)
    ce = ce_loss(s_logits, labels)
    kd = logit_kd_loss(t_logits, s_logits, cfg.tau)
    return total_loss(ce, kd, attr, cfg.alpha, cfg.beta, cfg.tau)


def distill(teacher: Model, student_config: ModelConfig, train: Dataset, dev: Dataset | None,
            cfg: DistillConfig = DistillConfig(), out_dir=None, extra: dict | None = None,
            losses: list | None = None) -> tuple[Model, TrainReport]:
    """Distil a freshly initialised student from a frozen teacher.

    ``cfg.mode == "vanilla"`` never builds attribution graphs; ``"adkd"``
    always does, even when beta is 0.
    """
    errors = cfg.validate(teacher.config.hidden_dim)
    if errors:
        raise ValueError("; ".join(errors))
    if student_config.vocab_size != teacher.config.vocab_size:
        raise ValueError(f"student vocab_size {student_config.vocab_size} differs from "
                         f"teacher vocab_size {teacher.config.vocab_size}")
    if student_config.num_labels != teacher.config.num_labels:
        raise ValueError("student and teacher must predict the same number of labels")
    if cfg.attr_layer != "input" and student_config.hidden_dim != teacher.config.hidden_dim:
        raise ValueError("hidden-layer attribution needs equal teacher/student hidden sizes")
    if len(train) == 0:
        raise ValueError("training set is empty")
    student = Model(student_config)
    report = TrainReport("student", cfg.seed, cfg.metric,
                         vanilla_equivalent=(cfg.mode == "vanilla" or cfg.beta == 0),
                         config={"student": asdict(student_config), "distill": asdict(cfg)})
    total_steps = cfg.epochs * _steps_per_epoch(len(train), cfg.batch_size)
    opt = Adam(student.params, cfg.lr, total_steps, cfg.warmup, clip_norm=cfg.clip_norm)
    cache = TeacherCache() if cfg.teacher_cache else None

    def step_fn(b):
        return distill_step(teacher, student, b.ids, b.mask, b.labels, cfg, cache, b.index)

    sink = losses if losses is not None else []
    return _run_loop("student", student, train, dev, cfg.epochs, cfg.batch_size, cfg.seed,
                     cfg.metric, step_fn, opt, report, out_dir, "student.ckpt", extra, sink)


# --- attribution gap -------------------------------------------------------

def attribution_gap(teacher: Model, student: Model, data: Dataset, cfg: DistillConfig = DistillConfig(),
                    batch_size: int = 64) -> float:
    """Mean per-example attribution loss between two frozen models."""
    if len(data) == 0:
        return 0.0
    k = cfg.topk or teacher.config.hidden_dim
    pairs = layer_pairs(cfg.attr_layer, teacher.config.num_layers, student.config.num_layers)
    per_example = np.zeros(len(data))
    for b in batches(data, batch_size, shuffle=False):
        mask = b.mask.astype(np.float64)
        for t_layer, s_layer in pairs:
            at = teacher_maps(teacher, b.ids, mask, k, cfg.ig_steps, t_layer, cfg.attr_target)
            a_s = teacher_maps(student, b.ids, mask, student.config.hidden_dim, cfg.ig_steps,
                               s_layer, cfg.attr_target)
            per_example[b.index] += np.sqrt(np.sum((at - a_s) ** 2, axis=(1, 2)))
    return float(per_example.mean())


def student_config_for(teacher: Model, **overrides) -> ModelConfig:
    """Student geometry sharing the teacher's vocabulary, length and label count."""
    base = dict(vocab_size=teacher.config.vocab_size, max_len=teacher.config.max_len,
                num_labels=teacher.config.num_labels)
    base.update(overrides)
    return ModelConfig(**base)


__all__ = ["OptimConfig", "TrainReport", "Adam", "TrainingDiverged", "train_teacher", "distill",
           "distill_step", "evaluate", "dev_loss", "predictions", "attribution_gap", "student_config_for",
           "TeacherCache"]
