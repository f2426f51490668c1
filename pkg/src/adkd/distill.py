"""Loss terms of attribution-driven distillation and their weighted sum."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import engine as E
from .attribution import LAYER_CHOICES
from .engine import Tensor


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.9
    beta: float = 10.0
    tau: float = 4.0
    topk: int | None = None  # None -> hidden size (keep every dimension)
    ig_steps: int = 1
    lr: float = 3e-5
    batch_size: int = 16
    epochs: int = 3
    seed: int = 0
    attr_layer: str = "input"
    attr_target: str = "prob"
    mode: str = "adkd"
    warmup: float = 0.1
    clip_norm: float = 1.0
    metric: str = "accuracy"
    teacher_cache: bool = False

    def validate(self, hidden_dim: int | None = None) -> list[str]:
        errors = []
        if not _real(self.alpha) or not 0.0 <= self.alpha <= 1.0:
            errors.append(f"alpha must lie in [0, 1], got {self.alpha!r}")
        if not _real(self.beta) or self.beta < 0:
            errors.append(f"beta must be >= 0, got {self.beta!r}")
        if not _real(self.tau) or self.tau <= 0:
            errors.append(f"tau must be > 0, got {self.tau!r}")
        if self.topk is not None:
            if not _int(self.topk) or self.topk < 1:
                errors.append(f"topk must be a positive integer, got {self.topk!r}")
            elif hidden_dim is not None and self.topk > hidden_dim:
                errors.append(f"topk={self.topk} exceeds hidden size {hidden_dim}")
        if not _int(self.ig_steps) or self.ig_steps < 1:
            errors.append(f"ig_steps must be a positive integer, got {self.ig_steps!r}")
        if not _real(self.lr) or self.lr <= 0:
            errors.append(f"lr must be > 0, got {self.lr!r}")
        if not _int(self.batch_size) or self.batch_size < 1:
            errors.append(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not _int(self.epochs) or self.epochs < 0:
            errors.append(f"epochs must be a non-negative integer, got {self.epochs!r}")
        if not _int(self.seed):
            errors.append(f"seed must be an integer, got {self.seed!r}")
        if self.attr_layer not in LAYER_CHOICES:
            errors.append(f"attr_layer must be one of {LAYER_CHOICES}, got {self.attr_layer!r}")
        if self.attr_target not in ("prob", "logit"):
            errors.append(f"attr_target must be 'prob' or 'logit', got {self.attr_target!r}")
        if self.mode not in ("adkd", "vanilla"):
            errors.append(f"mode must be 'adkd' or 'vanilla', got {self.mode!r}")
        if not _real(self.warmup) or not 0.0 <= self.warmup < 1.0:
            errors.append(f"warmup must lie in [0, 1), got {self.warmup!r}")
        if not _real(self.clip_norm) or self.clip_norm < 0:
            errors.append(f"clip_norm must be >= 0, got {self.clip_norm!r}")
        if self.metric not in ("accuracy", "f1", "matthews", "spearman"):
            errors.append(f"metric must be accuracy/f1/matthews/spearman, got {self.metric!r}")
        return errors


def _real(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


@dataclass
class LossBreakdown:
    ce: float
    logit_kd: float
    attr: float | None
    total: float
    alpha: float
    beta: float
    tau: float

    def to_json(self, step: int) -> str:
        return json.dumps({"step": step, "ce": self.ce, "logit_kd": self.logit_kd,
                           "attr": self.attr, "total": self.total})

    def as_dict(self) -> dict:
        return asdict(self)


def ce_loss(student_logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy; mean squared error when there is a single output."""
    labels = np.asarray(labels)
    b, c = student_logits.shape
    if c == 1:
        diff = E.sub(E.reshape(student_logits, (b,)), labels.astype(np.float64))
        return E.mean(E.mul(diff, diff))
    labels = labels.astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label outside [0, {c})")
    logp = E.log_softmax(student_logits, axis=-1)
    picked = E.getitem(logp, (np.arange(b), labels))
    return E.neg(E.mean(picked))


def logit_kd_loss(teacher_logits, student_logits: Tensor, tau: float) -> Tensor:
    """Mean KL(softmax(z_t / tau) || softmax(z_s / tau)); no tau**2 factor.

    With a single output this is the mean squared difference of the outputs.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    zt = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if zt.shape != student_logits.shape:
        raise E.ShapeError(f"teacher logits {zt.shape} vs student {student_logits.shape}")
    if zt.shape[-1] == 1:
        diff = E.sub(student_logits, zt)
        return E.mean(E.mul(diff, diff))
    zt = zt / tau
    zt = zt - zt.max(axis=-1, keepdims=True)
    log_pt = zt - np.log(np.sum(np.exp(zt), axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = E.log_softmax(E.mul(student_logits, 1.0 / tau), axis=-1)
    kl = E.sum(E.mul(pt, E.sub(log_pt, log_ps)), axis=-1)
    return E.mean(kl)


def attribution_loss(teacher_map, student_map: Tensor) -> Tensor:
    """Mean over the batch of ||A_t - A_s||_2 on flattened normalized multi-view maps."""
    at = teacher_map.data if isinstance(teacher_map, Tensor) else np.asarray(teacher_map, dtype=np.float64)
    sm = student_map if isinstance(student_map, Tensor) else Tensor(student_map)
    if at.shape != sm.shape:
        raise E.ShapeError(f"attribution maps differ in shape: {at.shape} vs {sm.shape}")
    if sm.ndim == 1:
        return E.l2norm(E.sub(sm, at), axis=-1)
    b = sm.shape[0]
    flat = E.reshape(E.sub(sm, at), (b, -1))
    return E.mean(E.l2norm(flat, axis=-1))


def total_loss(ce: Tensor, logit_kd: Tensor, attr: Tensor | None, alpha: float, beta: float,
               tau: float) -> tuple[Tensor, LossBreakdown]:
    """(1 - alpha) * ce + alpha * logit_kd + beta * attr, with a float breakdown."""
    total = E.add(E.mul(ce, 1.0 - alpha), E.mul(logit_kd, alpha))
    if attr is not None:
        total = E.add(total, E.mul(attr, beta))
    breakdown = LossBreakdown(ce.item(), logit_kd.item(), None if attr is None else attr.item(),
                              total.item(), alpha, beta, tau)
    return total, breakdown
