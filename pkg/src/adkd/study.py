"""Paired-seed comparisons of vanilla KD and attribution-driven KD students."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .attribution import teacher_maps
from .data import Dataset, Vocab, batches
from .distill import DistillConfig
from .model import Model, ModelConfig
from .trainer import attribution_gap, distill


def token_attributions(model: Model, data: Dataset, ig_steps: int = 1, batch_size: int = 64) -> np.ndarray:
    """Unit-normalized per-token scores for the gold-label view, shape (N, n)."""
    out = np.zeros(data.ids.shape)
    k = model.config.hidden_dim
    for b in batches(data, batch_size, shuffle=False):
        maps = teacher_maps(model, b.ids, b.mask.astype(np.float64), k, ig_steps)
        labels = b.labels.astype(int) if model.config.num_labels > 1 else np.zeros(len(b.index), int)
        out[b.index, :maps.shape[2]] = maps[np.arange(len(b.index)), labels]
    return out


def _content(vocab: Vocab, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    special = np.isin(ids, list(vocab.frame_ids))
    return (mask > 0) & ~special


def attribution_agreement(teacher_scores, student_scores, vocab: Vocab, data: Dataset) -> float:
    """Mean Spearman correlation of teacher/student scores over non-frame tokens."""
    keep = _content(vocab, data.ids, data.mask)
    rhos = []
    for i in range(len(data)):
        t, s = teacher_scores[i][keep[i]], student_scores[i][keep[i]]
        if len(t) < 2 or np.all(t == t[0]) or np.all(s == s[0]):
            continue
        rhos.append(stats.spearmanr(t, s).statistic)
    return float(np.mean(rhos)) if rhos else 0.0


def keyword_hit_rate(scores, vocab: Vocab, data: Dataset, top: int = 2) -> float:
    """Fraction of examples whose top-scoring content tokens include a planted keyword.

    Only [CLS]/[SEP]/[PAD] are skipped as candidates."""
    keep = _content(vocab, data.ids, data.mask)
    hits, counted = 0, 0
    for i, ex in enumerate(data.examples):
        if not ex.rationale:
            continue
        planted = {vocab.id(w) for w in ex.rationale}
        cand = np.flatnonzero(keep[i])
        order = cand[np.argsort(-scores[i][cand], kind="stable")][:top]
        hits += any(int(data.ids[i, j]) in planted for j in order)
        counted += 1
    return hits / counted if counted else 0.0


@dataclass
class StudentResult:
    mode: str
    beta: float
    seed: int
    dev_metric: float
    best_epoch: int | None
    train_gap: float
    dev_gap: float
    agreement: float
    keyword_top2: float
    seconds: float


@dataclass
class StudyResult:
    teacher_dev_metric: float
    runs: list[StudentResult] = field(default_factory=list)

    def select(self, mode: str, beta: float | None = None) -> list[StudentResult]:
        return [r for r in self.runs if r.mode == mode and (beta is None or r.beta == beta)]

    def mean(self, attr: str, mode: str, beta: float | None = None) -> float:
        rows = self.select(mode, beta)
        return float(np.mean([getattr(r, attr) for r in rows])) if rows else float("nan")

    def as_rows(self) -> list[dict]:
        return [asdict(r) for r in self.runs]


def paired_study(teacher: Model, student_config: ModelConfig, train: Dataset, dev: Dataset,
                 vocab: Vocab, base: DistillConfig, seeds, betas=(10.0,),
                 teacher_dev_metric: float = float("nan"), log=None) -> StudyResult:
    """Train one vanilla-KD student and one AD-KD student per beta for every seed.

    All students share the teacher; within a seed they share initialisation
    and batch order, so differences come from the loss alone.
    """
    result = StudyResult(teacher_dev_metric)
    t_dev = token_attributions(teacher, dev)
    plans = [("vanilla", base.beta)] + [("adkd", float(b)) for b in betas]
    for seed in seeds:
        for mode, beta in plans:
            cfg = replace(base, mode=mode, beta=beta, seed=int(seed))
            s_cfg = replace(student_config, seed=int(seed))
            student, report = distill(teacher, s_cfg, train, dev, cfg)
            s_dev = token_attributions(student, dev)
            row = StudentResult(
                mode=mode, beta=beta if mode == "adkd" else 0.0, seed=int(seed),
                dev_metric=report.best_dev_metric, best_epoch=report.best_epoch,
                train_gap=attribution_gap(teacher, student, train, cfg),
                dev_gap=attribution_gap(teacher, student, dev, cfg),
                agreement=attribution_agreement(t_dev, s_dev, vocab, dev),
                keyword_top2=keyword_hit_rate(s_dev, vocab, dev),
                seconds=report.wall_clock_seconds)
            result.runs.append(row)
            if log is not None:
                log(row)
    return result
