"""Integrated-Gradients attribution over embedding sequences.

Teacher maps are plain arrays (top-K filtered, no graph). Student maps are
engine Tensors whose graph reaches the student parameters, so a loss on them
can be differentiated a second time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine as E
from .engine import Tensor
from .model import PAD_ID, Model, embed, forward, forward_from_embeddings, run_layers

log = logging.getLogger(__name__)

LAYER_CHOICES = ("input", "first", "penultimate", "uniform", "input+uniform")
ZERO_NORM = 1e-12


@dataclass
class DimAttribution:
    scores: np.ndarray
    label: int
    ig_steps: int


@dataclass
class AttributionMap:
    a: np.ndarray
    label: int
    source: str = "teacher"

    def __post_init__(self):
        if np.any(self.a < 0):
            raise ValueError("attribution map entries must be non-negative")


@dataclass
class MultiViewMap:
    A: np.ndarray
    num_views: int
    normalized: bool

    def view(self, c: int) -> np.ndarray:
        n = len(self.A) // self.num_views
        return self.A[c * n:(c + 1) * n]


# --- layers ---------------------------------------------------------------

def layer_pairs(selector: str, teacher_layers: int, student_layers: int) -> list[tuple[int, int]]:
    """(teacher hidden index, student hidden index) pairs to distil at.

    Hidden index 0 is the input embedding, ``l`` the output of block ``l``.
    """
    if selector == "input":
        return [(0, 0)]
    if selector == "first":
        return [(1, 1)]
    if selector == "penultimate":
        return [(teacher_layers - 1, student_layers - 1)]
    if selector in ("uniform", "input+uniform"):
        pairs = [(s * teacher_layers // student_layers, s) for s in range(1, student_layers)]
        if selector == "input+uniform":
            pairs.insert(0, (0, 0))
        if not pairs:
            raise ValueError("uniform layer mapping needs a student with at least 2 layers")
        return pairs
    raise ValueError(f"unknown attribution layer {selector!r}; expected one of {LAYER_CHOICES}")


def hidden_at(model: Model, ids: np.ndarray, mask: np.ndarray, layer: int) -> Tensor:
    h = embed(model, ids)
    return run_layers(model, h, mask, 0, layer) if layer else h


def baseline_embeddings(model: Model, n: int, batch: int | None = None) -> Tensor:
    """Stacked [PAD] input embeddings (token + position), shape (n, d) or (batch, n, d)."""
    if n > model.config.max_len:
        raise E.ShapeError(f"n={n} exceeds max_len {model.config.max_len}")
    ids = np.full((1 if batch is None else batch, n), PAD_ID, dtype=np.int64)
    base = embed(model, ids)
    return E.getitem(base, 0) if batch is None else base


def baseline_at(model: Model, mask: np.ndarray, layer: int) -> Tensor:
    """Baseline at hidden index ``layer``: the all-[PAD] input pushed through the first blocks."""
    ids = np.full(mask.shape, PAD_ID, dtype=np.int64)
    return hidden_at(model, ids, mask, layer)


# --- integrated gradients -------------------------------------------------

def _target(logits: Tensor, target: str) -> Tensor:
    if logits.shape[-1] == 1 or target == "logit":
        return logits
    if target != "prob":
        raise ValueError(f"unknown attribution target {target!r}")
    return E.softmax(logits, axis=-1)


def integrated_gradients(fn, emb, base, m: int = 1, labels: Sequence[int] = (0,),
                         create_graph: bool = False) -> tuple[list[Tensor], Tensor]:
    """Right-endpoint Riemann IG of ``fn`` along the straight path base -> emb.

    ``fn`` maps a (batch, n, d) point to (batch, C) outputs. Returns one
    (batch, n, d) attribution per label and ``fn`` at the input itself (the
    k = m point). With ``create_graph`` the attributions stay connected to
    ``emb``/``base`` and whatever parameters ``fn`` closes over.
    """
    if m < 1:
        raise ValueError("ig_steps must be >= 1")
    with E.enable_grad():
        return _riemann(fn, emb, base, m, labels, create_graph)


def _riemann(fn, emb, base, m, labels, create_graph):
    if not create_graph:
        emb, base = emb.detach(), base.detach()
    diff = E.sub(emb, base)
    totals: list[Tensor | None] = [None] * len(labels)
    out_at_input = None
    for k in range(1, m + 1):
        point = emb if k == m else E.add(base, E.mul(diff, k / m))
        if not (create_graph and point.requires_grad):
            point = Tensor(point.data, requires_grad=True)
        out = fn(point)
        if k == m:
            out_at_input = out
        for j, c in enumerate(labels):
            (g,) = E.grad(E.sum(E.getitem(out, (slice(None), c))), [point], create_graph=create_graph)
            if not np.all(np.isfinite(g.data)):
                raise E.NonFiniteError("non-finite gradient in attribution")
            totals[j] = g if totals[j] is None else E.add(totals[j], g)
    return [E.mul(diff, E.mul(t, 1.0 / m)) for t in totals], out_at_input


def ig_views(model: Model, emb, base, mask=None, m: int = 1, layer: int = 0,
             labels: Sequence[int] | None = None, target: str = "prob",
             create_graph: bool = False) -> tuple[list[Tensor], Tensor]:
    """IG of the model's output for several labels at once.

    Returns one (batch, n, d) attribution per label and the logits at the
    input itself.
    """
    emb = emb if isinstance(emb, Tensor) else Tensor(emb)
    base = base if isinstance(base, Tensor) else Tensor(base)
    if emb.shape != base.shape:
        raise E.ShapeError(f"input {emb.shape} and baseline {base.shape} differ in shape")
    if emb.ndim == 2:
        emb, base = E.reshape(emb, (1,) + emb.shape), E.reshape(base, (1,) + base.shape)
    b, n = emb.shape[:2]
    mask = np.ones((b, n)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(b, n)
    num_labels = model.config.num_labels
    labels = list(range(num_labels)) if labels is None else list(labels)
    for c in labels:
        if not 0 <= c < num_labels:
            raise ValueError(f"label {c} outside [0, {num_labels})")
    logits = []

    def fn(point):
        z = forward_from_embeddings(model, point, mask, layer)
        logits.append(z)
        return _target(z, target)

    views, _ = integrated_gradients(fn, emb, base, m, labels, create_graph)
    return views, logits[-1]


def ig_attribution(model: Model, emb, base, c: int, m: int = 1, mask=None, layer: int = 0,
                   target: str = "prob") -> DimAttribution:
    """Signed per-dimension IG scores of label ``c`` for one example (values only)."""
    views, _ = ig_views(model, emb, base, mask, m, layer, [c], target)
    scores = views[0].data
    return DimAttribution(scores[0] if np.ndim(emb) == 2 else scores, c, m)


# --- maps -----------------------------------------------------------------

def token_scores(scores: np.ndarray, k: int, mask=None) -> np.ndarray:
    """Per-token L2 norm of the k largest-magnitude dimensions (sign ignored).

    Ties go to the lower dimension index. Masked positions score 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    d = scores.shape[-1]
    if not 1 <= k <= d:
        raise ValueError(f"K={k} outside [1, {d}]")
    mag = np.abs(scores)
    if k < d:
        order = np.argsort(-mag, axis=-1, kind="stable")[..., :k]
        mag = np.take_along_axis(mag, order, axis=-1)
    a = np.sqrt(np.sum(mag * mag, axis=-1))
    if mask is not None:
        a = a * np.asarray(mask, dtype=np.float64)
    return a


def token_scores_tensor(ig: Tensor, mask=None) -> Tensor:
    """Student variant: all dimensions kept, differentiable."""
    a = E.l2norm(ig, axis=-1)
    return a if mask is None else E.mul(a, np.asarray(mask, dtype=np.float64))


def _uniform(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    count = np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
    return mask / np.sqrt(count)


def normalize_views(maps: np.ndarray, mask=None) -> np.ndarray:
    """Scale each length-n view (last axis) to unit L2 norm.

    A view whose norm is below 1e-12 is replaced by the uniform unit vector
    over its unmasked positions.
    """
    maps = np.asarray(maps, dtype=np.float64)
    mask = np.ones(maps.shape) if mask is None else np.broadcast_to(mask, maps.shape)
    norm = np.sqrt(np.sum(maps * maps, axis=-1, keepdims=True))
    degenerate = norm < ZERO_NORM
    if np.any(degenerate):
        log.warning("attribution view with ~zero norm replaced by uniform vector (%d views)",
                    int(degenerate.sum()))
    safe = np.where(degenerate, 1.0, norm)
    return np.where(degenerate, _uniform(mask), maps / safe)


def normalize_views_tensor(maps: Tensor, mask=None) -> Tensor:
    mask = np.ones(maps.shape) if mask is None else np.broadcast_to(mask, maps.shape)
    norm = E.l2norm(maps, axis=-1, keepdims=True)
    degenerate = norm.data < ZERO_NORM
    if np.any(degenerate):
        log.warning("student attribution view with ~zero norm replaced by uniform vector (%d views)",
                    int(degenerate.sum()))
    keep = (~degenerate).astype(np.float64)
    scaled = E.div(maps, E.add(norm, degenerate.astype(np.float64)))
    return E.add(E.mul(scaled, keep), (1.0 - keep) * _uniform(mask))


def multi_view(maps: Sequence[AttributionMap], normalize: bool = True) -> MultiViewMap:
    """Concatenate per-label maps in label order, optionally unit-normalizing each view."""
    if not maps:
        raise ValueError("multi_view needs at least one map")
    n = len(maps[0].a)
    if any(len(m.a) != n for m in maps):
        raise ValueError("all views must share the same length")
    if len({m.source for m in maps}) != 1:
        raise ValueError("all views must come from the same source")
    if [m.label for m in maps] != list(range(len(maps))):
        raise ValueError("views must be given for labels 0..C-1 in order")
    stacked = np.stack([m.a for m in maps])
    if normalize:
        stacked = normalize_views(stacked)
    return MultiViewMap(stacked.reshape(-1), len(maps), normalize)


def teacher_maps(teacher: Model, ids: np.ndarray, mask: np.ndarray, k: int, m: int = 1,
                 layer: int = 0, target: str = "prob", normalize: bool = True) -> np.ndarray:
    """Normalized multi-view teacher maps, shape (batch, C, n); no graph kept."""
    mask = np.asarray(mask, dtype=np.float64)
    with E.no_grad():
        emb = hidden_at(teacher, ids, mask, layer)
        base = baseline_at(teacher, mask, layer)
    views, _ = ig_views(teacher, emb, base, mask, m, layer, target=target)
    maps = np.stack([token_scores(v.data, k, mask) for v in views], axis=1)
    return normalize_views(maps, mask[:, None, :]) if normalize else maps


def student_maps(student: Model, ids: np.ndarray, mask: np.ndarray, m: int = 1, layer: int = 0,
                 target: str = "prob", normalize: bool = True) -> tuple[Tensor, Tensor]:
    """Differentiable normalized multi-view student maps (batch, C, n) and logits at the input."""
    mask = np.asarray(mask, dtype=np.float64)
    emb = hidden_at(student, ids, mask, layer)
    base = baseline_at(student, mask, layer)
    views, logits = ig_views(student, emb, base, mask, m, layer, target=target, create_graph=True)
    b, n = mask.shape
    maps = E.concat([E.reshape(token_scores_tensor(v, mask), (b, 1, n)) for v in views], axis=1)
    if normalize:
        maps = normalize_views_tensor(maps, mask[:, None, :])
    return maps, logits


def occlusion_attribution(model: Model, ids, c: int, mask=None, pad_id: int = PAD_ID,
                          target: str = "prob") -> np.ndarray:
    """|F_c(x) - F_c(x with token i replaced by [PAD])| for every position i."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    mask = np.ones_like(ids) if mask is None else np.asarray(mask).reshape(-1)
    n = len(ids)
    variants = np.repeat(ids[None, :], n + 1, axis=0)
    variants[np.arange(1, n + 1), np.arange(n)] = pad_id
    with E.no_grad():
        logits = forward(model, variants, np.repeat(mask[None, :], n + 1, axis=0))
        out = _target(logits, target).data[:, c]
    return np.abs(out[0] - out[1:])
