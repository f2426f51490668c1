"""Figures written next to the delimited outputs of the CLI."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so identical data gives identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _style(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.5)


def loss_curves(rows: list[dict], path, title: str = "") -> Path:
    """Per-step loss components from losses.jsonl rows."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    steps = [r["step"] for r in rows]
    for key in ("total", "ce", "logit_kd", "attr"):
        vals = [r.get(key) for r in rows]
        if not vals or any(v is None for v in vals):
            continue
        ax.plot(steps, vals, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    if rows:
        ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    return _save(fig, path)


def sweep_plot(param: str, rows: list[dict], path) -> Path:
    """Dev metric and dev attribution gap against a swept hyperparameter."""
    xs = [r["value"] for r in rows]
    numeric = all(isinstance(x, (int, float)) for x in xs)
    pos = xs if numeric else list(range(len(xs)))
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(pos, [r["dev_metric"] for r in rows], marker="o", label="dev metric")
    ax.set_xlabel(param)
    ax.set_ylabel("dev metric")
    if not numeric:
        ax.set_xticks(pos, [str(x) for x in xs])
    gaps = [r.get("dev_gap") for r in rows]
    if all(g is not None for g in gaps):
        ax2 = ax.twinx()
        ax2.plot(pos, gaps, marker="s", color="tab:red", label="dev gap")
        ax2.set_ylabel("attribution gap", color="tab:red")
    _style(ax)
    fig.tight_layout()
    return _save(fig, path)


def gap_bars(gaps: dict[str, float], path, title: str = "attribution gap") -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(gaps)
    ax.bar(range(len(names)), [gaps[k] for k in names], color="tab:blue")
    ax.set_xticks(range(len(names)), names)
    ax.set_ylabel("gap")
    ax.set_title(title)
    _style(ax)
    fig.tight_layout()
    return _save(fig, path)


def attribution_heatmap(tokens: list[str], scores, path, labels: list[str] | None = None) -> Path:
    """Tokens along x, one row per label view."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(tokens)), 0.6 * len(scores) + 1.2))
    ax.imshow(scores, cmap="Reds", aspect="auto", vmin=0.0)
    ax.set_xticks(range(len(tokens)), tokens, rotation=45, ha="right")
    ax.set_yticks(range(len(scores)), labels or [str(i) for i in range(len(scores))])
    fig.tight_layout()
    return _save(fig, path)
