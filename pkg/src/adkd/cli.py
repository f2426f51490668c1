"""Command-line entry point: ``adkd <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import html
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import plotting
from .attribution import baseline_at, hidden_at, ig_views, token_scores
from .config import ConfigError, RunConfig, load_config, load_splits, write_resolved
from .data import (SCHEMAS, DataError, Dataset, Example, Vocab, encode, load_tsv, split_words,
                   tokenize)
from .model import load_checkpoint
from .trainer import TrainingDiverged, attribution_gap, distill, evaluate, train_teacher

log = logging.getLogger("adkd")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# flag name -> DistillConfig field
DISTILL_FLAGS = {"alpha": float, "beta": float, "tau": float, "topk": int, "ig_steps": int,
                 "attr_layer": str, "mode": str, "seed": int, "epochs": int, "lr": float,
                 "batch_size": int}


class UsageError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_losses(path: Path, losses) -> list[dict]:
    rows = [json.loads(b.to_json(i)) for i, b in enumerate(losses)]
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return rows


def _checkpoint_extra(cfg: RunConfig, vocab: Vocab, role: str) -> dict:
    return {"role": role, "vocab": vocab.itos, "max_len": cfg.task.max_len,
            "schema": cfg.task.schema}


def _load_model(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        model, extra = load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{path}: unreadable checkpoint ({exc})") from None
    if "vocab" not in extra:
        raise UsageError(f"{path}: checkpoint carries no vocabulary")
    return model, extra, Vocab(extra["vocab"])


# --- train-teacher ------------------------------------------------------------

def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    vocab, train, dev = load_splits(cfg.task)
    out = cfg.teacher_dir
    write_resolved(cfg, out)
    losses: list = []
    model_cfg = cfg.model_config("teacher", len(vocab))
    _, report = train_teacher(train, dev, model_cfg, cfg.teacher_train, out,
                              _checkpoint_extra(cfg, vocab, "teacher"), losses)
    _finish_run(out, report, losses, "teacher")
    print(f"teacher\tbest_epoch={report.best_epoch}\tdev_{report.metric}={report.best_dev_metric}"
          f"\tcheckpoint={report.best_checkpoint}")
    return EXIT_OK


def _finish_run(out: Path, report, losses, title: str) -> None:
    rows = _write_losses(out / "losses.jsonl", losses)
    plotting.loss_curves(rows, out / "loss_curve.png", title)
    _write_json(out / "report.json", report.as_dict())


# --- distill ------------------------------------------------------------------

def _overrides(args) -> dict:
    return {k: getattr(args, k) for k in DISTILL_FLAGS if getattr(args, k, None) is not None}


def run_name(cfg: RunConfig, overrides: dict) -> str:
    d = cfg.distill
    parts = [d.mode, f"seed{d.seed}"]
    parts += [f"{k}{v}" for k, v in sorted(overrides.items()) if k not in ("mode", "seed")]
    return "-".join(str(p).replace("/", "_") for p in parts)


def _teacher_for(cfg: RunConfig, teacher_path=None):
    path = Path(teacher_path) if teacher_path else cfg.teacher_ckpt_path
    if not path.exists():
        raise UsageError(f"teacher checkpoint not found: {path} (run train-teacher first)")
    return _load_model(path)


def run_distill(config_path, overrides: dict, teacher_path=None, name=None) -> dict:
    """One student run; returns a summary row.  Raises ConfigError/UsageError on bad input."""
    cfg = load_config(config_path, overrides)
    teacher, extra, vocab = _teacher_for(cfg, teacher_path)
    if extra.get("max_len", cfg.task.max_len) != cfg.task.max_len:
        raise UsageError("teacher max_len differs from task.max_len")
    _, train, dev = load_splits(cfg.task, vocab)
    s_geom = cfg.model_config("student", len(vocab))
    if teacher.config.vocab_size != s_geom.vocab_size or teacher.config.num_labels != s_geom.num_labels:
        raise UsageError("teacher checkpoint is incompatible with the task (vocab or label count)")
    if cfg.distill.attr_layer != "input" and teacher.config.hidden_dim != s_geom.hidden_dim:
        raise UsageError("hidden-layer attribution needs equal teacher/student hidden sizes")
    errors = cfg.distill.validate(teacher.config.hidden_dim)
    if errors:
        raise ConfigError([f"distill: {e}" for e in errors])
    out = cfg.output_dir / "students" / (name or run_name(cfg, overrides))
    write_resolved(cfg, out)
    losses: list = []
    student, report = distill(teacher, s_geom, train, dev, cfg.distill, out,
                              _checkpoint_extra(cfg, vocab, "student"), losses)
    _finish_run(out, report, losses, out.name)
    row = {"run": out.name, "dev_metric": report.best_dev_metric, "best_epoch": report.best_epoch,
           "vanilla_equivalent": report.vanilla_equivalent}
    row["train_gap"] = attribution_gap(teacher, student, train, cfg.distill)
    row["dev_gap"] = attribution_gap(teacher, student, dev, cfg.distill) if dev is not None else None
    _write_json(out / "gap.json", {"train": row["train_gap"], "dev": row["dev_gap"]})
    return row


def cmd_distill(args) -> int:
    row = run_distill(args.config, _overrides(args), args.teacher, args.name)
    print("\t".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


# --- evaluate -----------------------------------------------------------------

def _dataset_for(args, extra, vocab: Vocab) -> Dataset:
    if args.data:
        path = Path(args.data)
        if not path.exists():
            raise UsageError(f"data file not found: {path}")
        schema = args.schema or extra.get("schema", "single")
        if schema not in SCHEMAS:
            raise UsageError(f"unknown schema {schema!r}")
        examples = load_tsv(path, schema, args.num_labels)
        return encode(vocab, examples, extra.get("max_len", 16))
    if not args.config:
        raise UsageError("give --data FILE or --config CONFIG with --split")
    cfg = load_config(args.config)
    _, train, dev = load_splits(cfg.task, vocab)
    split = {"train": train, "dev": dev}.get(args.split)
    if split is None:
        raise UsageError(f"split {args.split!r} is not available for this config")
    return split


def cmd_evaluate(args) -> int:
    model, extra, vocab = _load_model(args.checkpoint)
    args.num_labels = model.config.num_labels
    data = _dataset_for(args, extra, vocab)
    metric = args.metric or ("spearman" if model.config.is_regression else "accuracy")
    try:
        result = evaluate(model, data, metric)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{result.name}\t{result.value:.6f}\tn={len(data)}")
    return EXIT_OK


# --- attribute ----------------------------------------------------------------

def attribute_text(model, vocab: Vocab, max_len: int, text: str, label=None, ig_steps: int = 1):
    """Per-token scores for one input, L2-normalized over the input words.

    [CLS]/[SEP] are dropped from the output; out-of-vocabulary words are
    scored through [UNK] but shown as typed.
    """
    seq = tokenize(vocab, Example(text), max_len)
    n = int(sum(seq.mask))
    ids = np.array([seq.ids[:n]])
    mask = np.ones((1, n))
    emb = hidden_at(model, ids, mask, 0)
    base = baseline_at(model, mask, 0)
    views, logits = ig_views(model, emb, base, mask, ig_steps)
    if label is None:
        label = 0 if model.config.is_regression else int(np.argmax(logits.data[0]))
    if not 0 <= label < len(views):
        raise UsageError(f"label {label} outside [0, {len(views)})")
    raw = token_scores(views[label].data, model.config.hidden_dim, mask)[0]
    keep = np.array([i not in vocab.frame_ids for i in ids[0]])
    scores = np.where(keep, raw, 0.0)
    norm = np.linalg.norm(scores)
    if norm > 1e-12:
        scores = scores / norm
    elif keep.any():
        scores = keep / np.sqrt(keep.sum())
    words = iter(split_words(text))
    tokens = [next(words) if k else vocab.token(i) for i, k in zip(ids[0], keep)]
    pairs = [(t, float(s)) for t, s, k in zip(tokens, scores, keep) if k]
    return label, pairs


def render_html(pairs, label) -> str:
    top = max((s for _, s in pairs), default=0.0) or 1.0
    spans = "".join(
        f'<span style="background-color: rgba(220, 40, 40, {s / top:.4f}); padding: 2px 3px; '
        f'margin: 1px; border-radius: 3px;">{html.escape(t)}</span> ' for t, s in pairs)
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>attribution</title></head>"
            f"<body style=\"font-family: sans-serif;\"><p>label {label}</p><p>{spans.strip()}</p>"
            "</body></html>\n")


def cmd_attribute(args) -> int:
    model, extra, vocab = _load_model(args.checkpoint)
    label, pairs = attribute_text(model, vocab, extra.get("max_len", 16), args.text, args.label,
                                  args.ig_steps)
    if args.format == "html":
        body = render_html(pairs, label)
    else:
        body = f"label\t{label}\n" + "".join(f"{t}:{s:.6f}\n" for t, s in pairs)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)
    if args.plot:
        plotting.attribution_heatmap([t for t, _ in pairs], [[s for _, s in pairs]], args.plot,
                                     [f"label {label}"])
    return EXIT_OK


# --- sweep --------------------------------------------------------------------

def _parse_values(param: str, raw: str) -> list:
    kind = DISTILL_FLAGS.get(param)
    if kind is None:
        raise UsageError(f"cannot sweep {param!r}; choose from {sorted(DISTILL_FLAGS)}")
    try:
        return [kind(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values for {param} must be {kind.__name__}s") from None


def _sweep_job(job):
    config, param, value, teacher = job
    row = run_distill(config, {param: value}, teacher, f"{param}={value}")
    return {"value": value, **row}


def cmd_sweep(args) -> int:
    param = args.param.replace("-", "_")
    values = _parse_values(param, args.values)
    cfg = load_config(args.config)
    for v in values:  # validate every point before any run starts
        load_config(args.config, {param: v})
    _teacher_for(cfg, args.teacher)
    jobs = [(args.config, param, v, args.teacher) for v in values]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    out = cfg.output_dir / "sweeps" / param
    out.mkdir(parents=True, exist_ok=True)
    fields = ["value", "run", "dev_metric", "best_epoch", "train_gap", "dev_gap", "vanilla_equivalent"]
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    plotting.sweep_plot(param, rows, out / "sweep.png")
    for row in rows:
        print("\t".join(f"{k}={row[k]}" for k in fields))
    return EXIT_OK


# --- gap ----------------------------------------------------------------------

def cmd_gap(args) -> int:
    teacher, _, t_vocab = _load_model(args.teacher)
    student, _, s_vocab = _load_model(args.student)
    if t_vocab != s_vocab:
        raise UsageError("teacher and student vocabularies differ")
    cfg = load_config(args.config)
    _, train, dev = load_splits(cfg.task, t_vocab)
    splits = {"train": train, "dev": dev}
    gaps = {}
    for name in args.splits.split(","):
        if splits.get(name) is None:
            raise UsageError(f"split {name!r} is not available for this config")
        gaps[name] = attribution_gap(teacher, student, splits[name], cfg.distill)
    print(json.dumps(gaps, sort_keys=True))
    if args.out:
        _write_json(Path(args.out), gaps)
        plotting.gap_bars(gaps, Path(args.out).with_suffix(".png"))
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adkd", description="Attribution-driven knowledge distillation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-teacher", help="fine-tune the teacher from a config")
    s.add_argument("config")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("distill", help="distil a student from the trained teacher")
    s.add_argument("config")
    s.add_argument("--teacher", help="teacher checkpoint (default: <output_dir>/teacher/teacher.ckpt)")
    s.add_argument("--name", help="run directory name under students/")
    for flag, kind in DISTILL_FLAGS.items():
        s.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("evaluate", help="score a checkpoint on a split or TSV file")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--split", default="dev", choices=["train", "dev"])
    s.add_argument("--data")
    s.add_argument("--schema", choices=sorted(SCHEMAS))
    s.add_argument("--metric", choices=["accuracy", "f1", "matthews", "spearman"])
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("attribute", help="token attribution scores for one input")
    s.add_argument("checkpoint")
    s.add_argument("text")
    s.add_argument("--label", type=int)
    s.add_argument("--ig-steps", type=int, default=1)
    s.add_argument("--format", choices=["text", "html"], default="text")
    s.add_argument("--out")
    s.add_argument("--plot", help="also write a heatmap PNG here")
    s.set_defaults(func=cmd_attribute)

    s = sub.add_parser("sweep", help="one distillation run per value of a hyperparameter")
    s.add_argument("config")
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True, help="comma-separated")
    s.add_argument("--teacher")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gap", help="teacher-student attribution gap per split")
    s.add_argument("teacher")
    s.add_argument("student")
    s.add_argument("--config", required=True)
    s.add_argument("--splits", default="train,dev")
    s.add_argument("--out", help="write the gaps as JSON (and a bar chart next to it)")
    s.set_defaults(func=cmd_gap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "ig_steps", None) is not None and args.ig_steps < 1:
        print("error: --ig-steps must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure, not a usage error
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
