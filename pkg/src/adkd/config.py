"""JSON run configuration: parsing, validation and dataset materialisation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import (SCHEMAS, Dataset, Example, SyntheticSpec, Vocab, encode, load_tsv,
                   synthetic_keyword_task)
from .distill import DistillConfig
from .model import ModelConfig
from .trainer import OptimConfig

OUTPUT_ROOT_ENV = "ADKD_OUTPUT_ROOT"

GEOMETRY_KEYS = ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "init_std")


class ConfigError(ValueError):
    """Invalid configuration; carries one message per offending field."""

    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


@dataclass
class TaskConfig:
    type: str = "synthetic"
    max_len: int = 16
    num_labels: int = 2
    schema: str = "single"
    train: str | None = None
    dev: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class RunConfig:
    task: TaskConfig
    teacher: dict
    student: dict
    teacher_train: OptimConfig
    distill: DistillConfig
    output_dir: Path
    seed: int = 0
    teacher_checkpoint: Path | None = None
    source: Path | None = None

    def to_dict(self) -> dict:
        task = asdict(self.task)
        task["synthetic"]["keywords_per_example"] = list(self.task.synthetic.keywords_per_example)
        return {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "task": task,
            "teacher": self.teacher,
            "student": self.student,
            "teacher_train": asdict(self.teacher_train),
            "distill": asdict(self.distill),
            "teacher_checkpoint": None if self.teacher_checkpoint is None else str(self.teacher_checkpoint),
        }

    def model_config(self, role: str, vocab_size: int) -> ModelConfig:
        geom = self.teacher if role == "teacher" else self.student
        seed = self.teacher_train.seed if role == "teacher" else self.distill.seed
        return ModelConfig(vocab_size=vocab_size, max_len=self.task.max_len,
                           num_labels=self.task.num_labels, seed=seed, **geom)

    @property
    def teacher_dir(self) -> Path:
        return self.output_dir / "teacher"

    @property
    def teacher_ckpt_path(self) -> Path:
        return self.teacher_checkpoint or self.teacher_dir / "teacher.ckpt"


_TOP_KEYS = {"seed", "output_dir", "task", "teacher", "student", "teacher_train", "distill",
             "teacher_checkpoint"}
_TASK_KEYS = {"type", "max_len", "num_labels", "schema", "train", "dev", "synthetic"}


def _dataclass_block(cls, raw, where, errors, defaults=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected an object, got {type(raw).__name__}")
        return None
    names = {f.name for f in fields(cls)}
    for key in raw:
        if key not in names:
            errors.append(f"{where}.{key}: unknown field")
    kwargs = dict(defaults or {})
    kwargs.update({k: v for k, v in raw.items() if k in names})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{where}: {exc}")
        return None


def _geometry(raw, where, errors, defaults):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected an object, got {type(raw).__name__}")
        return None
    for key in raw:
        if key not in GEOMETRY_KEYS:
            errors.append(f"{where}.{key}: unknown field (vocab, length and labels come from the task)")
    geom = dict(defaults)
    geom.update({k: v for k, v in raw.items() if k in GEOMETRY_KEYS})
    try:
        ModelConfig(vocab_size=10, max_len=8, num_labels=2, **geom)
    except (TypeError, ValueError) as exc:
        errors.append(f"{where}: {exc}")
        return None
    return geom


def parse_config(raw: dict, base_dir: Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Validate a raw config dict; raises ConfigError listing every problem."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be a JSON object"])
    base_dir = Path(base_dir or ".")
    for key in raw:
        if key not in _TOP_KEYS:
            errors.append(f"{key}: unknown field")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        errors.append(f"seed: must be an integer, got {seed!r}")
        seed = 0

    task_raw = raw.get("task", {})
    task = None
    if not isinstance(task_raw, dict):
        errors.append("task: expected an object")
    else:
        for key in task_raw:
            if key not in _TASK_KEYS:
                errors.append(f"task.{key}: unknown field")
        synth = _dataclass_block(SyntheticSpec, task_raw.get("synthetic"), "task.synthetic", errors)
        if synth is not None:
            kpe = synth.keywords_per_example
            if not (isinstance(kpe, (list, tuple)) and len(kpe) == 2
                    and all(isinstance(v, int) and not isinstance(v, bool) for v in kpe)):
                errors.append("task.synthetic.keywords_per_example: expected [lo, hi] integers")
            else:
                synth = replace(synth, keywords_per_example=tuple(kpe))
                errors.extend(f"task.synthetic: {e}" for e in synth.validate())
        task = TaskConfig(**{k: v for k, v in task_raw.items() if k in _TASK_KEYS - {"synthetic"}},
                          synthetic=synth or SyntheticSpec())
        if task.type not in ("synthetic", "tsv"):
            errors.append(f"task.type: must be 'synthetic' or 'tsv', got {task.type!r}")
        for name in ("max_len", "num_labels"):
            v = getattr(task, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                errors.append(f"task.{name}: must be a positive integer, got {v!r}")
        if isinstance(task.max_len, int) and 0 < task.max_len < 3:
            errors.append("task.max_len: must be >= 3 to hold [CLS] x [SEP]")
        if task.type == "synthetic" and task.num_labels != 2:
            errors.append("task.num_labels: the synthetic keyword task is binary (2)")
        if task.schema not in SCHEMAS:
            errors.append(f"task.schema: must be one of {sorted(SCHEMAS)}, got {task.schema!r}")
        if task.type == "tsv":
            if not task.train:
                errors.append("task.train: required for tsv tasks")
            for split in ("train", "dev"):
                path = getattr(task, split)
                if path is None:
                    continue
                if not isinstance(path, str):
                    errors.append(f"task.{split}: must be a path string")
                    continue
                resolved = (base_dir / path) if not Path(path).is_absolute() else Path(path)
                if not resolved.exists():
                    errors.append(f"task.{split}: data file not found: {resolved}")
                setattr(task, split, str(resolved))

    teacher = _geometry(raw.get("teacher"), "teacher", errors,
                        {"num_layers": 4, "hidden_dim": 64, "num_heads": 4})
    student = _geometry(raw.get("student"), "student", errors,
                        {"num_layers": 2, "hidden_dim": 64, "num_heads": 4})
    optim = _dataclass_block(OptimConfig, raw.get("teacher_train"), "teacher_train", errors,
                             {"seed": seed})
    if optim is not None:
        errors.extend(f"teacher_train: {e}" for e in optim.validate())

    distill_raw = raw.get("distill")
    if isinstance(distill_raw, dict) and overrides:
        distill_raw = {**distill_raw, **overrides}
    elif overrides:
        distill_raw = dict(overrides) if distill_raw is None else distill_raw
    dcfg = _dataclass_block(DistillConfig, distill_raw, "distill", errors, {"seed": seed})
    if dcfg is not None:
        hidden = teacher.get("hidden_dim") if teacher else None
        errors.extend(f"distill: {e}" for e in dcfg.validate(hidden))
        if teacher and student and dcfg.attr_layer != "input" \
                and teacher["hidden_dim"] != student["hidden_dim"]:
            errors.append("distill.attr_layer: hidden-layer attribution needs equal hidden_dim")
        if student and dcfg.attr_layer in ("uniform", "input+uniform") and student["num_layers"] < 2:
            errors.append("distill.attr_layer: uniform mapping needs a student with >= 2 layers")
        if task is not None and isinstance(task.num_labels, int) and task.num_labels == 1 \
                and dcfg.metric != "spearman":
            errors.append("distill.metric: regression tasks use 'spearman'")
    if task is not None and optim is not None and task.num_labels == 1 and optim.metric != "spearman":
        errors.append("teacher_train.metric: regression tasks use 'spearman'")

    out = raw.get("output_dir", "runs/default")
    if not isinstance(out, str) or not out:
        errors.append("output_dir: must be a non-empty path string")
        out = "runs/default"
    ckpt = raw.get("teacher_checkpoint")
    if ckpt is not None and not isinstance(ckpt, str):
        errors.append("teacher_checkpoint: must be a path string")
        ckpt = None

    if errors:
        raise ConfigError(errors)
    return RunConfig(task=task, teacher=teacher, student=student, teacher_train=optim,
                     distill=dcfg, output_dir=resolve_output(out), seed=seed,
                     teacher_checkpoint=None if ckpt is None else _resolve(base_dir, ckpt))


def _resolve(base: Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def resolve_output(path: str) -> Path:
    """Relative output dirs live under $ADKD_OUTPUT_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    cfg = parse_config(raw, path.parent, overrides)
    cfg.source = path
    return cfg


def load_examples(task: TaskConfig) -> tuple[list[Example], list[Example] | None]:
    if task.type == "synthetic":
        return synthetic_keyword_task(task.synthetic)
    train = load_tsv(task.train, task.schema, task.num_labels)
    dev = load_tsv(task.dev, task.schema, task.num_labels) if task.dev else None
    return train, dev


def load_splits(task: TaskConfig, vocab: Vocab | None = None) -> tuple[Vocab, Dataset, Dataset | None]:
    """Tokenized train/dev splits; the vocabulary is built from train when not given."""
    train_ex, dev_ex = load_examples(task)
    vocab = vocab or Vocab.build(train_ex)
    train = encode(vocab, train_ex, task.max_len)
    dev = encode(vocab, dev_ex, task.max_len) if dev_ex is not None else None
    return vocab, train, dev


def write_resolved(cfg: RunConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.resolved.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
