"""Corpus loading, vocabulary, tokenization and batching.

Also holds the synthetic keyword-detection generator: every example carries
planted keywords that alone decide the label, so the "right" attribution is
known in advance.
"""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)

SCHEMAS = {
    "single": ("sentence", "label"),
    "pair": ("sentence1", "sentence2", "label"),
}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    text_a: str
    text_b: str | None = None
    label: float = 0
    rationale: tuple[str, ...] = ()


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    mask: tuple[int, ...]

    def __len__(self):
        return len(self.ids)


class Vocab:
    """Token <-> id map with the four reserved specials at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise DataError(f"vocab must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocab tokens must be unique")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def token(self, idx: int) -> str:
        return self.itos[idx]

    pad_id = property(lambda self: self.stoi[PAD])
    unk_id = property(lambda self: self.stoi[UNK])
    cls_id = property(lambda self: self.stoi[CLS])
    sep_id = property(lambda self: self.stoi[SEP])

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.stoi[t] for t in SPECIALS)

    @property
    def frame_ids(self) -> frozenset[int]:
        # structural tokens; [UNK] stands for a real input word so it is not one
        return frozenset((self.pad_id, self.cls_id, self.sep_id))

    @classmethod
    def build(cls, examples: Sequence[Example], min_freq: int = 1) -> "Vocab":
        counts: Counter[str] = Counter()
        for ex in examples:
            counts.update(split_words(ex.text_a))
            if ex.text_b is not None:
                counts.update(split_words(ex.text_b))
        words = [w for w, c in counts.items() if c >= min_freq and w not in SPECIALS]
        words.sort(key=lambda w: (-counts[w], w))
        return cls(list(SPECIALS) + words)


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize(vocab: Vocab, example: Example, max_len: int) -> TokenSequence:
    """[CLS] a [SEP] (b [SEP]) padded with [PAD] to ``max_len``.

    Truncation trims the longer segment first, so the special-token frame
    always survives.
    """
    a = [vocab.id(w) for w in split_words(example.text_a)]
    b = None if example.text_b is None else [vocab.id(w) for w in split_words(example.text_b)]
    budget = max_len - (3 if b is not None else 2)
    if budget < 0:
        raise DataError(f"max_len={max_len} too small for the special-token frame")
    if b is None:
        a = a[:budget]
    else:
        while len(a) + len(b) > budget:
            if len(a) >= len(b):
                a.pop()
            else:
                b.pop()
    ids = [vocab.cls_id] + a + [vocab.sep_id]
    if b is not None:
        ids += b + [vocab.sep_id]
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    ids += [vocab.pad_id] * (max_len - len(ids))
    return TokenSequence(tuple(ids), tuple(mask))


# --- TSV ------------------------------------------------------------------

def load_tsv(path, schema: str = "single", num_labels: int = 2) -> list[Example]:
    """Read a GLUE-style TSV with a header row.

    ``num_labels == 1`` means a real-valued score; otherwise labels must be
    integers in ``[0, num_labels)``. Errors name the offending line.
    """
    path = Path(path)
    if schema not in SCHEMAS:
        raise DataError(f"unknown schema {schema!r}; expected one of {sorted(SCHEMAS)}")
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    columns = SCHEMAS[schema]
    examples = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing} in header {header}")
        pos = {c: header.index(c) for c in columns}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            label = _parse_label(row[pos["label"]], num_labels, f"{path}:{lineno}")
            text_b = row[pos["sentence2"]] if schema == "pair" else None
            text_a = row[pos["sentence" if schema == "single" else "sentence1"]]
            examples.append(Example(text_a, text_b, label))
    return examples


def _parse_label(raw: str, num_labels: int, where: str):
    try:
        if num_labels == 1:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
        value = int(raw)
    except ValueError:
        raise DataError(f"{where}: unparseable label {raw!r}") from None
    if not 0 <= value < num_labels:
        raise DataError(f"{where}: label {value} outside [0, {num_labels})")
    return value


def write_tsv(path, examples: Sequence[Example]) -> None:
    pair = any(ex.text_b is not None for ex in examples)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("sentence1\tsentence2\tlabel\n" if pair else "sentence\tlabel\n")
        for ex in examples:
            cells = [ex.text_a, ex.text_b or ""] if pair else [ex.text_a]
            fh.write("\t".join(cells + [str(ex.label)]) + "\n")


# --- encoded datasets and batching ----------------------------------------

@dataclass
class Dataset:
    """A tokenized split: stacked ids/mask plus labels."""

    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    examples: list[Example] = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        exs = [self.examples[i] for i in index] if self.examples else []
        return Dataset(self.ids[index], self.mask[index], self.labels[index], exs)


def encode(vocab: Vocab, examples: Sequence[Example], max_len: int) -> Dataset:
    seqs = [tokenize(vocab, ex, max_len) for ex in examples]
    ids = np.array([s.ids for s in seqs], dtype=np.int64).reshape(len(seqs), max_len)
    mask = np.array([s.mask for s in seqs], dtype=np.int64).reshape(len(seqs), max_len)
    labels = np.array([ex.label for ex in examples])
    return Dataset(ids, mask, labels, list(examples))


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    index: np.ndarray


def trim(ids: np.ndarray, mask: np.ndarray):
    """Drop trailing columns that are padding in every row."""
    width = int(mask.sum(axis=1).max()) if len(mask) else 0
    return ids[:, :max(width, 1)], mask[:, :max(width, 1)]


def batches(data: Dataset, size: int, seed: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """Yield padded batches; the final partial batch is kept."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.arange(len(data))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(data))
    for start in range(0, len(order), size):
        idx = order[start:start + size]
        ids, mask = trim(data.ids[idx], data.mask[idx])
        yield Batch(ids, mask, data.labels[idx], idx)


# --- synthetic keyword task -----------------------------------------------

FILLERS = (
    "the a this that film movie story plot it is was seem seems and but with of to "
    "in on for as its some very rather quite more most scene scenes actor actors "
    "cast director script ending moment moments time people way little just still "
    "here there one two often never so"
).split()

KEYWORDS = {
    0: ("weird", "distanced", "dull", "tedious", "bland", "awful"),
    1: ("great", "moving", "charming", "witty", "superb", "lovely"),
}


@dataclass(frozen=True)
class SyntheticSpec:
    num_train: int = 2000
    num_dev: int = 500
    min_words: int = 4
    max_words: int = 10
    keywords_per_example: tuple[int, int] = (1, 2)
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.num_train < 1 or self.num_dev < 1:
            errors.append("synthetic num_train and num_dev must be >= 1")
        if not 1 <= self.min_words <= self.max_words:
            errors.append("synthetic requires 1 <= min_words <= max_words")
        lo, hi = self.keywords_per_example
        if not 1 <= lo <= hi:
            errors.append("synthetic keywords_per_example must satisfy 1 <= lo <= hi")
        return errors


def synthetic_keyword_task(spec: SyntheticSpec = SyntheticSpec()) -> tuple[list[Example], list[Example]]:
    """Binary task: label 1 iff the planted keywords are positive ones.

    Each sentence is random filler words with 1..k keywords of a single
    polarity inserted at random positions; those keywords are recorded as the
    example's rationale.
    """
    rng = np.random.default_rng(spec.seed)

    def make(n):
        out = []
        for _ in range(n):
            label = int(rng.integers(2))
            length = int(rng.integers(spec.min_words, spec.max_words + 1))
            words = [FILLERS[i] for i in rng.integers(len(FILLERS), size=length)]
            lo, hi = spec.keywords_per_example
            count = int(rng.integers(lo, hi + 1))
            pool = KEYWORDS[label]
            planted = [pool[i] for i in rng.choice(len(pool), size=count, replace=False)]
            for kw in planted:
                words.insert(int(rng.integers(len(words) + 1)), kw)
            out.append(Example(" ".join(words), None, label, tuple(planted)))
        return out

    return make(spec.num_train), make(spec.num_dev)
