"""Small post-LN transformer encoder with a [CLS] classification head.

The forward pass is split so that it can start from an embedding sequence
(or from any layer's hidden states), which is what attribution needs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .engine import Tensor

PAD_ID = 0
MASK_VALUE = -1e9
CHECKPOINT_MAGIC = b"ADKDCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    vocab_size: int = 100
    max_len: int = 32
    num_labels: int = 2
    seed: int = 0
    ffn_dim: int | None = None
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        for name in ("num_layers", "hidden_dim", "num_heads", "vocab_size", "max_len", "num_labels"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                errors.append(f"{name} must be a positive integer, got {value!r}")
        if not errors and self.hidden_dim % self.num_heads:
            errors.append(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.ffn_dim is not None and (not isinstance(self.ffn_dim, int) or self.ffn_dim < 1):
            errors.append(f"ffn_dim must be a positive integer, got {self.ffn_dim!r}")
        return errors

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.hidden_dim

    @property
    def is_regression(self) -> bool:
        return self.num_labels == 1


class Model:
    """Parameters of one encoder plus its config. Parameters are leaf Tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def __repr__(self):
        c = self.config
        return f"Model(layers={c.num_layers}, d={c.hidden_dim}, heads={c.num_heads}, labels={c.num_labels})"

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "Model":
        return Model(self.config, {k: Tensor(v.data.copy(), True) for k, v in self.params.items()})

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].data[...] = v

    @property
    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    d, f, std = config.hidden_dim, config.ffn, config.init_std
    arrays: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, std, (config.vocab_size, d)),
        "pos_emb": rng.normal(0.0, std, (config.max_len, d)),
        "emb_ln.g": np.ones(d),
        "emb_ln.b": np.zeros(d),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        for name in ("wq", "wk", "wv", "wo"):
            arrays[p + name] = rng.normal(0.0, std, (d, d))
            arrays[p + "b" + name[1]] = np.zeros(d)
        arrays[p + "ln1.g"] = np.ones(d)
        arrays[p + "ln1.b"] = np.zeros(d)
        arrays[p + "w1"] = rng.normal(0.0, std, (d, f))
        arrays[p + "b1"] = np.zeros(f)
        arrays[p + "w2"] = rng.normal(0.0, std, (f, d))
        arrays[p + "b2"] = np.zeros(d)
        arrays[p + "ln2.g"] = np.ones(d)
        arrays[p + "ln2.b"] = np.zeros(d)
    arrays["head.w"] = rng.normal(0.0, std, (d, config.num_labels))
    arrays["head.b"] = np.zeros(config.num_labels)
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def _batched(ids, mask):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    mask = np.ones_like(ids) if mask is None else np.asarray(mask)
    if mask.ndim == 1:
        mask = mask[None, :]
    if mask.shape != ids.shape:
        raise E.ShapeError(f"mask shape {mask.shape} differs from ids shape {ids.shape}")
    return ids, mask.astype(np.float64)


def embed(model: Model, ids) -> Tensor:
    """Token plus learned positional embedding, shape (batch, n, d)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    cfg = model.config
    n = ids.shape[1]
    if n > cfg.max_len:
        raise E.ShapeError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    p = model.params
    return E.add(E.getitem(p["tok_emb"], ids), E.getitem(p["pos_emb"], slice(0, n)))


def _attention(p, prefix, h, mask_add, num_heads):
    b, n, d = h.shape
    dh = d // num_heads

    def heads(x):
        return E.transpose(E.reshape(x, (b, n, num_heads, dh)), (0, 2, 1, 3))

    q = heads(E.add(E.matmul(h, p[prefix + "wq"]), p[prefix + "bq"]))
    k = heads(E.add(E.matmul(h, p[prefix + "wk"]), p[prefix + "bk"]))
    v = heads(E.add(E.matmul(h, p[prefix + "wv"]), p[prefix + "bv"]))
    scores = E.add(E.mul(E.matmul(q, E.swapaxes(k)), 1.0 / np.sqrt(dh)), mask_add)
    ctx = E.matmul(E.softmax(scores, axis=-1), v)
    ctx = E.reshape(E.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return E.add(E.matmul(ctx, p[prefix + "wo"]), p[prefix + "bo"])


def _layer(model, i, h, mask_add):
    p, eps = model.params, model.config.ln_eps
    pre = f"layers.{i}."
    h = E.layer_norm(E.add(h, _attention(p, pre, h, mask_add, model.config.num_heads)),
                     p[pre + "ln1.g"], p[pre + "ln1.b"], eps)
    ff = E.add(E.matmul(E.gelu(E.add(E.matmul(h, p[pre + "w1"]), p[pre + "b1"])), p[pre + "w2"]),
               p[pre + "b2"])
    return E.layer_norm(E.add(h, ff), p[pre + "ln2.g"], p[pre + "ln2.b"], eps)


def _mask_add(mask: np.ndarray) -> np.ndarray:
    return ((1.0 - mask) * MASK_VALUE)[:, None, None, :]


def run_layers(model: Model, h: Tensor, mask: np.ndarray, start: int, stop: int | None = None) -> Tensor:
    """Advance hidden state index ``start`` to ``stop`` (0 = raw embeddings).

    Index 0 -> 1 includes the embedding layer norm and the first block.
    """
    cfg = model.config
    stop = cfg.num_layers if stop is None else stop
    if not 0 <= start <= stop <= cfg.num_layers:
        raise ValueError(f"invalid layer range {start}..{stop} for {cfg.num_layers} layers")
    if h.ndim == 2:
        h = E.reshape(h, (1,) + h.shape)
    if h.shape[-1] != cfg.hidden_dim:
        raise E.ShapeError(f"hidden size {h.shape[-1]} differs from model d={cfg.hidden_dim}")
    madd = _mask_add(mask)
    if start == 0 and stop > 0:
        h = E.layer_norm(h, model.params["emb_ln.g"], model.params["emb_ln.b"], cfg.ln_eps)
    for i in range(start, stop):
        h = _layer(model, i, h, madd)
    return h


def head(model: Model, h: Tensor) -> Tensor:
    cls = E.getitem(h, (slice(None), 0, slice(None)))
    return E.add(E.matmul(cls, model.params["head.w"]), model.params["head.b"])


def forward_from_embeddings(model: Model, emb: Tensor, mask=None, layer: int = 0) -> Tensor:
    """Logits (batch, C) from an embedding sequence injected at hidden index ``layer``.

    ``layer=0`` means ``emb`` is the summed token+position input embedding;
    ``layer=l`` means ``emb`` stands in for the output of block ``l`` and the
    blocks before it are skipped.
    """
    emb = emb if isinstance(emb, Tensor) else Tensor(emb)
    if emb.ndim == 2:
        emb = E.reshape(emb, (1,) + emb.shape)
    b, n = emb.shape[:2]
    mask = np.ones((b, n)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(b, n)
    if layer == 0 and n > model.config.max_len:
        raise E.ShapeError(f"sequence length {n} exceeds max_len {model.config.max_len}")
    if layer == model.config.num_layers:
        return head(model, emb)
    return head(model, run_layers(model, emb, mask, layer))


def hidden_state(model: Model, ids, mask=None, layer: int = 0) -> Tensor:
    """Hidden state at index ``layer`` for token ids (0 = input embeddings)."""
    ids, mask = _batched(ids, mask)
    h = embed(model, ids)
    return run_layers(model, h, mask, 0, layer) if layer else h


def forward(model: Model, ids, mask=None) -> Tensor:
    ids, mask = _batched(ids, mask)
    return forward_from_embeddings(model, embed(model, ids), mask)


def predict_logits(model: Model, ids, mask=None) -> np.ndarray:
    with E.no_grad():
        return forward(model, ids, mask).data


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(model: Model, path, extra: dict | None = None) -> Path:
    """Write JSON header + little-endian float64 payloads to a single file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest, offset, blobs = [], 0, []
    for name, t in model.params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "arrays": manifest,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (size,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(size).decode("utf-8"))


def load_checkpoint(path) -> tuple[Model, dict]:
    """Return (model, extra) from a checkpoint file."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (size,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + size].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    pos += size
    config = ModelConfig(**header["config"])
    params = {}
    for entry in header["arrays"]:
        start = pos + entry["offset"]
        arr = np.frombuffer(data[start:start + entry["nbytes"]], dtype="<f8")
        params[entry["name"]] = Tensor(arr.reshape(entry["shape"]).astype(np.float64), True)
    return Model(config, params), header.get("extra", {})
