"""
Desk-scale transformer encoder and the synthetic classification task.

The encoder is pre-LN: ``h = x + attn(ln1(x)); out = h + ffn(ln2(h))``.
Attention heads are concatenated and fed straight into the residual (no
output projection). The classifier reads position 0 of the last block.

Parameters are grouped for pipeline placement: group 0 is the embedding,
groups 1..L are the encoder blocks and group L+1 is the classifier.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping, Optional

import numpy as np

from . import tensor as T
from .attention import AttentionLayer, HeadWeights, LocalRunner
from .errors import InvalidConfig, ShapeMismatch
from .tensor import Parameter, Tensor

Runner = Callable[[AttentionLayer, Tensor], "tuple[Tensor, float]"]


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 6
    heads: int = 12
    d_model: int = 48
    d_ff: int = 96
    vocab: int = 64
    seq_len: int = 16
    classes: int = 4
    seed: int = 0
    dtype: str = "float32"
    scaled_attention: bool = True

    def __post_init__(self):
        for name in ("layers", "heads", "d_model", "d_ff", "vocab", "seq_len", "classes"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.d_model % self.heads:
            raise InvalidConfig(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig(f"dtype must be float32 or float64, not {self.dtype}")
        if self.vocab < self.classes:
            raise InvalidConfig("vocab must be at least the number of classes")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def from_dict(cls, doc: Mapping) -> EncoderConfig:
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise InvalidConfig(f"unknown model fields: {sorted(extra)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------


def group_of(name: str, cfg: EncoderConfig) -> int:
    if name.startswith("embed."):
        return 0
    if name.startswith("cls."):
        return cfg.layers + 1
    return int(name.split(".")[0][len("layer"):]) + 1


def group_shapes(cfg: EncoderConfig, group: int) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff
    if group == 0:
        return [("embed.tok", (cfg.vocab, d)), ("embed.pos", (cfg.seq_len, d))]
    if group == cfg.layers + 1:
        return [("cls.w", (d, cfg.classes)), ("cls.b", (cfg.classes,))]
    p = f"layer{group - 1}."
    shapes = [(p + "ln1.gain", (d,)), (p + "ln1.bias", (d,))]
    for h in range(cfg.heads):
        shapes += [(f"{p}head{h}.{w}", (d, cfg.d_head)) for w in ("wq", "wk", "wv")]
    shapes += [
        (p + "ln2.gain", (d,)),
        (p + "ln2.bias", (d,)),
        (p + "ffn.w1", (d, f)),
        (p + "ffn.b1", (f,)),
        (p + "ffn.w2", (f, d)),
        (p + "ffn.b2", (d,)),
    ]
    return shapes


def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    return [s for g in range(cfg.layers + 2) for s in group_shapes(cfg, g)]


def stage_groups(cfg: EncoderConfig, lo: int, hi: int, first: bool, last: bool) -> list[int]:
    """Parameter groups owned by a stage holding blocks [lo, hi)."""
    return ([0] if first else []) + [b + 1 for b in range(lo, hi)] + ([cfg.layers + 1] if last else [])


def closed_form_param_count(cfg: EncoderConfig) -> int:
    d, f, L = cfg.d_model, cfg.d_ff, cfg.layers
    per_block = 3 * d * d + 4 * d + d * f + f + f * d + d
    return cfg.vocab * d + cfg.seq_len * d + L * per_block + d * cfg.classes + cfg.classes


def _init_value(name: str, shape, rng: np.random.Generator, cfg: EncoderConfig) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape, dtype=cfg.np_dtype)
    if name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2") or name == "cls.b":
        return np.zeros(shape, dtype=cfg.np_dtype)
    bound = 1.0 / math.sqrt(cfg.d_model)
    if name == "cls.w":
        # Freshly appended head starts small so the untrained loss sits near ln(classes).
        bound = 1.0 / cfg.d_model
    return rng.uniform(-bound, bound, shape).astype(cfg.np_dtype)


class Encoder:
    """Parameters of the encoder plus its configuration."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, Parameter]):
        self.cfg = cfg
        self.params = params

    @property
    def param_count(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def leaves(self, names=None) -> dict[str, Tensor]:
        names = self.params.keys() if names is None else names
        return {n: self.params[n].leaf() for n in names}

    def group(self, g: int) -> list[Parameter]:
        return [self.params[n] for n, _ in group_shapes(self.cfg, g)]

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.value.data for n, p in self.params.items()}


def build_model(cfg: EncoderConfig) -> Encoder:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg):
        params[name] = Parameter(name, Tensor(_init_value(name, shape, rng, cfg)))
    return Encoder(cfg, params)


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def embed(cfg: EncoderConfig, w: Mapping[str, Tensor], ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] != cfg.seq_len:
        raise ShapeMismatch(f"token ids {ids.shape} do not match seq_len={cfg.seq_len}")
    positions = np.broadcast_to(np.arange(cfg.seq_len), ids.shape)
    return T.add(T.embedding(w["embed.tok"], ids), T.embedding(w["embed.pos"], positions))


def attention_layer(cfg: EncoderConfig, w: Mapping[str, Tensor], block: int) -> AttentionLayer:
    p = f"layer{block}."
    heads = [HeadWeights(w[f"{p}head{h}.wq"], w[f"{p}head{h}.wk"], w[f"{p}head{h}.wv"], h) for h in range(cfg.heads)]
    return AttentionLayer(heads, cfg.d_model, cfg.d_head, cfg.scaled_attention)


def encoder_block(
    cfg: EncoderConfig, w: Mapping[str, Tensor], block: int, x: Tensor, runner: Runner
) -> tuple[Tensor, float]:
    """One pre-LN block. Returns the output and the attention time reported by ``runner``."""
    p = f"layer{block}."
    a = T.layer_norm(x, w[p + "ln1.gain"], w[p + "ln1.bias"])
    z, attn_ms = runner(attention_layer(cfg, w, block), a)
    h = T.add(x, z)
    c = T.layer_norm(h, w[p + "ln2.gain"], w[p + "ln2.bias"])
    hidden = T.relu(T.add_bias(T.matmul(c, w[p + "ffn.w1"]), w[p + "ffn.b1"]))
    out = T.add(h, T.add_bias(T.matmul(hidden, w[p + "ffn.w2"]), w[p + "ffn.b2"]))
    return out, attn_ms


def classify(cfg: EncoderConfig, w: Mapping[str, Tensor], x: Tensor) -> Tensor:
    first = T.select(x, axis=1, index=0)
    return T.add_bias(T.matmul(first, w["cls.w"]), w["cls.b"])


def run_blocks(
    cfg: EncoderConfig, w: Mapping[str, Tensor], x: Tensor, lo: int, hi: int, runner: Runner
) -> tuple[Tensor, list[float]]:
    times = []
    for b in range(lo, hi):
        x, ms = encoder_block(cfg, w, b, x, runner)
        times.append(ms)
    return x, times


def accuracy(logits: Tensor, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits.data, axis=-1) == np.asarray(labels)))


def forward_loss(
    model: Encoder,
    batch: Batch,
    runner: Optional[Runner] = None,
    weights: Optional[Mapping[str, Tensor]] = None,
) -> tuple[Tensor, float]:
    """Cross-entropy of the position-0 classifier over a batch, and its accuracy."""
    cfg = model.cfg
    runner = runner or LocalRunner()
    w = weights if weights is not None else model.leaves()
    x = embed(cfg, w, batch.ids)
    x, _ = run_blocks(cfg, w, x, 0, cfg.layers, runner)
    logits = classify(cfg, w, x)
    return T.cross_entropy(logits, batch.labels), accuracy(logits, batch.labels)


def per_sample_losses(model: Encoder, batch: Batch, runner: Optional[Runner] = None) -> np.ndarray:
    out = []
    for i in range(len(batch)):
        loss, _ = forward_loss(model, batch.slice(i, i + 1), runner)
        out.append(loss.item())
    return np.array(out)


def train_step(model: Encoder, batch: Batch, lr: float, runner: Optional[Runner] = None) -> tuple[float, float]:
    """One plain (non-pipelined) SGD step. Returns the pre-step loss and accuracy."""
    w = model.leaves()
    loss, acc = forward_loss(model, batch, runner, w)
    T.backward(loss)
    names = list(model.params)
    grads = [w[n].grad if w[n].grad is not None else np.zeros_like(w[n].data) for n in names]
    T.sgd_step([model.params[n] for n in names], lr, grads)
    return loss.item(), acc


def train_sequential(
    model: Encoder, batches: Iterator[Batch], steps: int, lr: float, runner: Optional[Runner] = None
) -> list[float]:
    losses = []
    for _, batch in zip(range(steps), batches):
        losses.append(train_step(model, batch, lr, runner)[0])
    return losses


def evaluate(model: Encoder, batches, runner: Optional[Runner] = None) -> tuple[float, float]:
    """Mean loss and accuracy over ``batches`` without touching the parameters."""
    total_loss, total_acc, n = 0.0, 0.0, 0
    for batch in batches:
        loss, acc = forward_loss(model, batch, runner)
        total_loss += loss.item() * len(batch)
        total_acc += acc * len(batch)
        n += len(batch)
    return total_loss / n, total_acc / n


# ---------------------------------------------------------------------------
# Synthetic task
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # [B, seq_len] int64
    labels: np.ndarray  # [B] int64

    def __len__(self) -> int:
        return self.ids.shape[0]

    def slice(self, lo: int, hi: int) -> Batch:
        return Batch(self.ids[lo:hi], self.labels[lo:hi])


class SyntheticTask:
    """Sequences whose label is the token bucket that holds the majority of tokens.

    The vocabulary is cut into ``classes`` equal buckets. Each sequence is
    drawn by taking a token from the label's bucket with probability
    ``bias`` and a uniform token otherwise, redrawing until that bucket is
    the strict plurality. Labels are assigned round-robin, so classes are
    balanced exactly.
    """

    def __init__(self, cfg: EncoderConfig, size: int = 4096, seed: int = 0, bias: float = 0.25):
        if size < cfg.classes:
            raise InvalidConfig("dataset needs at least one sample per class")
        self.cfg = cfg
        self.size = size
        self.seed = seed
        rng = np.random.default_rng([seed, 7919])
        bucket = cfg.vocab // cfg.classes
        labels = np.arange(size) % cfg.classes
        rng.shuffle(labels)
        ids = np.empty((size, cfg.seq_len), dtype=np.int64)
        for i, y in enumerate(labels):
            while True:
                from_bucket = rng.random(cfg.seq_len) < bias
                seq = np.where(
                    from_bucket,
                    rng.integers(y * bucket, (y + 1) * bucket, cfg.seq_len),
                    rng.integers(0, cfg.vocab, cfg.seq_len),
                )
                counts = np.bincount(np.minimum(seq // bucket, cfg.classes - 1), minlength=cfg.classes)
                top = counts.max()
                if counts[y] == top and (counts == top).sum() == 1:
                    break
            ids[i] = seq
        self.ids = ids
        self.labels = labels.astype(np.int64)

    def majority_label(self, seq: np.ndarray) -> int:
        bucket = self.cfg.vocab // self.cfg.classes
        return int(np.argmax(np.bincount(np.minimum(np.asarray(seq) // bucket, self.cfg.classes - 1), minlength=self.cfg.classes)))

    def batches(self, batch_size: int, epoch: int = 0) -> Iterator[Batch]:
        """One pass over the data in an epoch-specific shuffled order (remainder dropped)."""
        order = np.random.default_rng([self.seed, epoch, 104729]).permutation(self.size)
        for lo in range(0, self.size - batch_size + 1, batch_size):
            idx = order[lo : lo + batch_size]
            yield Batch(self.ids[idx], self.labels[idx])

    def stream(self, batch_size: int) -> Iterator[Batch]:
        epoch = 0
        while True:
            yield from self.batches(batch_size, epoch)
            epoch += 1

    def batches_per_epoch(self, batch_size: int) -> int:
        return self.size // batch_size


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CFCK"


def save_checkpoint(path, model: Encoder) -> None:
    """Config JSON header followed by every parameter in the wire tensor format."""
    from .transport import encode_tensor

    header = {
        "config": model.cfg.to_dict(),
        "params": [{"name": n, "version": p.version, "shape": list(p.shape)} for n, p in model.params.items()],
    }
    raw = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(raw)) + raw)
        for p in model.params.values():
            fh.write(encode_tensor(p.value.data))


def load_checkpoint(path) -> Encoder:
    from .transport import read_tensor

    with open(Path(path), "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise InvalidConfig(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        cfg = EncoderConfig.from_dict(header["config"])
        params = {}
        for entry in header["params"]:
            arr = read_tensor(fh)
            params[entry["name"]] = Parameter(entry["name"], Tensor(arr), int(entry["version"]))
    return Encoder(cfg, params)
