"""Initialization, AdaGrad with global-norm clipping, the epoch loop and checkpoints."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import DTYPE, Tensor
from .data import Example, Vocabulary
from .model import ModelParams, Variant, forward, loss, param_shapes

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    embedding_size: int = 100
    hidden_size: int = 100
    learning_rate: float = 0.005
    l2: float = 0.0
    clip_threshold: float = 50.0
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    early_stop_patience: int = 5
    share_encoders: bool = False
    tie_attention_weights: bool = False
    freeze_embeddings: bool = False

    def __post_init__(self):
        for name in ("embedding_size", "hidden_size", "epochs", "batch_size", "early_stop_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.clip_threshold <= 0:
            raise ValueError(f"clip_threshold must be positive, got {self.clip_threshold}")
        # a zero learning rate or l2 is legal (frozen run / no regularization)
        if self.learning_rate < 0 or self.l2 < 0:
            raise ValueError("learning_rate and l2 must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class NumericError(RuntimeError):
    pass


# -- initialization -------------------------------------------------------


def orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """(Semi-)orthogonal matrix from the QR factorization of a Gaussian draw."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


def orthogonal_blocks(rows: int, cols: int, block: int, rng: np.random.Generator) -> np.ndarray:
    """Fill a matrix with independent orthogonal ``block x block`` tiles (edge tiles may be ragged)."""
    out = np.empty((rows, cols))
    for r0 in range(0, rows, block):
        for c0 in range(0, cols, block):
            r1, c1 = min(r0 + block, rows), min(c0 + block, cols)
            out[r0:r1, c0:c1] = orthogonal(r1 - r0, c1 - c0, rng)
    return out


_ORTHOGONAL_SUFFIXES = (".A", ".Wp", ".Wf", ".Uf", ".Uf0", ".Uf1")


def is_orthogonal_param(name: str) -> bool:
    return name.startswith("enc") and name.endswith(_ORTHOGONAL_SUFFIXES)


def init_params(
    variant: Variant | str,
    config: TrainConfig,
    vocab: Vocabulary,
    embeddings: dict[str, np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Orthogonal encoder matrices, pretrained word vectors where available,
    uniform [-0.1, 0.1] for everything else, zero biases."""
    variant = Variant.parse(variant)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if embeddings:
        dim = len(next(iter(embeddings.values())))
        if dim != config.embedding_size:
            raise ValueError(f"embedding table has dimension {dim}, config expects {config.embedding_size}")
    shapes = param_shapes(
        variant,
        len(vocab),
        config.embedding_size,
        config.hidden_size,
        config.share_encoders,
        config.tie_attention_weights,
    )
    tensors: dict[str, Tensor] = {}
    hits = 0
    for name, shape in shapes.items():
        if name == "embed":
            value = rng.uniform(-0.1, 0.1, size=shape)
            if embeddings:
                for i, token in enumerate(vocab.itos):
                    vec = embeddings.get(token)
                    if vec is not None:
                        value[i] = vec
                        hits += 1
        elif is_orthogonal_param(name):
            value = orthogonal_blocks(shape[0], shape[1], config.hidden_size, rng)
        elif name.endswith((".b", ".bp", ".bo")):
            value = np.zeros(shape)
        else:
            value = rng.uniform(-0.1, 0.1, size=shape)
        tensors[name] = Tensor(value, requires_grad=True, name=name)
    if embeddings:
        logger.info("pretrained vectors found for %d of %d vocabulary entries", hits, len(vocab))
    return ModelParams(variant, vocab, tensors, config.share_encoders, config.tie_attention_weights)


# -- optimizer ------------------------------------------------------------


def global_norm(params: ModelParams) -> float:
    total = 0.0
    for t in params:
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return math.sqrt(total)


def clip_gradients(params: ModelParams, threshold: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``threshold``; return the pre-clip norm."""
    norm = global_norm(params)
    if norm > threshold:
        factor = threshold / norm
        for t in params:
            if t.grad is not None:
                t.grad *= factor
    return norm


@dataclass
class AdaGrad:
    """Diagonal AdaGrad: ``accum += g**2``, ``theta -= lr * g / (sqrt(accum) + eps)``."""

    epsilon: float = 1e-8
    accum: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ModelParams, lr: float, skip: Sequence[str] = ()) -> None:
        for name, t in params.items():
            g = t.grad
            if g is None or name in skip:
                t.grad = None
                continue
            acc = self.accum.get(name)
            if acc is None:
                acc = self.accum[name] = np.zeros_like(t.data)
            acc += g * g
            t.data -= lr * g / (np.sqrt(acc) + self.epsilon)
            t.grad = None


def adagrad_step(params: ModelParams, state: AdaGrad, lr: float) -> None:
    state.step(params, lr)


# -- loop -----------------------------------------------------------------


def accuracy(params: ModelParams, examples: Sequence[Example]) -> float:
    if not examples:
        return float("nan")
    correct = sum(forward(params.variant, params, ex).label == ex.gold for ex in examples)
    return correct / len(examples)


def batch_gradients(params: ModelParams, batch: Sequence[Example], l2: float) -> float:
    """Accumulate the gradient of the mean batch loss; return that mean loss."""
    total = 0.0
    scale = 1.0 / len(batch)
    for ex in batch:
        pred = forward(params.variant, params, ex)
        value = loss(pred, ex.gold, params, l2)
        total += float(value.data)
        pred.tape.backward(pred.tape.scale(value, scale))
    return total * scale


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_acc: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss, "dev_acc": self.dev_acc}


def train_loop(
    variant: Variant | str,
    config: TrainConfig,
    train_set: Sequence[Example],
    dev_set: Sequence[Example],
    params: ModelParams | None = None,
    vocab: Vocabulary | None = None,
    embeddings: dict[str, np.ndarray] | None = None,
    on_epoch=None,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Train with minibatch AdaGrad and keep the parameters with the best dev accuracy.

    Stops after ``early_stop_patience`` epochs without dev improvement, or as
    soon as ``on_epoch`` returns a true value. With an empty dev set the final
    parameters are kept and ``dev_acc`` is NaN.
    """
    variant = Variant.parse(variant)
    if not train_set:
        raise ValueError("train_loop: empty training set")
    rng = np.random.default_rng(config.seed)
    if params is None:
        from .data import build_vocab

        vocab = vocab or build_vocab(train_set)
        params = init_params(variant, config, vocab, embeddings, rng)
    if config.learning_rate == 0:
        logger.warning("learning rate is 0: parameters will not change")
    opt = AdaGrad()
    skip = ("embed",) if config.freeze_embeddings else ()
    order = np.arange(len(train_set))
    history: list[EpochRecord] = []
    best, best_acc, stale = params.copy(), -1.0, 0
    for epoch in range(1, config.epochs + 1):
        rng.shuffle(order)
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            value = batch_gradients(params, batch, config.l2)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            clip_gradients(params, config.clip_threshold)
            opt.step(params, config.learning_rate, skip)
            losses.append(value * len(batch))
        record = EpochRecord(epoch, sum(losses) / len(train_set), accuracy(params, dev_set) if dev_set else float("nan"))
        history.append(record)
        logger.info("epoch %d: train loss %.4f, dev acc %.4f", epoch, record.train_loss, record.dev_acc)
        halt = bool(on_epoch(record)) if on_epoch is not None else False
        if not dev_set:
            best = params
        elif record.dev_acc > best_acc:
            best, best_acc, stale = params.copy(), record.dev_acc, 0
        else:
            stale += 1
            halt = halt or stale >= config.early_stop_patience
        if halt:
            break
    return best, history


def grid_search(
    variant: Variant | str,
    base: TrainConfig,
    train_set: Sequence[Example],
    dev_set: Sequence[Example],
    grid: dict[str, Sequence[float]] | None = None,
    results: list | None = None,
) -> TrainConfig:
    """Train every (learning rate, l2, clip) combination and return the best on dev.

    Ties go to the lower learning rate, then lower l2, then lower threshold.
    ``results``, when given, receives ``(config, dev_accuracy)`` for every point.
    """
    grid = grid or {"learning_rate": [0.05, 0.0005, 0.0001], "l2": [0.0, 5e-5, 1e-5, 1e-6], "clip_threshold": [5, 10, 50]}
    keys = ("learning_rate", "l2", "clip_threshold")
    axes = [list(grid.get(k, [getattr(base, k)])) for k in keys]
    if not all(axes):
        raise ValueError("grid_search: empty grid axis")
    scored = []
    for combo in itertools.product(*axes):
        cfg = base.replace(**dict(zip(keys, combo)))
        params, _ = train_loop(variant, cfg, train_set, dev_set)
        acc = accuracy(params, dev_set)
        scored.append((cfg, acc))
        if results is not None:
            results.append((cfg, acc))
    scored.sort(key=lambda item: (-item[1], item[0].learning_rate, item[0].l2, item[0].clip_threshold))
    return scored[0][0]


# -- checkpoints ----------------------------------------------------------

MAGIC = b"SATLSTM\x00"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, params: ModelParams, config: TrainConfig) -> None:
    """Header JSON followed by every parameter as little-endian float64; atomic via rename."""
    path = Path(path)
    header = {
        "version": FORMAT_VERSION,
        "variant": params.variant.value,
        "config": config.to_dict(),
        "vocab": params.vocab.itos,
        "vocab_sha256": params.vocab.digest(),
        "share_encoders": params.share_encoders,
        "tie_attention_weights": params.tie_attention_weights,
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for _, t in params.items():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> tuple[ModelParams, TrainConfig]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size).decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {header.get('version')}")
        vocab = Vocabulary(header["vocab"])
        if vocab.digest() != header["vocab_sha256"]:
            raise CheckpointError(f"{path}: vocabulary hash mismatch")
        tensors = {}
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated at parameter {spec['name']}")
            data = np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(shape)
            tensors[spec["name"]] = Tensor(data.copy(), requires_grad=True, name=spec["name"])
    config = TrainConfig(**header["config"])
    params = ModelParams(
        Variant.parse(header["variant"]), vocab, tensors, header["share_encoders"], header["tie_attention_weights"]
    )
    return params, config
