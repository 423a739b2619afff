"""Training and evaluation loops, checkpoints and the metrics log."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..dataio import AugmentPolicy, LabeledDataset, channel_stats, standard_augment_batch, stochastic_augment
from .layers import softmax_cross_entropy
from .model import ARCHITECTURES, Network, build_model
from .optim import SGD, lr_at_epoch

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,lr,train_loss,val_acc,wall_seconds"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    initial_lr: float = 0.1
    lr_milestones: list[int] = field(default_factory=lambda: [100, 150])
    lr_gamma: float = 0.1
    epochs: int = 200
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    stochastic_augment: bool = False
    standard_augment: bool = True
    model: str = "desk"

    def __post_init__(self):
        self.lr_milestones = [int(m) for m in self.lr_milestones]
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr_gamma must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ValueError("lr_milestones must be strictly increasing")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.initial_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("initial_lr, momentum and weight_decay must be non-negative")
        if self.model not in ARCHITECTURES:
            raise ValueError(f"unknown model {self.model!r}; choose from {sorted(ARCHITECTURES)}")

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float
    wall_seconds: float

    def line(self) -> str:
        return f"{self.epoch},{self.lr:.6g},{self.train_loss:.6f},{self.val_acc:.4f},{self.wall_seconds:.2f}"


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"FRQCKPT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    descriptor: str
    num_classes: int
    mean: list[float]
    std: list[float]
    epoch: int = 0
    rng_state: dict | None = None
    config_hash: bytes = b"\0" * 32
    metrics: list[EpochMetrics] = field(default_factory=list, repr=False)

    @classmethod
    def from_model(cls, model: Network, mean, std, **kw) -> Checkpoint:
        state = {k: np.array(v, dtype=np.float32) for k, v in model.state().items()}
        return cls(state, model.descriptor, model.num_classes, list(mean), list(std), **kw)

    def model(self, dtype=np.float32) -> Network:
        net = build_model(self.descriptor, self.num_classes, seed=0, dtype=dtype)
        net.load_state(self.state)
        return net

    def save(self, path: str | Path) -> None:
        meta = json.dumps(
            {
                "descriptor": self.descriptor,
                "num_classes": self.num_classes,
                "epoch": self.epoch,
                "mean": self.mean,
                "std": self.std,
                "rng_state": self.rng_state,
            },
            sort_keys=True,
        ).encode()
        parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), self.config_hash]
        parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(self.state))]
        for name in sorted(self.state):
            arr = np.ascontiguousarray(self.state[name], dtype="<f4")
            enc = name.encode()
            parts += [struct.pack("<H", len(enc)), enc, struct.pack("<B", arr.ndim)]
            parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        buf = Path(path).read_bytes()
        if not buf.startswith(MAGIC):
            raise ValueError(f"{path}: not a checkpoint file")
        pos = len(MAGIC)

        def take(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, buf, pos)
            pos += struct.calcsize(fmt)
            return vals

        (version,) = take("<I")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config_hash = buf[pos : pos + 32]
        pos += 32
        (n,) = take("<I")
        meta = json.loads(buf[pos : pos + n])
        pos += n
        (count,) = take("<I")
        state = {}
        for _ in range(count):
            (n,) = take("<H")
            name = buf[pos : pos + n].decode()
            pos += n
            (ndim,) = take("<B")
            dims = take(f"<{ndim}I")
            size = int(np.prod(dims)) * 4
            state[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
            pos += size
        return cls(
            state,
            meta["descriptor"],
            meta["num_classes"],
            meta["mean"],
            meta["std"],
            meta["epoch"],
            meta["rng_state"],
            config_hash,
        )


# ---------------------------------------------------------------------------
# loops


def _normalize32(x: np.ndarray, mean, std) -> np.ndarray:
    return ((x - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)).astype(np.float32, copy=False)


def batch_indices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive batches; a trailing batch of one is folded into its predecessor."""
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def predict(model: Network, images: np.ndarray, mean, std, batch_size: int = 500) -> np.ndarray:
    """Eval-mode class predictions for raw (un-normalized) images."""
    out = np.empty(len(images), dtype=np.int64)
    for i in range(0, len(images), batch_size):
        logits = model.forward(_normalize32(images[i : i + batch_size], mean, std), train=False)
        out[i : i + batch_size] = logits.argmax(axis=1)
    return out


def evaluate_model(model: Network, ds: LabeledDataset, mean, std, batch_size: int = 500) -> float:
    if ds.num_classes != model.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes, model has {model.num_classes}")
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, ds.images, mean, std, batch_size) == ds.labels))


def evaluate(checkpoint: Checkpoint, ds: LabeledDataset, batch_size: int = 500) -> float:
    """Accuracy in [0, 1] with running batch-norm statistics and no augmentation."""
    if ds.num_classes != checkpoint.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes, checkpoint has {checkpoint.num_classes}")
    return evaluate_model(checkpoint.model(), ds, checkpoint.mean, checkpoint.std, batch_size)


def train(
    config: TrainConfig,
    train_set: LabeledDataset,
    val_set: LabeledDataset | None = None,
    mean: Sequence[float] | None = None,
    std: Sequence[float] | None = None,
    augment_policy: AugmentPolicy | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> Checkpoint:
    """Train a fresh model and return its final checkpoint.

    ``mean``/``std`` default to the channel statistics of ``train_set`` as
    given, i.e. before any stochastic-filtering copies are added. With
    ``config.stochastic_augment`` the set is doubled once up front using
    ``augment_policy`` (default: seeded from ``config.seed``).
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if mean is None or std is None:
        mean, std = channel_stats(train_set)
    if config.stochastic_augment:
        train_set = stochastic_augment(train_set, augment_policy or AugmentPolicy(seed=config.seed))
    if len(train_set) < 2:
        raise ValueError("training needs at least 2 items for batch norm")

    model = build_model(config.model, train_set.num_classes, seed=config.seed)
    opt = SGD(model, config.momentum, config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    metrics: list[EpochMetrics] = []

    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        total, seen = 0.0, 0
        order = rng.permutation(len(train_set))
        for b, idx in enumerate(batch_indices(order, config.batch_size)):
            x = train_set.images[idx]
            if config.standard_augment:
                x = standard_augment_batch(x, rng)
            logits = model.forward(_normalize32(x, mean, std), train=True)
            loss, grad = softmax_cross_entropy(logits, train_set.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            model.backward(grad.astype(np.float32, copy=False))
            opt.step(lr)
            total += loss * len(idx)
            seen += len(idx)
        val_acc = evaluate_model(model, val_set, mean, std) if val_set is not None else float("nan")
        m = EpochMetrics(epoch, lr, total / seen, val_acc, time.perf_counter() - start)
        metrics.append(m)
        log.info("epoch %d lr %.4g loss %.4f val_acc %.4f (%.1fs)", *vars(m).values())
        if on_epoch is not None:
            on_epoch(m)

    return Checkpoint.from_model(
        model,
        mean,
        std,
        epoch=config.epochs,
        rng_state=rng.bit_generator.state,
        config_hash=config.digest(),
        metrics=metrics,
    )


def write_metrics(path: str | Path, metrics: Sequence[EpochMetrics]) -> None:
    Path(path).write_text("\n".join([METRICS_HEADER, *(m.line() for m in metrics)]) + "\n")


def read_metrics(path: str | Path) -> list[EpochMetrics]:
    lines = Path(path).read_text().splitlines()[1:]
    out = []
    for line in lines:
        e, lr, loss, acc, wall = line.split(",")
        out.append(EpochMetrics(int(e), float(lr), float(loss), float(acc), float(wall)))
    return out
