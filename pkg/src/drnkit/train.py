"""SGD training, learning-rate schedules, evaluation, and checkpoints.

Checkpoint container (version 1): 8-byte magic ``DRNCKPT1``, uint32
little-endian entry count, then per entry a uint32 name length, the name
bytes (utf-8), a uint32 rank, one uint32 extent per axis, and the raw
float32 little-endian payload. The file ends with a 64-bit checksum (the
first 8 bytes of the SHA-256 of everything between magic and checksum).
Round trips are bit-exact, including batch-norm running statistics,
optimizer momentum buffers, the epoch counter, and the rng state.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .blocks import DrnNet
from .ctc import ctc_greedy_decode, ctc_loss
from .data import DatasetSplit, batch_iter
from .rng import STATE_WORD_COUNT, Rng
from .tensor import Tape, backward

CHECKPOINT_MAGIC = b"DRNCKPT1"

SCHEDULES = ("step", "exponential", "constant")


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient went NaN/Inf; the update is aborted."""


class CheckpointError(ValueError):
    """Unreadable, corrupt, or mismatched checkpoint file."""


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "constant"

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")


def lr_at_epoch(config: SgdConfig, epoch: int) -> float:
    """Learning rate for an epoch.

    ``step`` and ``exponential`` use fixed constants: step is 0.001 below
    epoch 50, 0.0001 through epoch 100, 0.00001 after; exponential is
    0.005 * 0.4**epoch. ``constant`` returns base_lr, for short runs where
    the decaying schedules would stall.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if config.schedule == "step":
        if epoch < 50:
            return 0.001
        if epoch <= 100:
            return 0.0001
        return 0.00001
    if config.schedule == "exponential":
        return 0.005 * 0.4**epoch
    return config.base_lr


class Sgd:
    """Momentum SGD; weight decay is added to the gradient (g' = g + wd*w)."""

    def __init__(self, model: DrnNet, config: SgdConfig):
        self.config = config
        self._params = list(model.named_parameters())
        self.velocity = {name: np.zeros_like(p.data) for name, p in self._params}

    def step(self, lr: float) -> None:
        """Apply one update; gradients are cleared afterwards."""
        cfg = self.config
        for name, p in self._params:
            weights = p.data
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
            if cfg.weight_decay:
                g = g + np.asarray(cfg.weight_decay, dtype=weights.dtype) * weights
            v = self.velocity[name]
            v *= np.asarray(cfg.momentum, dtype=v.dtype)
            v += g
            weights -= np.asarray(lr, dtype=weights.dtype) * v
            p.zero_grad()


def sgd_step(optimizer: Sgd, epoch: int) -> float:
    """Convenience wrapper: schedule lookup plus one optimizer step."""
    lr = lr_at_epoch(optimizer.config, epoch)
    optimizer.step(lr)
    return lr


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float
    samples: int


def _sequence_matches(probs: np.ndarray, labels) -> int:
    return sum(
        1 for i, label in enumerate(labels) if ctc_greedy_decode(probs[i]) == tuple(label)
    )


def train_epoch(
    model: DrnNet,
    split: DatasetSplit,
    loss_kind: str,
    optimizer: Sgd,
    rng: Rng,
    batch_size: int,
    lr: float,
) -> EpochMetrics:
    """One shuffled pass; metrics are accumulated on the fly."""
    if loss_kind not in ("xent", "ctc"):
        raise ValueError(f"loss_kind must be 'xent' or 'ctc', got {loss_kind!r}")
    if (loss_kind == "xent") != (model.config.head == "classify"):
        raise ValueError(f"loss {loss_kind!r} does not match head {model.config.head!r}")
    model.train()
    total_loss = 0.0
    correct = 0
    seen = 0
    for images, labels in batch_iter(split, batch_size, rng):
        n = images.shape[0]
        with Tape() as tape:
            logits = model(images)
            if loss_kind == "xent":
                loss, probs = ops.softmax_xent(logits, labels)
                correct += int((probs.data.argmax(axis=1) == np.asarray(labels)).sum())
            else:
                loss = ctc_loss(logits, labels)
                correct += _sequence_matches(logits.data, labels)
        backward(loss, tape)
        optimizer.step(lr)
        total_loss += loss.item() * n
        seen += n
    return EpochMetrics(loss=total_loss / seen, accuracy=correct / seen, samples=seen)


def evaluate(model: DrnNet, split: DatasetSplit, batch_size: int = 256) -> EpochMetrics:
    """Inference-mode metrics: classification accuracy, or the fraction of
    samples whose greedy-decoded sequence equals the label exactly."""
    model.eval()
    total_loss = 0.0
    correct = 0
    seen = 0
    for images, labels in batch_iter(split, batch_size):
        n = images.shape[0]
        logits = model(images)
        if model.config.head == "classify":
            loss, probs = ops.softmax_xent(logits, labels)
            correct += int((probs.data.argmax(axis=1) == np.asarray(labels)).sum())
        else:
            loss = ctc_loss(logits, labels)
            correct += _sequence_matches(logits.data, labels)
        total_loss += loss.item() * n
        seen += n
    return EpochMetrics(loss=total_loss / seen, accuracy=correct / seen, samples=seen)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _state_entries(model: DrnNet, optimizer: Optional[Sgd], epoch: int,
                   rng: Optional[Rng]) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters():
        entries.append((f"param/{name}", p.data))
    for name, b in model.named_buffers():
        entries.append((f"buffer/{name}", b))
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            entries.append((f"opt/momentum/{name}", v))
    entries.append(("meta/epoch", np.asarray([epoch], dtype=np.float32)))
    if rng is not None:
        words = np.asarray(rng.state_words(), dtype=np.float32)
        entries.append(("meta/rng", words))
    return entries


def save_checkpoint(path, model: DrnNet, optimizer: Optional[Sgd] = None,
                    epoch: int = 0, rng: Optional[Rng] = None) -> None:
    payload = bytearray()
    entries = _state_entries(model, optimizer, epoch, rng)
    payload += struct.pack("<I", len(entries))
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        payload += struct.pack("<I", len(name_b))
        payload += name_b
        payload += struct.pack("<I", raw.ndim)
        payload += struct.pack(f"<{raw.ndim}I", *raw.shape)
        payload += raw.tobytes()
    checksum = hashlib.sha256(payload).digest()[:8]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(payload)
        f.write(checksum)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint into name -> float32 array."""
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"{path}: bad magic {blob[:8]!r} (wanted {CHECKPOINT_MAGIC!r}); "
            "wrong file or unsupported version"
        )
    payload, checksum = blob[8:-8], blob[-8:]
    if hashlib.sha256(payload).digest()[:8] != checksum:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    off = 0

    def take(count: int) -> bytes:
        nonlocal off
        if off + count > len(payload):
            raise CheckpointError(f"{path}: truncated payload at offset {off + 8}")
        out = payload[off : off + count]
        off += count
        return out

    (count,) = struct.unpack("<I", take(4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        entries[name] = arr.astype(np.float32)
    if off != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - off} trailing payload bytes")
    return entries


def load_checkpoint(path, model: DrnNet, optimizer: Optional[Sgd] = None,
                    rng: Optional[Rng] = None) -> int:
    """Restore state in place; returns the stored epoch counter."""
    entries = read_checkpoint(path)

    def pull(name: str, shape) -> np.ndarray:
        if name not in entries:
            raise CheckpointError(f"{path}: missing entry {name!r}")
        arr = entries.pop(name)
        if arr.shape != tuple(shape):
            raise CheckpointError(
                f"{path}: entry {name!r} has shape {arr.shape}, expected {tuple(shape)}"
            )
        return arr

    for name, p in model.named_parameters():
        p.data[...] = pull(f"param/{name}", p.data.shape)
    for name, b in model.named_buffers():
        b[...] = pull(f"buffer/{name}", b.shape)
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            v[...] = pull(f"opt/momentum/{name}", v.shape)
    epoch = int(pull("meta/epoch", (1,))[0])
    if rng is not None:
        rng.set_state_words(pull("meta/rng", (STATE_WORD_COUNT,)))
    return epoch


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

def metrics_line(epoch: int, split: str, m: EpochMetrics, lr: float) -> str:
    return f"{epoch}\t{split}\t{m.loss:.10g}\t{m.accuracy:.10g}\t{lr:.10g}"


@dataclass
class FitResult:
    epochs_run: int
    train: list[EpochMetrics] = field(default_factory=list)
    test: list[EpochMetrics] = field(default_factory=list)


class EarlyStop:
    """Stop once the watched loss has not descended for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.stale = 0

    def update(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
        return self.patience > 0 and self.stale >= self.patience


def fit(
    model: DrnNet,
    train_split: DatasetSplit,
    optimizer: Sgd,
    epochs: int,
    batch_size: int,
    seed: int,
    test_split: Optional[DatasetSplit] = None,
    metrics_path=None,
    checkpoint_path=None,
    early_stop_patience: int = 0,
    log=None,
) -> FitResult:
    """Epoch loop with optional per-epoch metrics file, checkpointing, and
    early stop when the test loss stops descending for ``patience`` epochs."""
    loss_kind = "xent" if model.config.head == "classify" else "ctc"
    run_rng = Rng(seed).child("train")
    model.set_rng(run_rng)
    if metrics_path is not None:
        Path(metrics_path).write_text("")  # fresh file; epochs append below

    def emit(epoch: int, split: str, metrics: EpochMetrics, lr: float) -> None:
        if metrics_path is not None:
            with open(metrics_path, "a") as f:
                f.write(metrics_line(epoch, split, metrics, lr) + "\n")

    result = FitResult(epochs_run=0)
    stopper = EarlyStop(early_stop_patience)
    for epoch in range(epochs):
        lr = lr_at_epoch(optimizer.config, epoch)
        tm = train_epoch(model, train_split, loss_kind, optimizer, run_rng, batch_size, lr)
        result.train.append(tm)
        emit(epoch, "train", tm, lr)
        if log:
            log(f"epoch {epoch}: train loss {tm.loss:.4f} acc {tm.accuracy:.4f} lr {lr:g}")
        if test_split is not None:
            em = evaluate(model, test_split, batch_size)
            result.test.append(em)
            emit(epoch, "test", em, lr)
            if log:
                log(f"epoch {epoch}: test  loss {em.loss:.4f} acc {em.accuracy:.4f}")
        result.epochs_run = epoch + 1
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, optimizer, epoch + 1, run_rng)
        if test_split is not None and stopper.update(result.test[-1].loss):
            if log:
                log(f"early stop: test loss has not descended for {stopper.stale} epochs")
            break
    return result
