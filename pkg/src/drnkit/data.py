"""Dataset ingestion and generation: IDX files, synthetic digit strings,
deterministic batching, and the on-disk string-corpus format.

Corpus directory layout (written by :func:`write_string_corpus`):

* ``labels.tsv`` — one ``<filename>\\t<label-string>`` row per sample
* ``sample_NNNNN.ten`` — raw tensor container: 8-byte magic ``DRNTEN01``,
  uint32 little-endian rank, one uint32 extent per axis, then float32
  little-endian data in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .ctc import LabelSeq
from .rng import Rng
from .tensor import Tensor

IDX_IMAGES_MAGIC = 2051  # 0x00000803
IDX_LABELS_MAGIC = 2049  # 0x00000801
TENSOR_MAGIC = b"DRNTEN01"

Labels = Union[np.ndarray, tuple[LabelSeq, ...]]


class IdxFormatError(ValueError):
    """Malformed IDX container; message names the file and byte offset."""


class CanvasOverflowError(ValueError):
    """Requested digit count cannot fit on the canvas."""


@dataclass
class DatasetSplit:
    """Images plus labels; class indices for classification, label
    sequences for transcription."""

    images: np.ndarray                   # (N, 1, H, W) float32 in [0, 1]
    labels: Labels
    kind: str                            # "classify" or "sequence"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be (N, 1, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.kind not in ("classify", "sequence"):
            raise ValueError(f"unknown split kind {self.kind!r}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, indices) -> "DatasetSplit":
        idx = np.asarray(indices)
        if self.kind == "classify":
            labels: Labels = np.asarray(self.labels)[idx]
        else:
            labels = tuple(self.labels[int(i)] for i in idx)
        return DatasetSplit(self.images[idx], labels, self.kind)


def _read_exact(f, count: int, path, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise IdxFormatError(
            f"{path}: truncated while reading {what} at offset {f.tell() - len(data)} "
            f"(wanted {count} bytes, got {len(data)})"
        )
    return data


def read_idx(images_path, labels_path) -> DatasetSplit:
    """Read a big-endian IDX image/label pair; pixels are scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)

    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_IMAGES_MAGIC:08x})"
            )
        raw = _read_exact(f, count * rows * cols, images_path, "pixel data")
        if f.read(1):
            raise IdxFormatError(f"{images_path}: trailing bytes after {count} images")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    images = pixels.astype(np.float32) / 255.0

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_LABELS_MAGIC:08x})"
            )
        raw = _read_exact(f, label_count, labels_path, "label data")
    if label_count != count:
        raise IdxFormatError(
            f"count mismatch: {images_path} has {count} images but "
            f"{labels_path} has {label_count} labels"
        )
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return DatasetSplit(images, labels, "classify")


# ---------------------------------------------------------------------------
# synthetic digit strings
# ---------------------------------------------------------------------------

def synth_string_sample(
    rng: Rng,
    glyph_source: DatasetSplit,
    len_range: tuple[int, int] = (3, 5),
    canvas: tuple[int, int] = (32, 160),
    max_gap: int = 8,
    max_jitter: int = 4,
) -> tuple[np.ndarray, LabelSeq]:
    """One string image: glyphs placed left to right on a black canvas.

    Draw order per sample is fixed (count, then gap/glyph/jitter per digit)
    so a seeded rng reproduces pixels and label exactly. Gaps are clipped to
    the remaining canvas budget; glyphs never overlap. The label maps digit
    d to symbol index d + 1 (blank is 0).
    """
    lo, hi = len_range
    height, width = canvas
    gh, gw = glyph_source.image_size
    if hi < lo or lo < 1:
        raise ValueError(f"bad len_range {len_range}")
    if height < gh:
        raise CanvasOverflowError(f"canvas height {height} below glyph height {gh}")
    if hi * gw > width:
        raise CanvasOverflowError(
            f"canvas width {width} cannot fit {hi} glyphs of width {gw}"
        )

    n = int(rng.integers(lo, hi + 1))
    budget = width - n * gw
    image = np.zeros((1, height, width), dtype=np.float32)
    label: list[int] = []
    x = 0
    for i in range(n):
        if i > 0:
            gap = int(rng.integers(0, min(max_gap, budget) + 1))
            budget -= gap
            x += gap
        idx = int(rng.integers(0, len(glyph_source)))
        jitter = int(rng.integers(0, min(max_jitter, height - gh) + 1))
        glyph = glyph_source.images[idx, 0]
        region = image[0, jitter : jitter + gh, x : x + gw]
        np.maximum(region, glyph, out=region)
        label.append(int(glyph_source.labels[idx]) + 1)
        x += gw
    return image, tuple(label)


def synth_string_dataset(
    seed: int,
    glyph_source: DatasetSplit,
    size: int,
    len_range: tuple[int, int] = (3, 5),
    canvas: tuple[int, int] = (32, 160),
) -> DatasetSplit:
    """Seeded corpus of string samples; fully reproducible from the arguments."""
    rng = Rng(seed).child("synth-strings")
    height, width = canvas
    images = np.zeros((size, 1, height, width), dtype=np.float32)
    labels: list[LabelSeq] = []
    for i in range(size):
        image, label = synth_string_sample(rng, glyph_source, len_range, canvas)
        images[i] = image
        labels.append(label)
    return DatasetSplit(images, tuple(labels), "sequence")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_iter(
    split: DatasetSplit, batch_size: int, rng: Optional[Rng] = None
) -> Iterator[tuple[Tensor, Labels]]:
    """Deterministic epoch iterator; the final short batch is emitted.

    With ``rng`` the order is that stream's permutation; without it the
    split's natural order is used.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    if n == 0:
        raise ValueError("empty split")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        images = Tensor(split.images[idx])
        if split.kind == "classify":
            labels: Labels = np.asarray(split.labels)[idx]
        else:
            labels = tuple(split.labels[int(i)] for i in idx)
        yield images, labels


# ---------------------------------------------------------------------------
# tensor container and string-corpus IO
# ---------------------------------------------------------------------------

def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, path, "magic")
        if magic != TENSOR_MAGIC:
            raise IdxFormatError(f"{path}: bad tensor magic {magic!r} at offset 0")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, path, "rank"))
        if rank > 4:
            raise IdxFormatError(f"{path}: rank {rank} exceeds 4")
        shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, path, "extents"))
        count = int(np.prod(shape)) if rank else 1
        raw = _read_exact(f, 4 * count, path, "payload")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def write_string_corpus(split: DatasetSplit, directory) -> None:
    if split.kind != "sequence":
        raise ValueError("string corpus requires a sequence split")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(split)):
        name = f"sample_{i:05d}.ten"
        write_tensor(directory / name, split.images[i])
        text = "".join(str(l - 1) for l in split.labels[i])
        rows.append(f"{name}\t{text}")
    (directory / "labels.tsv").write_text("\n".join(rows) + "\n")


def read_string_corpus(directory) -> DatasetSplit:
    directory = Path(directory)
    index = directory / "labels.tsv"
    if not index.is_file():
        raise FileNotFoundError(f"missing corpus index {index}")
    images, labels = [], []
    for line in index.read_text().splitlines():
        if not line:
            continue
        name, text = line.split("\t")
        images.append(read_tensor(directory / name))
        labels.append(tuple(int(ch) + 1 for ch in text))
    return DatasetSplit(np.stack(images), tuple(labels), "sequence")
