"""MNIST ingestion and deterministic split/shuffle/batch plumbing.

IDX files may be raw or gzipped (detected by magic bytes). Pixels are scaled
to [0, 1] by 1/255; no mean/std standardization by default (flag available).
"""

import gzip
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .rng import RngStream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in {0..9}
    role: str

    def __len__(self):
        return len(self.labels)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except Exception as e:
            raise DataError(f"{path}: corrupt gzip stream ({e})") from e
    return raw


def load_idx(images_path, labels_path, role="train", standardize=False) -> Dataset:
    img = _read_bytes(images_path)
    if len(img) < 16:
        raise DataError(f"{images_path}: truncated header")
    magic, n, h, w = struct.unpack(">IIII", img[:16])
    if magic != IMAGE_MAGIC:
        raise DataError(f"{images_path}: bad magic 0x{magic:08x}, want 0x{IMAGE_MAGIC:08x}")
    if len(img) - 16 != n * h * w:
        raise DataError(f"{images_path}: expected {n * h * w} pixel bytes, got {len(img) - 16}")

    lab = _read_bytes(labels_path)
    if len(lab) < 8:
        raise DataError(f"{labels_path}: truncated header")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != LABEL_MAGIC:
        raise DataError(f"{labels_path}: bad magic 0x{lmagic:08x}, want 0x{LABEL_MAGIC:08x}")
    if len(lab) - 8 != ln:
        raise DataError(f"{labels_path}: expected {ln} label bytes, got {len(lab) - 8}")
    if ln != n:
        raise DataError(f"image count {n} != label count {ln}")

    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataError(f"{labels_path}: label {labels.max()} out of range 0..9")

    images = np.frombuffer(img, dtype=np.uint8, offset=16).astype(np.float32)
    images = (images / np.float32(255.0)).reshape(n, 1, h, w)
    if standardize:
        mean = images.mean()
        std = images.std()
        images = (images - mean) / max(std, np.float32(1e-8))
    return Dataset(images, labels, role)


def parse_ratio(ratio) -> Fraction:
    if isinstance(ratio, str):
        ratio = Fraction(ratio)
    r = Fraction(ratio)
    if r <= 0:
        raise ParameterError(f"split ratio must be positive, got {ratio}")
    return r


def split_shuffle(train: Dataset, ratio, stream: RngStream):
    """Shuffle once (Fisher-Yates under the stream), then split prefix/suffix
    into train:val = ratio:1. Epoch reshuffles should keep drawing from the
    same stream."""
    r = parse_ratio(ratio)
    n = len(train)
    val_n = int(n / (r + 1))
    train_n = n - val_n
    if val_n == 0 or train_n == 0:
        raise ParameterError(f"split {ratio} degenerates on {n} examples")
    perm = stream.permutation(n)
    tr, va = perm[:train_n], perm[train_n:]
    return (Dataset(train.images[tr], train.labels[tr], "train"),
            Dataset(train.images[va], train.labels[va], "val"))


def batches(n: int, batch_size: int, perm: np.ndarray = None):
    """Index batches covering every example exactly once; short last batch kept."""
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    idx = np.arange(n) if perm is None else perm
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]
