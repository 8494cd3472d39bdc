"""Datasets: synthetic blobs, IDX image files, splitting, normalization, augmentation."""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import os
import struct
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IdxParseError

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    tag: str = "all"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ConfigError("features and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx: np.ndarray, tag: str) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, tag)


# ---------------------------------------------------------------------------
# synthetic


def gen_synthetic(num_classes: int, samples: int, dims: int, seed: int,
                  separation: float = 3.0) -> Dataset:
    """Gaussian blobs with unit covariance around seeded class centers."""
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    if samples < num_classes:
        raise ConfigError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dims))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True).clip(1e-12)
    labels = np.arange(samples) % num_classes
    rng.shuffle(labels)
    x = centers[labels] + rng.standard_normal((samples, dims))
    return Dataset(x.astype(np.float64), labels, num_classes, "synthetic")


# ---------------------------------------------------------------------------
# IDX format

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, path="") -> np.ndarray:
    """Decode an IDX buffer into an array; raises IdxParseError with the byte offset."""
    if len(raw) < 4:
        raise IdxParseError("file shorter than the 4-byte magic", path, len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise IdxParseError(f"bad magic {raw[:4].hex()}", path, 0)
    dtype = _IDX_TYPES.get(raw[2])
    if dtype is None:
        raise IdxParseError(f"unknown element type 0x{raw[2]:02x}", path, 2)
    ndim = raw[3]
    if ndim == 0:
        raise IdxParseError("zero dimensions", path, 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxParseError("truncated dimension header", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - header < expected:
        raise IdxParseError(f"truncated data: need {expected} bytes, have {len(raw) - header}",
                            path, len(raw))
    if len(raw) - header > expected:
        raise IdxParseError("trailing bytes after data", path, header + expected)
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    code = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ConfigError(f"dtype {arr.dtype} has no IDX encoding")
    be = arr.astype(_IDX_TYPES[code])
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + be.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an image/label IDX pair; pixels become floats in [0, 1], shape (N, 1, H, W).

    Gzipped files are accepted transparently.
    """
    images = parse_idx(_read_bytes(images_path), images_path)
    labels = parse_idx(_read_bytes(labels_path), labels_path)
    if images.ndim != 3:
        raise IdxParseError(f"image file must be 3-D (N, H, W), got {images.ndim}-D", images_path, 3)
    if labels.ndim != 1:
        raise IdxParseError(f"label file must be 1-D, got {labels.ndim}-D", labels_path, 3)
    if images.shape[0] != labels.shape[0]:
        raise IdxParseError(f"image count {images.shape[0]} != label count {labels.shape[0]}",
                            labels_path, 4)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(np.flatnonzero((labels < 0) | (labels >= num_classes))[0])
        raise IdxParseError(f"label {labels[bad]} outside [0, {num_classes})", labels_path, 8 + bad)
    x = images.astype(np.float64)
    if images.dtype.kind == "u" and images.dtype.itemsize == 1:
        x /= 255.0
    return Dataset(x[:, None, :, :], labels.astype(np.int64), num_classes, "all")


# ---------------------------------------------------------------------------
# the 10k handwritten-digit subset shipped in the `mnist` npm package

DIGITS_URL = "https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz"
DIGITS_SHA1 = "b83efc6af88d8db53b196665acdb50cf524bd2ba"
DIGITS_IMAGES = "digits-images-idx3-ubyte.gz"
DIGITS_LABELS = "digits-labels-idx1-ubyte.gz"


def default_data_dir() -> Path:
    return Path(os.environ.get("FLIPLAB_DATA", Path.home() / ".cache" / "fliplab"))


def fetch_digits(data_dir=None, url: str = DIGITS_URL) -> tuple[Path, Path]:
    """Download the 10,010-digit MNIST subset once and store it as gzipped IDX.

    The package stores pixels as value/255 rounded to 3 decimals, which
    round-trips to the original bytes.
    """
    out = Path(data_dir) if data_dir else default_data_dir()
    img_path, lbl_path = out / DIGITS_IMAGES, out / DIGITS_LABELS
    if img_path.exists() and lbl_path.exists():
        return img_path, lbl_path
    out.mkdir(parents=True, exist_ok=True)
    log.info("downloading %s", url)
    with urllib.request.urlopen(url, timeout=120) as resp:
        blob = resp.read()
    if url == DIGITS_URL and hashlib.sha1(blob).hexdigest() != DIGITS_SHA1:
        raise IOError("digit archive checksum mismatch")
    images, labels = [], []
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            vals = np.asarray(json.load(member)["data"], dtype=np.float64)
            px = np.rint(vals * 255).clip(0, 255).astype(np.uint8).reshape(-1, 28, 28)
            images.append(px)
            labels.append(np.full(len(px), digit, dtype=np.uint8))
    for path, arr in ((img_path, np.concatenate(images)), (lbl_path, np.concatenate(labels))):
        buf = io.BytesIO()
        tmp = path.with_suffix(".tmp")
        write_idx(tmp, arr)
        # mtime=0 keeps the archive bytes reproducible
        with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
            gz.write(tmp.read_bytes())
        tmp.unlink()
        path.write_bytes(buf.getvalue())
    return img_path, lbl_path


# ---------------------------------------------------------------------------
# splitting and preprocessing


def split(dataset: Dataset, val_size: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded disjoint split into (train, val)."""
    n = len(dataset)
    if val_size < 0 or val_size >= n:
        raise ConfigError(f"val_size must lie in [0, {n}), got {val_size}")
    if val_size == 0:
        return dataset.subset(np.arange(n), "train"), dataset.subset(np.arange(0), "val")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = np.sort(perm[:val_size]), np.sort(perm[val_size:])
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")


@dataclass
class Preprocess:
    mean: np.ndarray
    std: np.ndarray
    pad_crop: int = 0
    horizontal_flip: bool = False

    @classmethod
    def fit(cls, train: Dataset, pad_crop: int = 0, horizontal_flip: bool = False) -> "Preprocess":
        """Per-channel statistics from the training split only."""
        x = train.features
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        mean = x.mean(axis=axes)
        std = x.std(axis=axes)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std, pad_crop, horizontal_flip)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
        return (x - self.mean.reshape(shape)) / self.std.reshape(shape)


def crop(batch: np.ndarray, padding: int, offsets: np.ndarray) -> np.ndarray:
    """Zero-pad each image then cut an HxW window at its (dy, dx) offset."""
    n, c, h, w = batch.shape
    if padding == 0:
        return batch.copy()
    padded = np.pad(batch, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    rows = offsets[:, 0, None] + np.arange(h)[None, :]  # (N, H)
    cols = offsets[:, 1, None] + np.arange(w)[None, :]  # (N, W)
    idx_n = np.arange(n)[:, None, None, None]
    idx_c = np.arange(c)[None, :, None, None]
    return padded[idx_n, idx_c, rows[:, None, :, None], cols[:, None, None, :]]


def hflip(batch: np.ndarray, which: np.ndarray) -> np.ndarray:
    out = batch.copy()
    out[which] = out[which][..., ::-1]
    return out


def augment(batch: np.ndarray, preprocess: Preprocess, rng: np.random.Generator,
            mode: str = "train") -> np.ndarray:
    """Random pad-crop and horizontal flip, per sample; identity in eval mode."""
    if mode != "train" or batch.ndim != 4:
        return batch
    out = batch
    if preprocess.pad_crop:
        p = preprocess.pad_crop
        offsets = rng.integers(0, 2 * p + 1, size=(len(batch), 2))
        out = crop(out, p, offsets)
    if preprocess.horizontal_flip:
        out = hflip(out, rng.random(len(batch)) < 0.5)
    return out


def replicate_channels(x: np.ndarray, channels: int = 3) -> np.ndarray:
    """Stack a single gray channel into ``channels`` copies."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ConfigError("replicate_channels expects (N, 1, H, W)")
    return np.repeat(x, channels, axis=1)
