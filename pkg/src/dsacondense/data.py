"""Dataset loaders, normalization, synthetic-set files and image-grid export."""
from __future__ import annotations

import contextlib
import fcntl
import gzip
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .sets import Dataset, SyntheticSet

DATA_ROOT_ENV = "DSACONDENSE_DATA"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR10_RECORD = 1 + 3072
CIFAR100_RECORD = 2 + 3072

SYN_MAGIC = b"DSA1"
SYN_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CHUNK = 4096


class DataError(Exception):
    """Base class for loader and file-format failures."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        where = ""
        if path is not None:
            where = f" [{path}" + (f" @ byte {offset}" if offset is not None else "") + "]"
        super().__init__(message + where)
        self.path, self.offset = path, offset


class BadMagicError(DataError):
    pass


class TruncatedError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class FileSizeError(DataError):
    pass


class ChecksumError(DataError):
    pass


class VersionError(DataError):
    pass


def data_root(root=None) -> Path:
    """Explicit root, else the environment variable, else ``./data``."""
    return Path(root or os.environ.get(DATA_ROOT_ENV, "data"))


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise DataError("file not found", path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


# ----------------------------------------------------------------------
# IDX (MNIST family)
# ----------------------------------------------------------------------

def read_idx(path, magic: int) -> np.ndarray:
    """Parses a big-endian unsigned-byte IDX file with the given magic number."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedError("file shorter than the IDX magic", path, len(raw))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"IDX magic 0x{found:08x}, expected 0x{magic:08x}", path, 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedError(f"header needs {header} bytes, file has {len(raw)}", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise TruncatedError(f"payload needs {need} bytes for dims {dims}, file has {len(raw)}", path, len(raw))
    return np.frombuffer(raw, np.uint8, int(np.prod(dims)), header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (N, 1, H, W) and int64 labels."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels", labels_path)
    return images[:, None, :, :], labels.astype(np.int64)


# ----------------------------------------------------------------------
# CIFAR / SVHN binary records
# ----------------------------------------------------------------------

def read_records(path, label_bytes: int, shape_hwc, channels_first: bool) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-size records: label byte(s) then pixel bytes; the last label byte is used."""
    raw = _read_bytes(path)
    h, w, c = shape_hwc
    size = label_bytes + h * w * c
    if len(raw) == 0 or len(raw) % size:
        raise FileSizeError(
            f"size {len(raw)} is not a positive multiple of the {size}-byte record "
            f"(expected {max(len(raw) // size, 1) * size} bytes)", path, len(raw) - len(raw) % size)
    rec = np.frombuffer(raw, np.uint8).reshape(-1, size)
    labels = rec[:, label_bytes - 1].astype(np.int64)
    pix = rec[:, label_bytes:]
    images = pix.reshape(-1, c, h, w) if channels_first else pix.reshape(-1, h, w, c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(images), labels


def _concat_records(paths, label_bytes, shape_hwc, channels_first):
    parts = [read_records(p, label_bytes, shape_hwc, channels_first) for p in paths]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _check_labels(labels, num_classes, path):
    if labels.size and labels.max() >= num_classes:
        bad = int(np.flatnonzero(labels >= num_classes)[0])
        raise DataError(f"label {labels[bad]} at record {bad} outside [0, {num_classes})", path)


# ----------------------------------------------------------------------
# normalization and dataset assembly
# ----------------------------------------------------------------------

def channel_stats(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of uint8 NCHW images in [0, 1] units, from exact integer sums."""
    count = raw.shape[0] * raw.shape[2] * raw.shape[3]
    s1 = np.zeros(raw.shape[1], np.uint64)
    s2 = np.zeros(raw.shape[1], np.uint64)
    for lo in range(0, raw.shape[0], _CHUNK):
        part = raw[lo : lo + _CHUNK].astype(np.uint64)
        s1 += part.sum(axis=(0, 2, 3))
        s2 += (part * part).sum(axis=(0, 2, 3))
    mean = s1.astype(np.float64) / count
    var = s2.astype(np.float64) / count - mean * mean
    return mean / 255.0, np.sqrt(np.maximum(var, 0.0)) / 255.0


def normalize(raw: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    """(raw/255 - mean)/std, computed in float64 one chunk at a time."""
    out = np.empty(raw.shape, dtype)
    mean, std = np.reshape(mean, (1, -1, 1, 1)), np.reshape(std, (1, -1, 1, 1))
    for lo in range(0, raw.shape[0], _CHUNK):
        out[lo : lo + _CHUNK] = (raw[lo : lo + _CHUNK].astype(np.float64) / 255.0 - mean) / std
    return out


def denormalize(x: np.ndarray, mean, std) -> np.ndarray:
    return np.asarray(x, np.float64) * np.reshape(std, (1, -1, 1, 1)) + np.reshape(mean, (1, -1, 1, 1))


def make_dataset(name, train_raw, train_y, test_raw, test_y, num_classes) -> Dataset:
    """Normalizes both splits with constants from the training split."""
    mean, std = channel_stats(train_raw)
    return Dataset(name, normalize(train_raw, mean, std), train_y, normalize(test_raw, mean, std), test_y,
                   mean, std, num_classes)


def load_mnist(root=None, name: str = "mnist") -> Dataset:
    """MNIST or Fashion-MNIST from ``<root>/<name>/`` in the standard IDX file names."""
    d = data_root(root) / name
    tr = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
    te = load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
    _check_labels(tr[1], 10, d)
    return make_dataset(name, *tr, *te, 10)


def load_cifar10(directory=None) -> Dataset:
    d = Path(directory) if directory is not None else data_root() / "cifar-10-batches-bin"
    train = _concat_records([d / f"data_batch_{i}.bin" for i in range(1, 6)], 1, (32, 32, 3), True)
    test = read_records(d / "test_batch.bin", 1, (32, 32, 3), True)
    _check_labels(train[1], 10, d)
    _check_labels(test[1], 10, d)
    return make_dataset("cifar10", *train, *test, 10)


def load_cifar100(directory=None) -> Dataset:
    """CIFAR-100 binary files with fine labels."""
    d = Path(directory) if directory is not None else data_root() / "cifar-100-binary"
    train = read_records(d / "train.bin", 2, (32, 32, 3), True)
    test = read_records(d / "test.bin", 2, (32, 32, 3), True)
    _check_labels(train[1], 100, d)
    return make_dataset("cifar100", *train, *test, 100)


def load_svhn_raw(directory=None) -> Dataset:
    """SVHN in the pre-converted layout: one label byte (0-9) then 32x32x3 HWC bytes per record."""
    d = Path(directory) if directory is not None else data_root() / "svhn"
    train = read_records(d / "train.bin", 1, (32, 32, 3), False)
    test = read_records(d / "test.bin", 1, (32, 32, 3), False)
    _check_labels(train[1], 10, d)
    return make_dataset("svhn", *train, *test, 10)


LOADERS = {
    "mnist": lambda root: load_mnist(root, "mnist"),
    "fashionmnist": lambda root: load_mnist(root, "fashionmnist"),
    "cifar10": lambda root: load_cifar10(data_root(root) / "cifar-10-batches-bin"),
    "cifar100": lambda root: load_cifar100(data_root(root) / "cifar-100-binary"),
    "svhn": lambda root: load_svhn_raw(data_root(root) / "svhn"),
}


def load_dataset(name: str, root=None) -> Dataset:
    key = name.lower().replace("-", "").replace("_", "")
    if key not in LOADERS:
        raise DataError(f"unknown dataset {name!r}; expected one of {sorted(LOADERS)}")
    return LOADERS[key](root)


# ----------------------------------------------------------------------
# synthetic-set files
# ----------------------------------------------------------------------

@contextlib.contextmanager
def path_lock(path):
    """Exclusive advisory lock on ``<path>.lock`` for the duration of a write."""
    lock = Path(str(path) + ".lock")
    with open(lock, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if hasattr(v, "__dataclass_fields__"):
        return {k: _jsonable(getattr(v, k)) for k in v.__dataclass_fields__}
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def encode_synthetic(syn: SyntheticSet, version: int = SYN_VERSION) -> bytes:
    images = np.asarray(syn.images)
    if not np.all(np.isfinite(images)):
        raise DataError("refusing to save non-finite synthetic pixels")
    tag = {v: k for k, v in _DTYPE_TAGS.items()}.get(images.dtype.newbyteorder("<"))
    if tag is None:
        raise DataError(f"unsupported image dtype {images.dtype}")
    meta = json.dumps(_jsonable({
        "ipc": syn.ipc, "num_classes": syn.num_classes, "init": syn.init, "seed": syn.seed,
        "config": syn.config, "trace": syn.trace,
        "mean": syn.mean, "std": syn.std,
    }), sort_keys=True).encode()
    body = b"".join([
        SYN_MAGIC,
        struct.pack("<II", version, images.ndim),
        struct.pack(f"<{images.ndim}I", *images.shape),
        struct.pack("<BI", tag, len(meta)),
        meta,
        images.astype(_DTYPE_TAGS[tag]).tobytes(),
        np.asarray(syn.labels, "<i8").tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def decode_synthetic(raw: bytes, path=None) -> SyntheticSet:
    if raw[:4] != SYN_MAGIC:
        raise BadMagicError(f"magic {raw[:4]!r}, expected {SYN_MAGIC!r}", path, 0)
    if len(raw) < 16:
        raise TruncatedError("file too short for a synthetic-set header", path, len(raw))
    stored = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) != stored:
        raise ChecksumError(f"CRC32 mismatch (stored 0x{stored:08x})", path, len(raw) - 4)
    version, ndim = struct.unpack("<II", raw[4:12])
    if version != SYN_VERSION:
        raise VersionError(f"file version {version}, this reader understands version {SYN_VERSION}", path, 4)
    off = 12
    shape = struct.unpack(f"<{ndim}I", raw[off : off + 4 * ndim])
    off += 4 * ndim
    tag, meta_len = struct.unpack("<BI", raw[off : off + 5])
    off += 5
    if tag not in _DTYPE_TAGS:
        raise DataError(f"unknown dtype tag {tag}", path, off - 5)
    meta = json.loads(raw[off : off + meta_len].decode())
    off += meta_len
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape))
    if len(raw) - 4 < off + count * dtype.itemsize + shape[0] * 8:
        raise TruncatedError("payload shorter than header declares", path, off)
    images = np.frombuffer(raw, dtype, count, off).reshape(shape).astype(dtype.newbyteorder("="))
    off += count * dtype.itemsize
    labels = np.frombuffer(raw, "<i8", shape[0], off).astype(np.int64)
    arr = lambda v: None if v is None else np.asarray(v, np.float64)
    return SyntheticSet(images, labels, meta["ipc"], meta["num_classes"], meta["init"], meta["seed"],
                        meta["config"], meta["trace"], arr(meta["mean"]), arr(meta["std"]))


def save_synthetic(path, syn: SyntheticSet) -> None:
    """Writes atomically under an exclusive path lock."""
    path = Path(path)
    data = encode_synthetic(syn)
    with path_lock(path):
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)


def load_synthetic(path) -> SyntheticSet:
    return decode_synthetic(_read_bytes(path), path)


# ----------------------------------------------------------------------
# image grid export
# ----------------------------------------------------------------------

def grid_array(syn: SyntheticSet, mean=None, std=None) -> np.ndarray:
    """uint8 (rows*H, cols*W, C) grid: one row per class, ipc columns."""
    mean = syn.mean if mean is None else mean
    std = syn.std if std is None else std
    if syn.images.shape[0] == 0:
        raise DataError("cannot export an empty synthetic set")
    x = syn.images.astype(np.float64)
    if mean is not None and std is not None:
        x = denormalize(x, mean, std)
    pix = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    n, c, h, w = pix.shape
    rows, cols = syn.num_classes, syn.ipc
    tiles = pix.reshape(rows, cols, c, h, w).transpose(0, 3, 1, 4, 2)
    return tiles.reshape(rows * h, cols * w, c)


def write_ppm(path, grid: np.ndarray, comment: str | None = None) -> None:
    if grid.shape[2] == 1:
        grid = np.repeat(grid, 3, axis=2)
    h, w, _ = grid.shape
    notes = "".join(f"# {line}\n" for line in (comment or "").splitlines())
    Path(path).write_bytes(f"P6\n{notes}{w} {h}\n255\n".encode() + grid.tobytes())


def export_grid(syn: SyntheticSet, path, mean=None, std=None, comment: str | None = None) -> Path:
    """PNG when the path ends in .png (needs Pillow), PPM otherwise.

    ``comment`` is stored as a PNG text chunk or as PPM header comments.
    """
    path = Path(path)
    grid = grid_array(syn, mean, std)
    if path.suffix.lower() == ".png":
        from PIL import Image, PngImagePlugin

        info = PngImagePlugin.PngInfo()
        if comment:
            info.add_text("dsacondense", comment)
        img = Image.fromarray(grid[:, :, 0] if grid.shape[2] == 1 else grid)
        img.save(path, format="PNG", pnginfo=info)
    else:
        write_ppm(path, grid, comment)
    return path


__all__ = [
    "BadMagicError",
    "ChecksumError",
    "CountMismatchError",
    "DATA_ROOT_ENV",
    "DataError",
    "FileSizeError",
    "TruncatedError",
    "VersionError",
    "channel_stats",
    "data_root",
    "denormalize",
    "export_grid",
    "grid_array",
    "load_cifar10",
    "load_cifar100",
    "load_dataset",
    "load_idx",
    "load_mnist",
    "load_svhn_raw",
    "load_synthetic",
    "make_dataset",
    "normalize",
    "read_idx",
    "read_records",
    "save_synthetic",
]
