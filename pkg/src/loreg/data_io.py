"""Binary dataset formats: IDX (MNIST/FMNIST distribution format) and the
CIFAR-10 binary batch layout, plus writers for round-trip tests and loaders
that assemble split datasets from a data directory.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .rng import RngStream
from .tasks import Dataset, Split, split_dataset

IDX_UBYTE = 0x08
CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels
DATA_DIR_ENV = "LOREG_DATA_DIR"


class FormatError(ValueError):
    pass


def parse_idx(data: bytes, scale: bool = True) -> np.ndarray:
    """Decode an IDX buffer. uint8 payloads come back as float64, scaled to
    [0,1] unless scale=False (use that for label vectors)."""
    if len(data) < 4:
        raise FormatError("IDX header truncated")
    zero, dtype, ndim = data[0] << 8 | data[1], data[2], data[3]
    if zero != 0:
        raise FormatError(f"bad IDX magic prefix {data[:2].hex()}")
    if dtype != IDX_UBYTE:
        raise FormatError(f"unsupported IDX element type 0x{dtype:02x}")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise FormatError("IDX dimension header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    count = int(np.prod(dims)) if dims else 0
    payload = data[header_end:]
    if len(payload) != count:
        raise FormatError(f"IDX payload has {len(payload)} bytes, expected {count}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    if scale:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def write_idx(arr: np.ndarray) -> bytes:
    """Encode a uint8 array as IDX (big-endian dims)."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise FormatError("write_idx expects uint8 data")
    head = bytes([0, 0, IDX_UBYTE, arr.ndim])
    dims = struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(arr).tobytes()


def parse_cifar_binary(data: bytes, split_tag: Split | None = None) -> Dataset:
    """Decode CIFAR-10 binary batch records into images in [0,1]."""
    if len(data) == 0 or len(data) % CIFAR_RECORD != 0:
        raise FormatError(f"CIFAR buffer of {len(data)} bytes is not whole 3073-byte records")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max(initial=0) >= 10:
        raise FormatError(f"CIFAR label {labels.max()} out of range")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, split_tag, meta={"num_classes": 10})


def write_cifar_binary(images: np.ndarray, labels: np.ndarray) -> bytes:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or images.shape[1:] != (3, 32, 32):
        raise FormatError("write_cifar_binary expects uint8 images shaped (n, 3, 32, 32)")
    if labels.max(initial=0) >= 10:
        raise FormatError("CIFAR labels must be < 10")
    recs = np.concatenate(
        [labels.astype(np.uint8)[:, None], images.reshape(len(images), -1)], axis=1
    )
    return recs.tobytes()


IDX_FILES = {
    "mnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
              "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    "fmnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_dir(override: str | None = None) -> Path | None:
    path = override or os.environ.get(DATA_DIR_ENV)
    return Path(path) if path else None


def idx_dataset_available(name: str, root: Path | None) -> bool:
    if root is None:
        return False
    sub = root / name
    return all((sub / fn).exists() for fn in IDX_FILES.get(name, ()))


def load_idx_dataset(name: str, root: Path) -> tuple[Dataset, Dataset]:
    """Load a train/test IDX pair from <root>/<name>/."""
    sub = root / name
    files = IDX_FILES[name]
    try:
        tr_x = parse_idx((sub / files[0]).read_bytes())
        tr_y = parse_idx((sub / files[1]).read_bytes(), scale=False).astype(np.int64)
        te_x = parse_idx((sub / files[2]).read_bytes())
        te_y = parse_idx((sub / files[3]).read_bytes(), scale=False).astype(np.int64)
    except FileNotFoundError as exc:
        raise FileNotFoundError(
            f"dataset '{name}' expects {', '.join(files)} under {sub}"
        ) from exc
    for labels in (tr_y, te_y):
        if labels.size and (labels.min() < 0 or labels.max() >= 10):
            raise FormatError(f"dataset '{name}' labels outside [0, 10)")
    meta = {"num_classes": 10}
    return Dataset(tr_x, tr_y, meta=meta), Dataset(te_x, te_y, meta=meta)


def load_cifar_dataset(root: Path) -> tuple[Dataset, Dataset]:
    sub = root / "cifar-10-batches-bin"
    train_files = [sub / f"data_batch_{i}.bin" for i in range(1, 6)]
    test_file = sub / "test_batch.bin"
    for f in [*train_files, test_file]:
        if not f.exists():
            raise FileNotFoundError(f"dataset 'cifar10' expects {f}")
    parts = [parse_cifar_binary(f.read_bytes()) for f in train_files]
    train = Dataset(np.concatenate([p.inputs for p in parts]),
                    np.concatenate([p.labels for p in parts]), meta={"num_classes": 10})
    return train, parse_cifar_binary(test_file.read_bytes())
