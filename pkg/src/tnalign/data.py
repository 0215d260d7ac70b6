"""Dataset ingestion (IDX, CIFAR-10 binary) and synthetic generators.

Nothing here touches the network unless ``fetch`` is called explicitly.
The local cache lives in ``$TNALIGN_DATA_DIR`` (default ``~/.cache/tnalign``).
"""
from __future__ import annotations

import gzip
import hashlib
import io
import json
import os
import shutil
import struct
import tarfile
import tempfile
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    CifarFormatError,
    CifarLabelError,
    ConfigError,
    DataError,
    TrailingBytesError,
    TruncatedPayloadError,
)
from .nncore import Dataset

CACHE_ENV = "TNALIGN_DATA_DIR"
IDX_UBYTE = 0x08
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dims: tuple

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def payload_size(self):
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 0


def parse_idx_header(raw: bytes) -> IdxHeader:
    if len(raw) < 4:
        raise TruncatedPayloadError(f"IDX file too short for magic ({len(raw)} bytes)")
    (magic,) = struct.unpack_from(">I", raw)
    zero, dtype, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
    if zero != 0 or dtype != IDX_UBYTE or ndim == 0:
        raise BadMagicError(f"unsupported IDX magic 0x{magic:08x}")
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise TruncatedPayloadError(f"IDX header needs {need} bytes, got {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    return IdxHeader(magic, tuple(int(d) for d in dims))


def parse_idx(raw: bytes) -> np.ndarray:
    """Strict big-endian IDX parse of an unsigned-byte tensor."""
    raw = bytes(raw)
    header = parse_idx_header(raw)
    start = 4 + 4 * header.ndim
    have = len(raw) - start
    if have < header.payload_size:
        raise TruncatedPayloadError(
            f"truncated payload: expected {header.payload_size} bytes, got {have}"
        )
    if have > header.payload_size:
        raise TrailingBytesError(f"{have - header.payload_size} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=start).reshape(header.dims).copy()


def serialize_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ConfigError("only unsigned-byte IDX tensors are supported")
    if array.ndim == 0:
        raise ConfigError("IDX tensors need at least one dimension")
    magic = (IDX_UBYTE << 8) | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(path) -> np.ndarray:
    return parse_idx(_read_maybe_gzip(path))


def parse_cifar10_bin(raw: bytes) -> Dataset:
    """Records of one label byte and 3072 channel-major pixel bytes."""
    raw = bytes(raw)
    if len(raw) % CIFAR_RECORD:
        raise CifarFormatError(f"length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise CifarLabelError(f"label {int(labels.max())} out of range 0..9")
    return Dataset(recs[:, 1:].astype(np.float64), labels)


def gen_polynomial(kind: str = "poly2", n: int = 100, noise_std: float = 0.05,
                   seed: int = 0) -> Dataset:
    """y = 2x^2 - 1 on [-1, 1] or y = (x - 3)^3 on [2, 4], x on a uniform grid."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if kind == "poly2":
        x = np.linspace(-1.0, 1.0, n)
        y = 2.0 * x**2 - 1.0
    elif kind == "poly3":
        x = np.linspace(2.0, 4.0, n)
        y = (x - 3.0) ** 3
    else:
        raise ConfigError(f"unknown polynomial kind {kind!r}")
    if noise_std:
        y = y + np.random.default_rng(seed).normal(0.0, noise_std, size=n)
    return Dataset(x[:, None], y[:, None])


def gen_blobs(n_classes: int, n_per_class: int, dim: int, separation: float,
              seed: int = 0) -> Dataset:
    """Unit-variance Gaussian clusters around centers ``separation * N(0, I)``, shuffled."""
    if min(n_classes, n_per_class, dim) < 1 or separation < 0:
        raise ConfigError("gen_blobs needs positive sizes and non-negative separation")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, dim)) * separation
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[labels] + rng.normal(size=(labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order])


def normalize(dataset: Dataset, scheme: str, reference: Dataset | None = None) -> Dataset:
    """``unit_scale`` divides by 255; ``standardize`` uses mean/std of ``reference``
    (defaults to ``dataset``; pass the train split to normalize a test split).
    Zero-variance features are only centered."""
    if len(dataset) == 0:
        raise ConfigError("cannot normalize an empty dataset")
    if scheme == "unit_scale":
        return Dataset(dataset.inputs / 255.0, dataset.targets)
    if scheme == "standardize":
        ref = (dataset if reference is None else reference).inputs
        mean = ref.mean(axis=0)
        std = ref.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return Dataset((dataset.inputs - mean) / std, dataset.targets)
    raise ConfigError(f"unknown normalization scheme {scheme!r}")


# ---------------------------------------------------------------- cache


def cache_dir(path=None) -> Path:
    if path is None:
        path = os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "tnalign"
    return Path(path)


_IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _find(base: Path, stem: str) -> Path:
    for cand in (base / stem, base / (stem + ".gz")):
        if cand.exists():
            return cand
    raise DataError(f"{stem} not found in {base}; run `tnalign data fetch`")


def load_image_dataset(name: str, root=None, split: str = "train") -> Dataset:
    """MNIST-style IDX pair from the cache, flattened and scaled to [0, 1]."""
    base = cache_dir(root) / name
    images = load_idx(_find(base, _IDX_FILES[f"{split}_images"]))
    labels = load_idx(_find(base, _IDX_FILES[f"{split}_labels"]))
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{name}/{split}: {images.shape[0]} images but {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64)
    return normalize(Dataset(flat, labels.astype(np.int64)), "unit_scale")


def load_cifar10(root=None, split: str = "train") -> Dataset:
    base = cache_dir(root) / "cifar10"
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = [parse_cifar10_bin((base / n).read_bytes()) for n in names if (base / n).exists()]
    if not parts:
        raise DataError(f"no CIFAR-10 {split} batches in {base}")
    return normalize(Dataset(np.concatenate([p.inputs for p in parts]),
                             np.concatenate([p.targets for p in parts])), "unit_scale")


def is_cached(name: str, root=None) -> bool:
    base = cache_dir(root) / name
    return all(
        (base / s).exists() or (base / (s + ".gz")).exists() for s in _IDX_FILES.values()
    )


def load_manifest(path=None) -> dict:
    if path is None:
        text = resources.files("tnalign").joinpath("data_manifest.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _download(url: str, timeout: float = 120.0) -> bytes:
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def _fashion_json_to_idx(tar: tarfile.TarFile, member_fmt: str, n_train: int):
    """Per-class JSON image lists -> IDX files; the first ``n_train`` images of each
    class form the train split, the rest the test split."""
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(10):
        doc = json.load(tar.extractfile(member_fmt.format(c)))
        rows = [r for r in doc["data"] if len(r) == 28 * 28]  # the archive has a few empty rows
        imgs = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
        tr_x.append(imgs[:n_train])
        te_x.append(imgs[n_train:])
        tr_y.append(np.full(min(n_train, len(imgs)), c, np.uint8))
        te_y.append(np.full(max(0, len(imgs) - n_train), c, np.uint8))
    return {
        _IDX_FILES["train_images"]: serialize_idx(np.concatenate(tr_x)),
        _IDX_FILES["train_labels"]: serialize_idx(np.concatenate(tr_y)),
        _IDX_FILES["test_images"]: serialize_idx(np.concatenate(te_x)),
        _IDX_FILES["test_labels"]: serialize_idx(np.concatenate(te_y)),
    }


def fetch(name: str, root=None, manifest=None, downloader=_download) -> Path:
    """Download ``name`` per the manifest, verify every pinned SHA-256, then
    install into the cache. On any mismatch the cache is left untouched."""
    entries = load_manifest(manifest) if not isinstance(manifest, dict) else manifest
    if name not in entries:
        raise ConfigError(f"no manifest entry for dataset {name!r}")
    entry = entries[name]
    blob = downloader(entry["url"])
    got = _sha256(blob)
    if got != entry["sha256"]:
        raise ChecksumError(f"{name}: sha256 {got} != pinned {entry['sha256']}")

    kind = entry["format"]
    files = {}
    if kind == "idx":
        files[entry["filename"]] = blob
    elif kind == "npm_idx":
        with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
            for stem, member in entry["members"].items():
                files[stem] = tar.extractfile(member).read()
    elif kind == "npm_class_json":
        with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
            files = _fashion_json_to_idx(tar, entry["member_format"], entry["train_per_class"])
    else:
        raise ConfigError(f"unknown manifest format {kind!r}")

    for stem, pinned in entry.get("files", {}).items():
        got = _sha256(files[stem])
        if got != pinned:
            raise ChecksumError(f"{name}/{stem}: sha256 {got} != pinned {pinned}")

    dest = cache_dir(root) / name
    dest.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{name}-", dir=dest.parent))
    try:
        for stem, raw in files.items():
            (staging / stem).write_bytes(raw)
        if dest.exists():
            shutil.rmtree(dest)
        staging.rename(dest)
    finally:
        if staging.exists():
            shutil.rmtree(staging)
    return dest


def inspect_file(path) -> dict:
    """Header summary of an IDX (raw or gzip) or CIFAR-10 binary file."""
    raw = _read_maybe_gzip(path)
    if str(path).endswith(".bin"):
        ds = parse_cifar10_bin(raw)
        return {"format": "cifar10", "records": len(ds),
                "label_histogram": np.bincount(ds.targets, minlength=10).tolist()}
    header = parse_idx_header(raw)
    parse_idx(raw)
    return {"format": "idx", "magic": f"0x{header.magic:08x}", "dims": list(header.dims)}
