"""Gradient masks (0 = frozen, 1 = trainable) and pruning at initialization."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .nncore import LayeredNetwork, NetworkSpec

_SIDECAR_MAGIC = b"TNAMASK1"
# magic, architecture sha256 (raw 32 bytes), ratio, seed, length
_SIDECAR_HEADER = struct.Struct(">8s32sdQQ")


def _zero_count(ratio: float, n: int) -> int:
    # tolerance keeps e.g. 0.29 * 100 from flooring to 28
    return min(n, math.floor(ratio * n + 1e-9))


def _check_ratio(ratio):
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")


@dataclass(frozen=True)
class GradientMask:
    bits: np.ndarray
    ratio: float
    seed: int
    granularity: str = "per_layer_exact"

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return self.bits.shape[0]

    @property
    def observed_ratio(self) -> float:
        return 1.0 - float(self.bits.mean()) if len(self) else 0.0

    def __eq__(self, other):
        return isinstance(other, GradientMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None


def sample_mask(spec: NetworkSpec, ratio: float, seed: int) -> GradientMask:
    """Exactly ``floor(ratio * n_l)`` zeros in each layer (weights and bias together)."""
    _check_ratio(ratio)
    rng = np.random.default_rng(seed)
    bits = np.ones(spec.num_params, dtype=bool)
    for ws, bs in spec.layer_slices():
        start, stop = ws.start, bs.stop
        n = stop - start
        k = _zero_count(ratio, n)
        zeros = rng.permutation(n)[:k]
        bits[start + zeros] = False
    return GradientMask(bits, float(ratio), int(seed))


def reverse_mask(m: GradientMask) -> GradientMask:
    bits = ~m.bits
    ratio = 1.0 - float(bits.mean()) if bits.size else 0.0
    return GradientMask(bits, ratio, m.seed, m.granularity)


def apply_mask(vector: np.ndarray, m) -> np.ndarray:
    bits = np.asarray(getattr(m, "bits", m))
    vector = np.asarray(vector)
    if vector.shape != bits.shape:
        raise DimensionError(f"vector length {vector.shape} != mask length {bits.shape}")
    return vector * bits


def prune_at_init(net: LayeredNetwork, ratio: float, seed: int):
    """Zero ``floor(ratio * n_w)`` weights per layer (biases untouched).

    Returns a pruned copy and the keep-mask; training the copy under that
    mask keeps pruned weights at exactly zero.
    """
    _check_ratio(ratio)
    rng = np.random.default_rng(seed)
    pruned = net.copy()
    bits = np.ones(net.spec.num_params, dtype=bool)
    for ws, _ in net.spec.layer_slices():
        n = ws.stop - ws.start
        k = _zero_count(ratio, n)
        idx = ws.start + rng.permutation(n)[:k]
        bits[idx] = False
        pruned.params[idx] = 0.0
    return pruned, GradientMask(bits, float(ratio), int(seed))


def layer_zero_counts(spec: NetworkSpec, m: GradientMask):
    """Number of zeros per layer, handy for checking the exact-count property."""
    return [int(np.count_nonzero(~m.bits[ws.start:bs.stop])) for ws, bs in spec.layer_slices()]


def save_mask(path, m: GradientMask, spec: NetworkSpec) -> None:
    """Binary sidecar: fixed big-endian header then bit-packed payload."""
    if len(m) != spec.num_params:
        raise DimensionError("mask length does not match spec")
    header = _SIDECAR_HEADER.pack(
        _SIDECAR_MAGIC,
        bytes.fromhex(spec.architecture_hash()),
        float(m.ratio),
        int(m.seed) & (2**64 - 1),
        len(m),
    )
    Path(path).write_bytes(header + np.packbits(m.bits).tobytes())


def load_mask(path, spec: NetworkSpec | None = None) -> GradientMask:
    raw = Path(path).read_bytes()
    if len(raw) < _SIDECAR_HEADER.size:
        raise DataError("mask sidecar shorter than its header")
    magic, arch, ratio, seed, length = _SIDECAR_HEADER.unpack_from(raw)
    if magic != _SIDECAR_MAGIC:
        raise DataError(f"not a mask sidecar (magic {magic!r})")
    payload = np.frombuffer(raw, dtype=np.uint8, offset=_SIDECAR_HEADER.size)
    if payload.size != (length + 7) // 8:
        raise DataError("mask sidecar payload length does not match header")
    if spec is not None:
        if arch.hex() != spec.architecture_hash():
            raise DataError("mask sidecar was written for a different architecture")
        if length != spec.num_params:
            raise DataError("mask sidecar length does not match spec")
    bits = np.unpackbits(payload, count=length).astype(bool)
    return GradientMask(bits, ratio, seed)
