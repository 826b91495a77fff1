"""Dense float64 tensors with deterministic randomness and file I/O.

Tensors are plain C-contiguous float64 numpy arrays. All randomness flows
through numpy's Philox bit generator (a named, splittable, 64-bit
counter-based PRNG), keyed by explicit seeds so that every pipeline stage
reproduces bit-identical values on re-run.

The on-disk format is a flat binary container (little-endian: u32 rank,
u64 extents, f64 payload) plus a JSON sidecar carrying the shape and a
SHA-256 checksum of the binary file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError, ValidationError

# Alias for annotations; every Tensor in this package is float64, row-major.
Tensor = np.ndarray


def stable_hash64(label: str) -> int:
    """Map a string label to a stable 64-bit integer (blake2b, not Python hash)."""
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


def make_rng(seed: int, label: str | None = None) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an optional stream label."""
    entropy = [int(seed)] if label is None else [int(seed), stable_hash64(label)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, label: str) -> int:
    """Deterministic child seed for a named substream."""
    return stable_hash64(f"{seed}:{label}")


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one extent")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def full(shape: Sequence[int], value: float) -> Tensor:
    """Tensor of the given shape with every element equal to ``value``."""
    return np.full(_check_shape(shape), float(value), dtype=np.float64)


def random_normal(shape: Sequence[int], mean: float, stddev: float, seed: int) -> Tensor:
    """Deterministic Gaussian samples; the same seed reproduces identical bits."""
    if stddev < 0:
        raise ParameterError(f"stddev must be >= 0, got {stddev}")
    rng = make_rng(seed)
    return rng.normal(loc=mean, scale=stddev, size=_check_shape(shape)).astype(np.float64)


def reduce_min_max(t: Tensor, axis: int | None = None):
    """Global (min, max), or per-slice (mins, maxs) arrays along ``axis``."""
    t = np.asarray(t, dtype=np.float64)
    if axis is None:
        return float(t.min()), float(t.max())
    if not -t.ndim <= axis < t.ndim:
        raise ParameterError(f"axis {axis} out of range for rank-{t.ndim} tensor")
    reduce_axes = tuple(i for i in range(t.ndim) if i != axis % t.ndim)
    return t.min(axis=reduce_axes), t.max(axis=reduce_axes)


def l2_norm_sq(t: Tensor) -> float:
    """Sum of squared elements."""
    t = np.asarray(t, dtype=np.float64)
    return float(np.dot(t.ravel(), t.ravel()))


def mse(a: Tensor, b: Tensor) -> float:
    """Mean squared elementwise difference; shapes must match."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = (a - b).ravel()
    return float(np.dot(d, d) / d.size)


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_tensor(t: Tensor, base_path: Path | str) -> tuple[Path, Path]:
    """Write ``<base>.bin`` and its ``<base>.json`` sidecar; returns both paths."""
    t = np.ascontiguousarray(t, dtype=np.float64)
    base = Path(base_path)
    bin_path = base.parent / (base.name + ".bin")
    json_path = base.parent / (base.name + ".json")
    with open(bin_path, "wb") as f:
        f.write(struct.pack("<I", t.ndim))
        f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        f.write(t.tobytes(order="C"))
    sidecar = {"shape": list(t.shape), "dtype": "float64", "checksum": "sha256:" + sha256_file(bin_path)}
    with open(json_path, "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=2)
        f.write("\n")
    return bin_path, json_path


def load_tensor(base_path: Path | str) -> Tensor:
    """Read a tensor written by :func:`save_tensor`, verifying the checksum."""
    base = Path(base_path)
    bin_path = base.parent / (base.name + ".bin")
    json_path = base.parent / (base.name + ".json")
    with open(json_path) as f:
        sidecar = json.load(f)
    digest = "sha256:" + sha256_file(bin_path)
    if digest != sidecar.get("checksum"):
        raise ValidationError(f"checksum mismatch for {bin_path}")
    with open(bin_path, "rb") as f:
        (rank,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        data = np.frombuffer(f.read(), dtype="<f8")
    if list(shape) != list(sidecar.get("shape", [])):
        raise ValidationError(f"sidecar shape disagrees with header for {bin_path}")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValidationError(f"payload holds {data.size} values, header implies {expected}")
    return data.reshape(shape).copy()
