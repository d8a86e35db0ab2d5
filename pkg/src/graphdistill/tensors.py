"""Dense tensor containers, vector math primitives, and binary serialization.

Everything downstream (graphs, affinities, training, metrics) is built on the
two containers defined here: a channel-first embedding map and an integer
label mask. Values are stored in 32-bit precision on disk; numeric routines
accumulate in 64-bit.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np

# Below this norm a vector is treated as degenerate: cosine with it is 0,
# normalization maps it to the zero vector.
EPS_NORM = 1e-12

MAGIC = b"GRDT"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_U32 = 1


class DimensionError(ValueError):
    """Shape or length mismatch between tensors."""


class DomainError(ValueError):
    """Input outside an operation's domain (e.g. no labeled instances)."""


class ContractError(ValueError):
    """Structural mismatch between paired inputs (id sets, list lengths)."""


class FormatError(ValueError):
    """Malformed tensor file; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PixelIndex(NamedTuple):
    row: int
    col: int


class EmbeddingMap:
    """Dense D x H x W pixel-embedding tensor, channel slowest, row-major.

    Data may be float32 or float64 in memory; serialization is always f32.
    All values must be finite on construction.
    """

    def __init__(self, data: np.ndarray):
        data = np.asarray(data)
        if data.ndim != 3:
            raise DimensionError(f"embedding map must be rank 3, got rank {data.ndim}")
        if min(data.shape) < 1:
            raise DimensionError(f"embedding map dims must be >= 1, got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise DomainError("embedding map contains non-finite values")
        self.data = data

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def as64(self) -> np.ndarray:
        return self.data.astype(np.float64, copy=False)

    def pixel(self, p: PixelIndex | tuple[int, int]) -> np.ndarray:
        r, c = p
        return self.data[:, r, c]


class LabelMask:
    """H x W grid of non-negative instance ids; 0 is unlabeled/background."""

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise DimensionError(f"label mask must be rank 2, got rank {labels.ndim}")
        if min(labels.shape) < 1:
            raise DimensionError(f"label mask dims must be >= 1, got {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise DomainError("label mask must be integer-typed")
        if labels.min() < 0:
            raise DomainError("label mask ids must be non-negative")
        self.labels = labels.astype(np.uint32, copy=False)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def instance_ids(self) -> list[int]:
        """Distinct ids > 0, ascending."""
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i > 0]

    def pixels_of(self, instance_id: int) -> np.ndarray:
        """Boolean H x W membership mask for one instance id."""
        return self.labels == instance_id


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors, in [-1, 1].

    Returns exactly 0.0 if either norm is below EPS_NORM.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"vector shapes differ: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < EPS_NORM or nv < EPS_NORM:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def l2_normalize_map(emap: EmbeddingMap) -> EmbeddingMap:
    """Scale every pixel's channel vector to unit L2 norm.

    Pixels with norm below EPS_NORM map to the zero vector.
    """
    return EmbeddingMap(normalize_pixels(emap.as64()))


def normalize_pixels(data: np.ndarray) -> np.ndarray:
    """Array-level per-pixel L2 normalization of a (D, H, W) float array."""
    data = np.asarray(data, dtype=np.float64)
    norms = np.sqrt(np.sum(data * data, axis=0, keepdims=True))
    safe = np.where(norms < EPS_NORM, 1.0, norms)
    out = data / safe
    out[:, norms[0] < EPS_NORM] = 0.0
    return out


# ---------------------------------------------------------------------------
# Binary tensor format: magic "GRDT", version u8, dtype u8 (0=f32, 1=u32),
# rank u8, dims u32 LE, payload LE in declared layout.
# ---------------------------------------------------------------------------

_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U32: np.dtype("<u4")}


def pack_tensor(array: np.ndarray) -> bytes:
    """Encode one tensor record. Floats narrow to f32, integers to u32."""
    array = np.asarray(array)
    if array.ndim < 1 or array.ndim > 4:
        raise DimensionError(f"serializable tensors are rank 1..4, got {array.ndim}")
    if np.issubdtype(array.dtype, np.floating):
        code, payload = DTYPE_F32, array.astype("<f4")
    elif np.issubdtype(array.dtype, np.integer):
        if array.size and array.min() < 0:
            raise DomainError("u32 tensor payload must be non-negative")
        code, payload = DTYPE_U32, array.astype("<u4")
    else:
        raise DomainError(f"unsupported tensor dtype {array.dtype}")
    header = MAGIC + struct.pack("<BBB", FORMAT_VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + dims + payload.tobytes(order="C")


def unpack_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record from buf at offset; returns (array, next offset)."""
    if len(buf) < offset + 7:
        raise FormatError("truncated header", offset)
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad magic {buf[offset:offset + 4]!r}", offset)
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset + 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 5)
    if rank < 1 or rank > 4:
        raise FormatError(f"rank {rank} out of range 1..4", offset + 6)
    pos = offset + 7
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated dims", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = count * 4
    if len(buf) < pos + nbytes:
        raise FormatError("truncated payload", pos)
    flat = np.frombuffer(buf, dtype=_DTYPES[code], count=count, offset=pos)
    return flat.reshape(dims).copy(), pos + nbytes


def serialize_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(pack_tensor(array))


def deserialize_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    array, end = unpack_tensor(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return array


def save_embedding_map(path, emap: EmbeddingMap) -> None:
    serialize_tensor(path, emap.data.astype(np.float32, copy=False))


def load_embedding_map(path) -> EmbeddingMap:
    array = deserialize_tensor(path)
    if array.ndim != 3 or array.dtype != np.float32:
        raise FormatError("expected rank-3 f32 record for an embedding map", 0)
    return EmbeddingMap(array)


def save_label_mask(path, mask: LabelMask) -> None:
    serialize_tensor(path, mask.labels)


def load_label_mask(path) -> LabelMask:
    array = deserialize_tensor(path)
    if array.ndim != 2 or array.dtype != np.uint32:
        raise FormatError("expected rank-2 u32 record for a label mask", 0)
    return LabelMask(array)
