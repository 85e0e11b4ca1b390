"""Feature matrices, one-hot label matrices and the ``.caps`` binary cache format.

Layout of a cache file (all integers little-endian)::

    magic     4 bytes  b"CAPS"
    version   u16      1
    dtype     u8       0 (float32)
    rows      u64
    dim       u64
    normalized u8
    payload   rows * dim float32, row-major
    crc32     u32      IEEE CRC-32 of the payload bytes
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimMismatch,
    EmptyClassPromptSet,
    FormatError,
    NonContiguousClasses,
    OutOfRangeClass,
    ZeroNormRow,
)

MAGIC = b"CAPS"
VERSION = 1
DTYPE_FLOAT32 = 0
_HEADER = struct.Struct("<4sHBQQB")
_CRC = struct.Struct("<I")

NORM_TOL = 1e-5
ZERO_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Immutable ``rows x dim`` float32 matrix of embedding vectors.

    When ``normalized`` is set every row is checked to have unit norm.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimMismatch(f"expected a 2-D matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature matrix contains NaN or Inf")
        if self.normalized and arr.size:
            norms = np.linalg.norm(arr.astype(np.float64), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
            if bad.size:
                raise ValueError(f"row {int(bad[0])} is flagged normalized but has norm {norms[bad[0]]:.7f}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def equals(self, other: "FeatureMatrix") -> bool:
        """Bit-exact comparison including the normalized flag."""
        return (
            self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class OneHotLabels:
    """Support-sample-by-class indicator matrix with contiguous class blocks."""

    classes: np.ndarray
    n_classes: int
    data: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        classes = np.asarray(self.classes, dtype=np.int64).copy()
        classes.setflags(write=False)
        data = np.zeros((classes.size, self.n_classes), dtype=np.float64)
        data[np.arange(classes.size), classes] = 1.0
        data.setflags(write=False)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.classes.size

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.classes, minlength=self.n_classes)

    def class_starts(self) -> np.ndarray:
        """Row offset of each class block (length ``n_classes + 1``)."""
        return np.concatenate([[0], np.cumsum(self.class_counts())])


def as_array(m) -> np.ndarray:
    if isinstance(m, FeatureMatrix):
        return m.data
    return np.asarray(m)


def normalize_rows(m) -> FeatureMatrix:
    arr = as_array(m).astype(np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return FeatureMatrix(arr / norms[:, None], normalized=True)


def build_onehot(class_of_sample: Sequence[int], n_classes: int) -> OneHotLabels:
    classes = np.asarray(class_of_sample, dtype=np.int64).reshape(-1)
    if classes.size and (classes.min() < 0 or classes.max() >= n_classes):
        raise OutOfRangeClass(f"class indices must lie in [0, {n_classes})")
    if classes.size > 1 and np.any(np.diff(classes) < 0):
        i = int(np.flatnonzero(np.diff(classes) < 0)[0]) + 1
        raise NonContiguousClasses(f"class index decreases at sample {i}")
    return OneHotLabels(classes, n_classes)


def build_classifier(per_class_prompt_embeddings: Sequence, n_classes: int) -> FeatureMatrix:
    """Zero-shot classifier: one unit row per class from its prompt embeddings.

    Each row is the normalized mean of the normalized prompt embeddings of
    that class (prompt ensembling).
    """
    if len(per_class_prompt_embeddings) != n_classes:
        raise DimMismatch(f"expected {n_classes} prompt sets, got {len(per_class_prompt_embeddings)}")
    rows = []
    dim = None
    for k, emb in enumerate(per_class_prompt_embeddings):
        arr = as_array(emb)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.shape[0] == 0:
            raise EmptyClassPromptSet(k)
        if dim is None:
            dim = arr.shape[1]
        elif arr.shape[1] != dim:
            raise DimMismatch(f"class {k} embeddings have dim {arr.shape[1]}, expected {dim}")
        unit = normalize_rows(arr).data.astype(np.float64)
        rows.append(unit.mean(axis=0))
    return normalize_rows(np.stack(rows))


def save_cache(m: FeatureMatrix, path) -> None:
    """Write ``m`` atomically (temp file in the same directory, then rename)."""
    if not isinstance(m, FeatureMatrix):
        m = FeatureMatrix(m)
    path = Path(path)
    payload = m.data.astype("<f4", copy=False).tobytes(order="C")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, m.rows, m.dim, int(m.normalized))
    blob = header + payload + _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)
    _atomic_write(path, blob)


def load_cache(path) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + _CRC.size:
        raise FormatError(f"{path}: file too short")
    magic, version, dtype, rows, dim, normalized = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    n_bytes = rows * dim * 4
    if len(blob) != _HEADER.size + n_bytes + _CRC.size:
        raise FormatError(f"{path}: payload length does not match header")
    payload = blob[_HEADER.size:_HEADER.size + n_bytes]
    (crc,) = _CRC.unpack_from(blob, _HEADER.size + n_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError(f"{path}: CRC mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
    try:
        return FeatureMatrix(data, normalized=bool(normalized))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def meta_path(cache_path) -> Path:
    p = Path(cache_path)
    return p.with_name(p.name[: -len(p.suffix)] + ".meta.json" if p.suffix else p.name + ".meta.json")


def save_meta(cache_path, *, dataset: str, backbone: str, classes: Sequence[str],
              sample_classes: Sequence[int] | None = None, **extra) -> Path:
    """Write the ``.meta.json`` sidecar next to a cache file."""
    meta = {
        "dataset": dataset,
        "backbone": backbone,
        "classes": list(classes),
        "sample_classes": None if sample_classes is None else [int(c) for c in sample_classes],
    }
    meta.update(extra)
    path = meta_path(cache_path)
    write_json(path, meta)
    return path


def load_meta(cache_path) -> dict:
    return json.loads(meta_path(cache_path).read_text())


def write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    _atomic_write(Path(path), text.encode())


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
