"""
Per-modality face embeddings and the EMB1 container.

EMB1 (little-endian): "EMB1" | u32 version | u32 count | u32 dim |
u8 tag length | tag bytes | count x u32 labels | count x dim f32 vectors.
"""

import logging
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmbeddingFormatError

EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class Embedding:
    modality: str
    vector: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float64)
        if vector.ndim != 1 or not np.all(np.isfinite(vector)):
            raise ValueError(f"{self.modality} embedding must be a finite 1-D vector")
        if not np.any(vector):
            raise ValueError(f"{self.modality} embedding has zero norm")
        object.__setattr__(self, "vector", vector)


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """N labelled embeddings of one modality, row-aligned."""

    modality: str
    vectors: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if vectors.ndim != 2 or labels.shape != (vectors.shape[0],):
            raise ValueError(
                f"{self.modality}: vectors {vectors.shape} and labels {labels.shape} are not row-aligned"
            )
        if not np.all(np.isfinite(vectors)):
            raise ValueError(f"{self.modality}: embeddings contain non-finite values")
        if vectors.shape[0] and np.any(np.linalg.norm(vectors, axis=1) == 0):
            raise ValueError(f"{self.modality}: embeddings with zero norm")
        if np.any(labels < 0):
            raise ValueError(f"{self.modality}: labels must be non-negative identity indices")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __getitem__(self, index: int) -> Embedding:
        return Embedding(self.modality, self.vectors[index], int(self.labels[index]))

    def subset(self, indices) -> "EmbeddingSet":
        return EmbeddingSet(self.modality, self.vectors[indices], self.labels[indices])


def unit_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalise a zero-norm embedding")
    return vectors / norms


def write_embeddings(embeddings: EmbeddingSet, path: str | os.PathLike) -> None:
    tag = embeddings.modality.encode("utf-8")
    if len(tag) > 255:
        raise ValueError(f"modality tag longer than 255 bytes: {embeddings.modality!r}")
    dim = embeddings.vectors.shape[1] if embeddings.vectors.ndim == 2 else 0
    payload = b"".join([
        _HEADER.pack(EMB1_MAGIC, EMB1_VERSION, len(embeddings), dim),
        struct.pack("<B", len(tag)),
        tag,
        embeddings.labels.astype("<u4").tobytes(),
        embeddings.vectors.astype("<f4").tobytes(),
    ])
    with open(path, "wb") as f:
        f.write(payload)
    logging.info(f"Wrote {len(embeddings)} {embeddings.modality} embeddings to {path}")


def read_embeddings(path: str | os.PathLike) -> EmbeddingSet:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size + 1:
        raise EmbeddingFormatError(f"{path}: too short for an EMB1 header")
    magic, version, count, dim = _HEADER.unpack_from(data, 0)
    if magic != EMB1_MAGIC or version != EMB1_VERSION:
        raise EmbeddingFormatError(f"{path}: not an EMB1 v{EMB1_VERSION} file")
    tag_len = data[_HEADER.size]
    offset = _HEADER.size + 1
    tag = data[offset:offset + tag_len].decode("utf-8", errors="replace")
    offset += tag_len
    expected = offset + 4 * count + 4 * count * dim
    if len(data) != expected:
        raise EmbeddingFormatError(f"{path}: {len(data)} bytes, header implies {expected}")
    labels = np.frombuffer(data, dtype="<u4", count=count, offset=offset)
    vectors = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset + 4 * count)
    try:
        return EmbeddingSet(tag, vectors.reshape(count, dim).astype(np.float64), labels.astype(np.int64))
    except ValueError as e:
        raise EmbeddingFormatError(f"{path}: {e}") from e
