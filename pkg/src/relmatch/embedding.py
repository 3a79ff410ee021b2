"""Entity serialization, embedding providers and the exact nearest-neighbor index.

The index is the blocking step: for a probe vector it returns target entities
in ascending Euclidean distance, ties broken by ascending entity id, one page
of ``k`` candidates at a time.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from relmatch.errors import (
    CorruptIndex,
    DimensionMismatch,
    DuplicateId,
    EmptyInput,
    IoFailure,
    ProviderUnavailable,
)
from relmatch.model import EntityRecord

logger = logging.getLogger(__name__)

API_KEY_ENV = "RELMATCH_API_KEY"
INDEX_MAGIC = b"RELMIDX1"


def serialize_entity(record: EntityRecord, schema: Sequence[str]) -> str:
    """Render ``record`` as ``"name1: value1; name2: value2"`` in schema order."""
    return "; ".join(f"{name}: {record.get(name, '')}" for name in schema)


# -- providers ---------------------------------------------------------------


class EmbeddingProvider(Protocol):
    id: str
    dimension: int

    def embed_text(self, text: str) -> np.ndarray: ...


class LocalHashProvider:
    """Network-free provider: SHA-256 of (seed, text) expanded to coordinates in [-1, 1).

    Coordinates are multiples of 2**-15, so they are exact in float32 and
    distance arithmetic on them is exact in float64.
    """

    def __init__(self, dimension: int = 16, seed: int = 0) -> None:
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.seed = seed
        self.id = f"local-hash:d{dimension}:s{seed}"
        self.calls = 0

    def embed_text(self, text: str) -> np.ndarray:
        self.calls += 1
        need = 2 * self.dimension
        stream = b""
        counter = 0
        while len(stream) < need:
            h = hashlib.sha256()
            h.update(self.seed.to_bytes(8, "little", signed=True))
            h.update(counter.to_bytes(4, "little"))
            h.update(text.encode("utf-8"))
            stream += h.digest()
            counter += 1
        raw = np.frombuffer(stream[:need], dtype="<u2").astype(np.float64)
        return (raw - 32768.0) / 32768.0


class RemoteEmbeddingProvider:
    """Embedding endpoint speaking the common ``{"model", "input"} -> data[0].embedding`` shape."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        dimension: int,
        api_key: str | None = None,
        client=None,
        timeout: float = 30.0,
    ) -> None:
        import httpx

        self.endpoint = endpoint
        self.model = model
        self.dimension = dimension
        self.id = f"remote:{model}:d{dimension}"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._client = client or httpx.Client(timeout=timeout)
        self.calls = 0

    def embed_text(self, text: str) -> np.ndarray:
        import httpx

        self.calls += 1
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._client.post(
                self.endpoint, json={"model": self.model, "input": text}, headers=headers
            )
            resp.raise_for_status()
            values = resp.json()["data"][0]["embedding"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise ProviderUnavailable(f"embedding request failed: {exc}") from exc
        return np.asarray(values, dtype=np.float64)


class CachedProvider:
    """Wraps a provider with an on-disk cache keyed by (provider id, text hash)."""

    def __init__(self, inner: EmbeddingProvider, cache_dir: str | Path) -> None:
        self.inner = inner
        self.id = inner.id
        self.dimension = inner.dimension
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, text: str) -> Path:
        key = hashlib.sha256(f"{self.id}\0{text}".encode("utf-8")).hexdigest()
        return self.cache_dir / f"emb-{key}.json"

    def embed_text(self, text: str) -> np.ndarray:
        path = self._path(text)
        if path.exists():
            return np.asarray(json.loads(path.read_text()), dtype=np.float64)
        vector = self.inner.embed_text(text)
        with self._lock:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps([float(v) for v in vector]))
            os.replace(tmp, path)
        return vector


def embed(text: str, provider: EmbeddingProvider) -> np.ndarray:
    """Embed ``text``, checking length and finiteness of the result."""
    if not text:
        raise ValueError("cannot embed empty text")
    vector = np.asarray(provider.embed_text(text), dtype=np.float64)
    if vector.ndim != 1 or vector.shape[0] != provider.dimension:
        raise DimensionMismatch(
            f"provider {provider.id} returned {vector.shape} for dimension {provider.dimension}"
        )
    if not np.all(np.isfinite(vector)):
        raise ValueError(f"provider {provider.id} returned non-finite values")
    return vector


# -- index -------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateBatch:
    batch_index: int
    candidates: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [entity_id for entity_id, _ in self.candidates]

    def __len__(self) -> int:
        return len(self.candidates)


class VectorIndex:
    """Immutable exact Euclidean index. Vectors are stored as float32."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray) -> None:
        self._ids = tuple(ids)
        matrix = np.array(vectors, dtype=np.float32, copy=True)
        matrix.setflags(write=False)
        self._vectors = matrix
        self._wide = matrix.astype(np.float64)
        self._wide.setflags(write=False)
        # position of each entry in ascending-id order, the distance tie-break
        order = sorted(range(len(self._ids)), key=self._ids.__getitem__)
        rank = np.empty(len(self._ids), dtype=np.int64)
        rank[order] = np.arange(len(self._ids))
        self._id_rank = rank

    @property
    def dimension(self) -> int:
        return int(self._vectors.shape[1])

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    def __len__(self) -> int:
        return len(self._ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VectorIndex):
            return NotImplemented
        return self._ids == other._ids and np.array_equal(self._vectors, other._vectors)

    def vector(self, entity_id: str) -> np.ndarray:
        return self._vectors[self._ids.index(entity_id)]

    def ranking(self, probe: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Full ordering of entries: (positions, euclidean distances), nearest first."""
        probe = np.asarray(probe, dtype=np.float64)
        if probe.shape != (self.dimension,):
            raise DimensionMismatch(
                f"probe has shape {probe.shape}, index dimension is {self.dimension}"
            )
        diff = self._wide - probe
        squared = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((self._id_rank, squared))
        return order, np.sqrt(squared[order])


def build_index(pairs: Iterable[tuple[str, Sequence[float]]]) -> VectorIndex:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("cannot build an index from no entries")
    dimension = len(pairs[0][1])
    if dimension < 1:
        raise DimensionMismatch("vectors must have positive dimension")
    seen: set[str] = set()
    for entity_id, vector in pairs:
        if entity_id in seen:
            raise DuplicateId(f"duplicate entity id {entity_id!r}")
        seen.add(entity_id)
        if len(vector) != dimension:
            raise DimensionMismatch(
                f"entity {entity_id!r} has dimension {len(vector)}, expected {dimension}"
            )
    matrix = np.asarray([np.asarray(v, dtype=np.float64) for _, v in pairs])
    if not np.all(np.isfinite(matrix)):
        raise ValueError("index vectors must be finite")
    return VectorIndex([entity_id for entity_id, _ in pairs], matrix)


def query_topk(index: VectorIndex, probe: Sequence[float], k: int, offset: int = 0) -> CandidateBatch:
    """Entries ranked ``[offset, offset + k)`` by distance to ``probe``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if offset < 0:
        raise ValueError("offset must be non-negative")
    order, distances = index.ranking(np.asarray(probe))
    window = slice(offset, offset + k)
    ids = index.ids
    candidates = tuple(
        (ids[pos], float(dist)) for pos, dist in zip(order[window], distances[window])
    )
    return CandidateBatch(offset // k, candidates)


def euclidean(a: Sequence[float], b: Sequence[float]) -> float:
    return math.dist(a, b)


# -- persistence -------------------------------------------------------------


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Write the binary index format, atomically."""
    parts = [INDEX_MAGIC, struct.pack("<II", index.dimension, len(index))]
    body = index.vectors.astype("<f4", copy=False)
    for entity_id, row in zip(index.ids, body):
        encoded = entity_id.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise IoFailure(f"entity id too long to store: {entity_id[:40]!r}...")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(row.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(b"".join(parts))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write index to {path}: {exc}") from exc


def load_index(path: str | Path) -> VectorIndex:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read index {path}: {exc}") from exc
    if data[:8] != INDEX_MAGIC:
        raise CorruptIndex(f"{path}: bad magic")
    if len(data) < 16:
        raise CorruptIndex(f"{path}: truncated header")
    dimension, count = struct.unpack_from("<II", data, 8)
    if dimension < 1 or count < 1:
        raise CorruptIndex(f"{path}: empty index header")
    pos = 16
    row_bytes = 4 * dimension
    ids: list[str] = []
    rows: list[np.ndarray] = []
    for _ in range(count):
        if pos + 2 > len(data):
            raise CorruptIndex(f"{path}: truncated entry")
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + id_len + row_bytes > len(data):
            raise CorruptIndex(f"{path}: truncated entry")
        try:
            ids.append(data[pos : pos + id_len].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorruptIndex(f"{path}: invalid id bytes") from exc
        pos += id_len
        rows.append(np.frombuffer(data, dtype="<f4", count=dimension, offset=pos))
        pos += row_bytes
    if pos != len(data):
        raise CorruptIndex(f"{path}: {len(data) - pos} trailing bytes")
    if len(set(ids)) != len(ids):
        raise CorruptIndex(f"{path}: duplicate ids")
    return VectorIndex(ids, np.vstack(rows).astype(np.float32))
