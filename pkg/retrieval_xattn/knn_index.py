# retrieval_xattn/knn_index.py
#
# The single shared datastore: an exact, flat dot-product top-k index over
# encoder hidden states, one vector per input token. Ties are broken by the
# lowest row index everywhere.

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, RangeError, ShapeError, StateError, StorageError
from .model import ModelConfig

logger = logging.getLogger(__name__)

DUMP_MAGIC = b"ULDS"
_MAX_BYTES = 2**63 - 1


@dataclass
class Datastore:
    vectors: np.ndarray  # n x d_model
    positions: np.ndarray  # n
    frozen: bool = False

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @property
    def payload_bytes(self) -> int:
        """Measured size of the vector payload as allocated."""
        return int(self.vectors.nbytes)

    def storage_bytes(self, bytes_per_scalar: int = 2) -> int:
        return memory_bytes(self.n, self.d, bytes_per_scalar)

    def freeze(self) -> Datastore:
        self.vectors.setflags(write=False)
        self.positions.setflags(write=False)
        self.frozen = True
        return self


@dataclass(frozen=True)
class RetrievalResult:
    indices: np.ndarray  # row indices, descending score
    scores: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.size)


def build(payload) -> Datastore:
    """Freeze an encode_long payload (anything with .vectors and .positions) into a datastore."""
    vectors = np.asarray(payload.vectors)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ArgumentError("build: empty payload")
    positions = np.asarray(getattr(payload, "positions", np.arange(vectors.shape[0])), dtype=np.int64)
    if positions.shape != (vectors.shape[0],):
        raise ShapeError(f"build: {positions.shape[0]} positions for {vectors.shape[0]} vectors")
    order = np.argsort(positions, kind="stable")
    ds = Datastore(np.array(vectors[order], copy=True), np.array(positions[order], copy=True))
    return ds.freeze()


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    n = scores.size
    if k >= n:
        return np.lexsort((np.arange(n), -scores))
    thr = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > thr)
    ties = np.flatnonzero(scores == thr)[: k - above.size]
    sel = np.concatenate([above, ties])
    return sel[np.lexsort((sel, -scores[sel]))]


def top_k_of_scores(scores: np.ndarray, k: int) -> RetrievalResult:
    """Top-k over an explicit score vector, ties to the lowest index."""
    if k < 0:
        raise ArgumentError(f"k must be >= 0, got {k}")
    if k == 0:
        return RetrievalResult(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=scores.dtype))
    idx = _top_k(scores, k).astype(np.int64)
    return RetrievalResult(idx, scores[idx])


def _check_query(ds: Datastore, q: np.ndarray, k: int) -> None:
    if not ds.frozen:
        raise StateError("query on a datastore that is not frozen")
    if q.shape[-1] != ds.d:
        raise ShapeError(f"query of dimension {q.shape[-1]} against a datastore of dimension {ds.d}")
    if k < 0:
        raise ArgumentError(f"k must be >= 0, got {k}")


def query(ds: Datastore, q, k: int) -> RetrievalResult:
    """Exact top-k rows by dot(q, row), full scan."""
    q = np.asarray(q).reshape(-1)
    _check_query(ds, q, k)
    return top_k_of_scores(ds.vectors @ q.astype(ds.vectors.dtype, copy=False), k)


def query_batch(ds: Datastore, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise `query` for a T x d block; returns (T x k' indices, T x k' scores)."""
    queries = np.atleast_2d(queries)
    _check_query(ds, queries, k)
    kk = min(k, ds.n)
    scores = queries.astype(ds.vectors.dtype, copy=False) @ ds.vectors.T
    idx = np.empty((queries.shape[0], kk), dtype=np.int64)
    if kk:
        for t in range(queries.shape[0]):
            idx[t] = _top_k(scores[t], kk)
    return idx, np.take_along_axis(scores, idx, axis=1)


def memory_bytes(n: int, d: int, bytes_per_scalar: int) -> int:
    for name, value in (("n", n), ("d", d), ("bytes_per_scalar", bytes_per_scalar)):
        if int(value) < 1:
            raise ArgumentError(f"memory_bytes: {name} must be >= 1, got {value}")
    total = int(n) * int(d) * int(bytes_per_scalar)
    if total > _MAX_BYTES:
        raise RangeError(f"memory_bytes: {n} x {d} x {bytes_per_scalar} overflows 64-bit byte counts")
    return total


def index_memory_report(n: int, config: ModelConfig, bytes_per_scalar: int = 2) -> dict:
    """Single shared index vs. one key and one value index per (layer, head)."""
    single = memory_bytes(n, config.d_model, bytes_per_scalar)
    n_indexes = 2 * config.n_dec_layers * config.n_heads
    per_head = n_indexes * memory_bytes(n, config.d_head, bytes_per_scalar)
    return {
        "tokens": n,
        "single_index_bytes": single,
        "per_head_indexes": n_indexes,
        "per_head_index_bytes": per_head,
        "ratio": per_head / single,
    }


# ---------- dump files ----------

def dump_datastore(path: str, ds: Datastore) -> None:
    try:
        with open(path, "wb") as f:
            f.write(DUMP_MAGIC)
            f.write(struct.pack("<QQ", ds.n, ds.d))
            f.write(np.ascontiguousarray(ds.positions, dtype="<u8").tobytes())
            f.write(np.ascontiguousarray(ds.vectors, dtype="<f4").tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write datastore dump {path}: {exc}")


def load_datastore(path: str) -> Datastore:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise StorageError(f"cannot read datastore dump {path}: {exc}")
    if raw[:4] != DUMP_MAGIC or len(raw) < 20:
        raise StorageError(f"{path} is not a datastore dump")
    n, d = struct.unpack_from("<QQ", raw, 4)
    off = 20
    need = off + n * 8 + n * d * 4
    if len(raw) != need:
        raise StorageError(f"datastore dump {path} has {len(raw)} bytes, expected {need}")
    positions = np.frombuffer(raw, dtype="<u8", count=n, offset=off).astype(np.int64)
    vectors = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off + n * 8).astype(np.float32)
    return Datastore(vectors.reshape(n, d), positions).freeze()
