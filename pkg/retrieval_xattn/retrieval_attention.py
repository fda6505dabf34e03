# retrieval_xattn/retrieval_attention.py
#
# Cross-attention over a shared kNN datastore. A decoder state h_d is pushed
# through its head's (W_q, b_q) and then W_k^T, so a single index over the
# raw encoder states h_e serves every (layer, head):
#
#     (h_d W_q + b_q) . (h_e W_k + b_k) = ((h_d W_q + b_q) W_k^T) . h_e + const
#
# The constant (the b_k term) is the same for every key of a query and is
# dropped from retrieval scoring; attention over the retrieved rows keeps it.

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ShapeError, StateError, StorageError
from .knn_index import Datastore, RetrievalResult, query, query_batch
from .model import HeadGradients, HeadProjection, ModelConfig
from .numerics import Rng, softmax, softmax_backward, softmax_rows

logger = logging.getLogger(__name__)

MODES = ("full", "retrieval", "naive_per_head_index", "random_encoded")
RETRIEVING_MODES = ("retrieval", "naive_per_head_index")


# --------------------------------------------------------------------------------------
# Single-query operations
# --------------------------------------------------------------------------------------

def project_query(h_d, hp: HeadProjection) -> np.ndarray:
    """(h_d W_q + b_q) W_k^T: a d_model query against raw encoder states."""
    h_d = np.asarray(h_d)
    if h_d.shape[-1] != hp.wq.shape[0]:
        raise ShapeError(f"project_query: h_d of dimension {h_d.shape[-1]} for W_q of shape {hp.wq.shape}")
    return (h_d @ hp.wq + hp.bq) @ hp.wk.T


def key_bias_offset(h_d, hp: HeadProjection) -> float:
    """dot(h_d W_q + b_q, b_k): the per-query constant retrieval scoring leaves out."""
    return float((np.asarray(h_d) @ hp.wq + hp.bq) @ hp.bk)


def attend_retrieved(h_d, rows: np.ndarray, hp: HeadProjection) -> np.ndarray:
    """Softmax attention of one decoder state over the given encoder rows."""
    rows = np.atleast_2d(rows)
    if rows.shape[0] == 0:
        raise ArgumentError("attend_retrieved: no rows to attend to")
    h_d = np.asarray(h_d).reshape(1, -1)
    ctx, _ = _attend_rows(h_d, rows[None, :, :], hp)
    return ctx[0]


def full_attention_oracle(h_d, all_h_e: np.ndarray, hp: HeadProjection) -> np.ndarray:
    """Exact attention over every encoder state; reference for the equivalence checks."""
    all_h_e = np.atleast_2d(all_h_e)
    if all_h_e.shape[0] == 0:
        raise ArgumentError("full_attention_oracle: no encoder states")
    q = np.asarray(h_d).reshape(-1) @ hp.wq + hp.bq
    keys = all_h_e @ hp.wk + hp.bk
    values = all_h_e @ hp.wv + hp.bv
    weights = softmax((keys @ q) / math.sqrt(hp.d_head))
    return weights @ values


def build_per_head_key_index(memory: np.ndarray, hp: HeadProjection) -> Datastore:
    """Keys h_e W_k + b_k of one head, indexed on their own (the 2 x L x H layout's key half)."""
    keys = np.asarray(memory) @ hp.wk + hp.bk
    return Datastore(np.ascontiguousarray(keys), np.arange(keys.shape[0], dtype=np.int64)).freeze()


def naive_per_head_topk(h_d, hp: HeadProjection, per_head_key_index: Datastore, k: int) -> RetrievalResult:
    q = np.asarray(h_d).reshape(-1) @ hp.wq + hp.bq
    return query(per_head_key_index, q, k)


def attention_mass_coverage(h_d, hp: HeadProjection, ds: Datastore, k: int) -> float:
    """Share of the full softmax mass that lands on the k retrieved rows."""
    if k < 0:
        raise ArgumentError(f"k must be >= 0, got {k}")
    result = query(ds, project_query(h_d, hp), k)
    q = np.asarray(h_d).reshape(-1) @ hp.wq + hp.bq
    probs = softmax((ds.vectors @ hp.wk + hp.bk) @ q / math.sqrt(hp.d_head))
    return float(min(1.0, np.sum(probs[result.indices], dtype=np.float64)))


def attention_mass_coverage_rows(h_d: np.ndarray, hp: HeadProjection, ds: Datastore, k: int) -> np.ndarray:
    """attention_mass_coverage for each row of a T x d_model batch of decoder states."""
    if k < 0:
        raise ArgumentError(f"k must be >= 0, got {k}")
    h_d = np.atleast_2d(h_d)
    k = min(k, ds.n)
    if k == 0:
        return np.zeros(h_d.shape[0])
    # the b_k term shifts every logit of a query equally, so the softmax ignores it
    probs = softmax_rows(project_query(h_d, hp) @ ds.vectors.T / math.sqrt(hp.d_head))
    top = -np.partition(-probs, k - 1, axis=1)[:, :k]
    return np.minimum(1.0, top.sum(axis=1, dtype=np.float64))


@dataclass(frozen=True)
class AttentionDiagnostics:
    coverage: float
    positions: np.ndarray  # retrieved rows normalized by datastore size, in [0, 1)


def attention_diagnostics(h_d, hp: HeadProjection, ds: Datastore, k: int) -> AttentionDiagnostics:
    result = query(ds, project_query(h_d, hp), k)
    return AttentionDiagnostics(
        coverage=attention_mass_coverage(h_d, hp, ds, k),
        positions=ds.positions[result.indices] / ds.n,
    )


# --------------------------------------------------------------------------------------
# Batched kernel: T queries, each with its own k selected rows
# --------------------------------------------------------------------------------------

def _attend_rows(h_d: np.ndarray, rows: np.ndarray, hp: HeadProjection):
    """h_d: T x D, rows: T x k x D -> (T x d_head contexts, cache)."""
    scale = 1.0 / math.sqrt(hp.d_head)
    q = h_d @ hp.wq + hp.bq
    keys = rows @ hp.wk + hp.bk
    values = rows @ hp.wv + hp.bv
    p = softmax_rows(np.einsum("td,tkd->tk", q, keys) * scale)
    ctx = np.einsum("tk,tkd->td", p, values)
    return ctx, (h_d, rows, q, keys, values, p, scale)


def _attend_rows_backward(hp: HeadProjection, cache, d_ctx: np.ndarray):
    h_d, rows, q, keys, values, p, scale = cache
    dp = np.einsum("td,tkd->tk", d_ctx, values)
    d_values = p[:, :, None] * d_ctx[:, None, :]
    ds = softmax_backward(p, dp) * scale
    dq = np.einsum("tk,tkd->td", ds, keys)
    d_keys = ds[:, :, None] * q[:, None, :]
    d_rows = d_keys @ hp.wk.T + d_values @ hp.wv.T
    return HeadGradients(
        wq=h_d.T @ dq,
        bq=dq.sum(axis=0),
        wk=np.einsum("tke,tkd->ed", rows, d_keys),
        bk=d_keys.sum(axis=(0, 1)),
        wv=np.einsum("tke,tkd->ed", rows, d_values),
        bv=d_values.sum(axis=(0, 1)),
        h_d=dq @ hp.wq.T,
    ), d_rows


# --------------------------------------------------------------------------------------
# Retrieval log
# --------------------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalRecord:
    step: int
    layer: int
    head: int
    indices: np.ndarray
    scores: np.ndarray


@dataclass(frozen=True)
class CoverageRecord:
    step: int
    layer: int
    head: int
    coverage: float


@dataclass
class RetrievalLog:
    n_rows: int
    records: list[RetrievalRecord] = field(default_factory=list)

    def append(self, record: RetrievalRecord) -> None:
        self.records.append(record)

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[RetrievalRecord]:
        return iter(self.records)

    def positions(self) -> np.ndarray:
        if not self.records:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([r.indices for r in self.records])

    def export_lines(self) -> Iterable[str]:
        for r in self.records:
            for rank, (pos, score) in enumerate(zip(r.indices, r.scores)):
                yield f"{r.step},{r.layer},{r.head},{rank},{int(pos)},{float(score):.9g}"


def write_retrieval_log(path: str, log: RetrievalLog) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            for line in log.export_lines():
                f.write(line + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write retrieval log {path}: {exc}")


def read_retrieval_log(path: str, n_rows: int) -> RetrievalLog:
    grouped: dict[tuple[int, int, int], list[tuple[int, int, float]]] = {}
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 6:
                    raise StorageError(f"{path} line {lineno}: expected 6 fields, got {len(parts)}")
                try:
                    step, layer, head, rank, pos = (int(x) for x in parts[:5])
                    score = float(parts[5])
                except ValueError:
                    raise StorageError(f"{path} line {lineno}: malformed record {line!r}")
                grouped.setdefault((step, layer, head), []).append((rank, pos, score))
    except OSError as exc:
        raise StorageError(f"cannot read retrieval log {path}: {exc}")

    log = RetrievalLog(n_rows)
    for (step, layer, head), items in grouped.items():
        items.sort()
        log.append(RetrievalRecord(
            step, layer, head,
            np.array([i[1] for i in items], dtype=np.int64),
            np.array([i[2] for i in items], dtype=np.float64),
        ))
    return log


# --------------------------------------------------------------------------------------
# Providers
# --------------------------------------------------------------------------------------

class RetrievalCrossAttention:
    """Cross-attention source backed by one shared datastore.

    mode
      full                  every row, every head (the oracle)
      retrieval             per-head top-k through the shared index
      naive_per_head_index  per-head top-k through a key index built for that head
      random_encoded        one uniform sample of k rows per layer per pass, shared by its heads

    `retrieval_layers` restricts retrieval to some decoder layers; the others
    attend to the first `local_window` rows (the truncated input).

    With `coverage_k` set, every logged retrieval also records the share of the
    full attention mass its top `coverage_k` rows carry (`self.coverage`).
    """

    def __init__(
        self,
        datastore: Datastore,
        mode: str = "retrieval",
        k: int | None = None,
        *,
        retrieval_layers: Iterable[int] | None = None,
        local_window: int | None = None,
        rng: Rng | None = None,
        coverage_k: int | None = None,
    ):
        if mode not in MODES:
            raise ArgumentError(f"unknown provider mode {mode!r}; expected one of {', '.join(MODES)}")
        if mode != "full" and (k is None or k < 1):
            raise ArgumentError(f"{mode} provider needs k >= 1, got {k}")
        if mode == "random_encoded" and rng is None:
            raise ArgumentError("random_encoded provider needs an Rng")
        if not datastore.frozen:
            raise StateError("provider over a datastore that is not frozen")
        self.datastore = datastore
        self.mode = mode
        self.k = k
        self.retrieval_layers = None if retrieval_layers is None else frozenset(retrieval_layers)
        if self.retrieval_layers is not None and local_window is None:
            raise ArgumentError("retrieval_layers needs a local_window for the other layers")
        self.local_window = local_window
        self.rng = rng
        if coverage_k is not None and coverage_k < 1:
            raise ArgumentError(f"coverage_k must be >= 1, got {coverage_k}")
        self.coverage_k = coverage_k
        self.log = RetrievalLog(datastore.n)
        self.coverage: list[CoverageRecord] = []
        self._layer_samples: dict[int, np.ndarray] = {}
        self._selections: dict[tuple[int, int], np.ndarray] = {}
        self._log_from = 0
        self._frozen = False

    def __repr__(self) -> str:
        return f"RetrievalCrossAttention(mode={self.mode!r}, k={self.k}, n={self.datastore.n})"

    # ---- lifecycle ----

    def begin_pass(self, log_from: int = 0) -> None:
        self._log_from = log_from
        self._layer_samples.clear()
        if not self._frozen:
            self._selections.clear()

    def freeze(self) -> RetrievalCrossAttention:
        """Replay the selections of the last pass from now on (retrieved sets held fixed)."""
        if not self._selections:
            raise StateError("freeze() before any pass has selected rows")
        self._frozen = True
        return self

    def with_memory(self, vectors: np.ndarray) -> RetrievalCrossAttention:
        """A frozen copy of this provider over different encoder states of the same shape."""
        if not self._frozen:
            raise StateError("with_memory() requires a frozen provider")
        if vectors.shape != self.datastore.vectors.shape:
            raise ShapeError(f"with_memory: {vectors.shape} vs {self.datastore.vectors.shape}")
        ds = Datastore(np.array(vectors, copy=True), self.datastore.positions.copy()).freeze()
        clone = RetrievalCrossAttention(
            ds, self.mode, self.k,
            retrieval_layers=self.retrieval_layers, local_window=self.local_window, rng=self.rng,
            coverage_k=self.coverage_k,
        )
        clone._selections = dict(self._selections)
        clone._frozen = True
        return clone

    def retrieves_at(self, layer: int) -> bool:
        return self.mode in RETRIEVING_MODES and (
            self.retrieval_layers is None or layer in self.retrieval_layers
        )

    # ---- selection ----

    def select(self, hp: HeadProjection, h_d: np.ndarray, steps: np.ndarray) -> np.ndarray:
        """T x k' row indices each query of this head attends to."""
        key = (hp.layer, hp.head)
        T, n = h_d.shape[0], self.datastore.n
        if self._frozen:
            idx = self._selections.get(key)
            if idx is None or idx.shape[0] != T:
                raise StateError(f"no frozen selection for layer {hp.layer} head {hp.head} with {T} queries")
            return idx

        if self.mode in RETRIEVING_MODES and not self.retrieves_at(hp.layer):
            idx = np.broadcast_to(np.arange(min(self.local_window, n)), (T, min(self.local_window, n)))
        elif self.mode == "full":
            idx = np.broadcast_to(np.arange(n), (T, n))
        elif self.mode == "random_encoded":
            sample = self._layer_samples.get(hp.layer)
            if sample is None:
                gen = self.rng.generator
                sample = np.sort(gen.choice(n, size=min(self.k, n), replace=False))
                self._layer_samples[hp.layer] = sample
            idx = np.broadcast_to(sample, (T, sample.size))
        else:
            if self.mode == "retrieval":
                idx, scores = query_batch(self.datastore, project_query(h_d, hp), self.k)
            else:
                keys = build_per_head_key_index(self.datastore.vectors, hp)
                idx, scores = query_batch(keys, h_d @ hp.wq + hp.bq, self.k)
            logged = [t for t in range(T) if steps[t] >= self._log_from]
            for t in logged:
                self.log.append(RetrievalRecord(int(steps[t]), hp.layer, hp.head, idx[t].copy(), scores[t].copy()))
            if self.coverage_k is not None and logged:
                cov = attention_mass_coverage_rows(h_d[logged], hp, self.datastore, self.coverage_k)
                self.coverage.extend(
                    CoverageRecord(int(steps[t]), hp.layer, hp.head, float(c)) for t, c in zip(logged, cov)
                )
        self._selections[key] = np.asarray(idx)
        return idx

    # ---- CrossAttentionProvider ----

    def attend(self, hp: HeadProjection, h_d: np.ndarray, steps: np.ndarray):
        idx = self.select(hp, h_d, steps)
        rows = self.datastore.vectors[idx]
        ctx, cache = _attend_rows(h_d, rows, hp)
        return ctx, (idx, cache)

    def attend_backward(self, hp: HeadProjection, cache, d_context: np.ndarray) -> HeadGradients:
        idx, inner = cache
        grads, d_rows = _attend_rows_backward(hp, inner, d_context)
        memory = np.zeros_like(self.datastore.vectors)
        np.add.at(memory, idx.reshape(-1), d_rows.reshape(-1, memory.shape[1]))
        grads.memory = memory
        return grads


def retrieve_for_head(provider: RetrievalCrossAttention, h_d, hp: HeadProjection, step: int = 0) -> RetrievalResult:
    """One decoder state's top-k through the shared index, appended to the provider's log."""
    if provider.mode != "retrieval":
        raise StateError(f"retrieve_for_head on a {provider.mode} provider")
    result = query(provider.datastore, project_query(h_d, hp), provider.k)
    provider.log.append(RetrievalRecord(step, hp.layer, hp.head, result.indices.copy(), result.scores.copy()))
    return result


def memorizing_transformers_provider(
    datastore: Datastore,
    config: ModelConfig,
    layer_index: int,
    k: int | None = None,
    coverage_k: int | None = None,
) -> RetrievalCrossAttention:
    """Retrieval at one decoder layer, truncated-window full attention at the others (gate fixed at 1)."""
    if not 0 <= layer_index < config.n_dec_layers:
        raise ArgumentError(f"layer {layer_index} outside [0, {config.n_dec_layers})")
    return RetrievalCrossAttention(
        datastore, "retrieval", k or config.window,
        retrieval_layers=(layer_index,), local_window=config.window, coverage_k=coverage_k,
    )


def make_provider(
    spec: str,
    datastore: Datastore,
    config: ModelConfig,
    k: int | None = None,
    rng: Rng | None = None,
    coverage_k: int | None = None,
) -> RetrievalCrossAttention:
    """Provider from a CLI-style spec: full | retrieval | naive | random | memtrans:LAYER."""
    k = k or config.window
    if spec.startswith("memtrans:"):
        try:
            layer = int(spec.split(":", 1)[1])
        except ValueError:
            raise ArgumentError(f"bad provider spec {spec!r}; expected memtrans:LAYER")
        return memorizing_transformers_provider(datastore, config, layer, k, coverage_k)
    aliases = {"naive": "naive_per_head_index", "random": "random_encoded"}
    return RetrievalCrossAttention(datastore, aliases.get(spec, spec), k, rng=rng, coverage_k=coverage_k)
