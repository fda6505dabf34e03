# retrieval_xattn/chunker.py
#
# Long-input encoding: run the window encoder over overlapping chunks and keep
# the middle of each chunk, so every input token gets exactly one hidden
# state. The first chunk keeps from 0 and the last one keeps to n.

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ArgumentError, ConfigValidationError
from .model import Gradients, ModelWeights, encode_window, encode_window_backward, encode_window_train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChunkSpan:
    start: int
    end: int  # exclusive
    keep_start: int
    keep_end: int


@dataclass(frozen=True)
class ChunkPlan:
    n: int
    window: int
    spans: tuple[ChunkSpan, ...]

    def owner(self, t: int) -> ChunkSpan:
        for span in self.spans:
            if span.keep_start <= t < span.keep_end:
                return span
        raise ArgumentError(f"token {t} outside [0, {self.n})")


@dataclass
class EncodedInput:
    """Payload for the datastore: one hidden state per input token, in order."""

    vectors: np.ndarray  # n x d_model
    positions: np.ndarray  # n, original token index
    plan: ChunkPlan
    caches: list[Any] | None = None  # per-chunk encoder caches when encoded for training


def chunk_spans(n: int, w: int, stride: int | None = None) -> ChunkPlan:
    """Plan overlapping windows over n tokens with window w (stride w/2 by default).

    The keep boundary between consecutive chunks is the midpoint of their
    overlap, floor((start_i + start_{i+1} + w) / 2).
    """
    if w < 4 or w % 4:
        raise ConfigValidationError(f"window must be >= 4 and divisible by 4, got {w}")
    if n < 1:
        raise ArgumentError(f"chunk_spans: input length must be >= 1, got {n}")
    stride = w // 2 if stride is None else stride
    if not 1 <= stride <= w:
        raise ConfigValidationError(f"stride must be in [1, {w}], got {stride}")

    if n <= w:
        return ChunkPlan(n, w, (ChunkSpan(0, n, 0, n),))

    starts = list(range(0, n - w, stride)) + [n - w]
    bounds = [(starts[i] + starts[i + 1] + w) // 2 for i in range(len(starts) - 1)]
    keeps = [0, *bounds, n]
    spans = tuple(
        ChunkSpan(s, s + w, keeps[i], keeps[i + 1]) for i, s in enumerate(starts)
    )
    return ChunkPlan(n, w, spans)


def _map_chunks(fn, spans, workers: int):
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, spans))
    return [fn(s) for s in spans]


def encode_long(
    weights: ModelWeights,
    tokens,
    *,
    stride: int | None = None,
    workers: int = 1,
    keep_caches: bool = False,
) -> EncodedInput:
    """Encode an arbitrarily long input; row t is token t's kept hidden state."""
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size < 1:
        raise ArgumentError("encode_long: empty input")
    plan = chunk_spans(int(ids.size), weights.config.window, stride)
    logger.debug("encoding %d tokens in %d chunk(s)", ids.size, len(plan.spans))

    if keep_caches:
        outputs = _map_chunks(lambda s: encode_window_train(weights, ids[s.start : s.end]), plan.spans, workers)
        hidden = [h for h, _ in outputs]
        caches = [c for _, c in outputs]
    else:
        hidden = _map_chunks(lambda s: encode_window(weights, ids[s.start : s.end]), plan.spans, workers)
        caches = None

    vectors = np.concatenate(
        [h[s.keep_start - s.start : s.keep_end - s.start] for s, h in zip(plan.spans, hidden)],
        axis=0,
    )
    return EncodedInput(
        vectors=np.ascontiguousarray(vectors),
        positions=np.arange(ids.size, dtype=np.int64),
        plan=plan,
        caches=caches,
    )


def encode_long_backward(
    weights: ModelWeights,
    encoded: EncodedInput,
    d_vectors: np.ndarray,
    grads: Gradients,
) -> None:
    """Route a gradient over the datastore rows back through each chunk's encoder pass."""
    if encoded.caches is None:
        raise ArgumentError("encode_long_backward needs an input encoded with keep_caches=True")
    for span, cache in zip(encoded.plan.spans, encoded.caches):
        rows = d_vectors[span.keep_start : span.keep_end]
        if not np.any(rows):
            continue
        d_hidden = np.zeros((span.end - span.start, d_vectors.shape[1]), dtype=d_vectors.dtype)
        d_hidden[span.keep_start - span.start : span.keep_end - span.start] = rows
        encode_window_backward(weights, cache, d_hidden, grads)
