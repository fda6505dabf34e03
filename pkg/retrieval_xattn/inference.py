# retrieval_xattn/inference.py
#
# Encode-index-generate for one input, with either a truncated view (the
# base model's window) or the full input behind a retrieval provider.

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .chunker import encode_long
from .knn_index import Datastore, build
from .model import ModelWeights, greedy_generate
from .numerics import Rng
from .retrieval_attention import RetrievalCrossAttention, make_provider

logger = logging.getLogger(__name__)


@dataclass
class Generation:
    tokens: list[int]
    provider: RetrievalCrossAttention


def index_input(weights: ModelWeights, tokens, limit: int | None = None, workers: int = 1) -> Datastore:
    """Chunk-encode (up to `limit` tokens of) an input and freeze it into a datastore."""
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if limit is not None:
        ids = ids[:limit]
    return build(encode_long(weights, ids, workers=workers))


def generate(
    weights: ModelWeights,
    tokens,
    provider: str = "retrieval",
    k: int | None = None,
    max_new_tokens: int | None = None,
    *,
    truncate: bool = False,
    rng: Rng | None = None,
    workers: int = 1,
    coverage_k: int | None = None,
) -> Generation:
    """Greedy generation for one input.

    truncate=True reproduces the base model: only the first window of the
    input is encoded and attended to in full. `coverage_k` makes a retrieving
    provider record attention-mass coverage for every query it logs.
    """
    cfg = weights.config
    budget = cfg.window - 1 if max_new_tokens is None else max_new_tokens
    if truncate:
        ds = index_input(weights, tokens, limit=cfg.window)
        cross = make_provider("full", ds, cfg)
    else:
        ds = index_input(weights, tokens, workers=workers)
        cross = make_provider(provider, ds, cfg, k=k, rng=rng, coverage_k=coverage_k)
    out = greedy_generate(weights, cross, budget)
    return Generation(out, cross)
