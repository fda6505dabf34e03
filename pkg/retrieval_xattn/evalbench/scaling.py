# retrieval_xattn/evalbench/scaling.py
#
# Wall-clock inference cost against input length, and recall against the
# input limit. Benchmarks hold a process-wide lock; a second concurrent run
# fails instead of skewing both measurements.

from __future__ import annotations

import logging
import statistics
import threading
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from ..corpus import Example
from ..errors import ArgumentError, BenchmarkError
from ..inference import generate, index_input
from ..model import BOS, DecoderCache, ModelWeights, decode_step
from ..numerics import Rng
from ..retrieval_attention import make_provider
from .metrics import mean_needle_recall
from .tasks import FIRST_CONTENT_ID

logger = logging.getLogger(__name__)

_BENCH_LOCK = threading.Lock()
# Measurements shorter than this many clock ticks are rejected.
MIN_TICKS = 10


@dataclass(frozen=True)
class ScalingRow:
    input_length: int
    encode_seconds: float
    decode_seconds: float
    total_seconds: float
    relative_to_baseline: float


@dataclass
class ScalingReport:
    rows: list[ScalingRow] = field(default_factory=list)
    output_tokens: int = 0
    repetitions: int = 0

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows])

    def row(self, input_length: int) -> ScalingRow:
        for r in self.rows:
            if r.input_length == input_length:
                return r
        raise ArgumentError(f"no row for input length {input_length}")


def _random_input(weights: ModelWeights, n: int, rng: Rng) -> np.ndarray:
    return rng.generator.integers(FIRST_CONTENT_ID, weights.config.vocab_size, size=n)


def _forced_decode(weights: ModelWeights, cross, budget: int) -> None:
    # fixed budget, EOS ignored, so every length decodes the same number of steps
    prefix = [BOS]
    cache = DecoderCache()
    for _ in range(budget):
        logits = decode_step(weights, prefix, cross, cache)
        prefix.append(int(np.argmax(logits)))


def _measure(weights, tokens, provider: str, k, budget: int, rng: Rng) -> tuple[float, float]:
    t0 = time.perf_counter()
    ds = index_input(weights, tokens)
    t1 = time.perf_counter()
    cross = make_provider(provider, ds, weights.config, k=k, rng=rng)
    _forced_decode(weights, cross, budget)
    t2 = time.perf_counter()
    return t1 - t0, t2 - t1


def bench_scaling(
    weights: ModelWeights,
    lengths: Sequence[int],
    repetitions: int = 5,
    *,
    output_tokens: int | None = None,
    provider: str = "retrieval",
    k: int | None = None,
    seed: int = 0,
) -> ScalingReport:
    """Median encode (chunked encoding + index build) and decode time per input length.

    One warm-up run per length is discarded before the timed repetitions.
    """
    lengths = [int(n) for n in lengths]
    if not lengths:
        raise ArgumentError("bench_scaling: no input lengths")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ArgumentError(f"bench_scaling: lengths must be strictly increasing, got {lengths}")
    if lengths[0] < 1:
        raise ArgumentError("bench_scaling: lengths must be >= 1")
    if repetitions < 3:
        raise ArgumentError(f"bench_scaling: repetitions must be >= 3, got {repetitions}")
    window = weights.config.window
    budget = window - 1 if output_tokens is None else output_tokens
    if not 1 <= budget <= window - 1:
        raise ArgumentError(f"bench_scaling: output budget must be in [1, {window - 1}], got {budget}")

    if not _BENCH_LOCK.acquire(blocking=False):
        raise BenchmarkError("another benchmark is already running in this process")
    try:
        tick = time.get_clock_info("perf_counter").resolution
        rng = Rng(seed).split("bench_scaling")
        report = ScalingReport(output_tokens=budget, repetitions=repetitions)
        base_total = None
        for n in lengths:
            tokens = _random_input(weights, n, rng.split(n))
            _measure(weights, tokens, provider, k, budget, rng.split("warmup", n))
            enc, dec = [], []
            for rep in range(repetitions):
                e, d = _measure(weights, tokens, provider, k, budget, rng.split("provider", n, rep))
                enc.append(e)
                dec.append(d)
            e_med, d_med = statistics.median(enc), statistics.median(dec)
            if min(e_med, d_med) < MIN_TICKS * tick:
                raise BenchmarkError(
                    f"timer resolution {tick:.2e}s too coarse for a {min(e_med, d_med):.2e}s measurement at n={n}"
                )
            total = e_med + d_med
            base_total = total if base_total is None else base_total
            report.rows.append(ScalingRow(n, e_med, d_med, total, total / base_total))
            logger.info("n=%d: encode %.4fs, decode %.4fs", n, e_med, d_med)
        return report
    finally:
        _BENCH_LOCK.release()


def input_limit_sweep(
    weights: ModelWeights,
    examples: Sequence[Example],
    limits: Sequence[int],
    k: int | None = None,
    provider: str = "retrieval",
    seed: int = 0,
) -> pd.DataFrame:
    """Mean needle recall when each input is cut to `limit` tokens before indexing."""
    if not examples:
        raise ArgumentError("input_limit_sweep: no examples")
    rng = Rng(seed).split("input_limit")
    gold = [ex.target[1:-1] for ex in examples]
    rows = []
    for limit in limits:
        if limit < 1:
            raise ArgumentError(f"input_limit_sweep: limit must be >= 1, got {limit}")
        outs = [
            generate(weights, ex.input[:limit], provider, k=k, rng=rng.split(limit, i)).tokens
            for i, ex in enumerate(examples)
        ]
        rows.append({"input_limit": int(limit), "needle_recall": mean_needle_recall(outs, gold)})
        logger.info("input limit %d: recall %.3f", limit, rows[-1]["needle_recall"])
    return pd.DataFrame(rows)
