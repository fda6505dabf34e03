# retrieval_xattn/selftest.py
#
# In-process invariant suite behind `retrieval-xattn selftest`. Every check is
# seeded and small enough to run in a few seconds on a laptop.

from __future__ import annotations

import logging
import math
import time
import traceback
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .chunker import chunk_spans, encode_long, encode_long_backward
from .config import parse_config
from .errors import ConfigValidationError, SelftestFailure
from .knn_index import Datastore, build, memory_bytes, query
from .model import (
    BOS,
    EOS,
    DecoderCache,
    ModelConfig,
    ModelWeights,
    decode_step,
    encode_window,
    monolithic_logits,
    teacher_forced_loss,
)
from .numerics import Rng, grad_check, softmax
from .retrieval_attention import (
    RetrievalCrossAttention,
    attend_retrieved,
    attention_mass_coverage,
    build_per_head_key_index,
    full_attention_oracle,
    key_bias_offset,
    naive_per_head_topk,
    project_query,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ""


@dataclass
class SelftestReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def summary(self) -> dict:
        return {
            "ok": self.passed,
            "passed": sum(c.passed for c in self.checks),
            "failed": self.failed,
            "checks": [
                {"name": c.name, "passed": c.passed, "seconds": round(c.seconds, 4), "detail": c.detail}
                for c in self.checks
            ],
        }


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise SelftestFailure(message)


def _random_weights(config: ModelConfig, rng: Rng, bias_std: float = 0.1) -> ModelWeights:
    """float64 weights with nonzero attention biases."""
    weights = ModelWeights.initialize(config, rng.split("init")).astype(np.float64)
    gen = rng.split("bias").generator
    for name, value in weights.params.items():
        if name.endswith((".bq", ".bk", ".bv")):
            weights.params[name] = gen.standard_normal(value.shape) * bias_std
    return weights


# ---------- checks ----------

def check_softmax() -> None:
    p = softmax(np.array([math.log(2.0), 0.0]))
    _expect(np.allclose(p, [2 / 3, 1 / 3], atol=1e-12), f"softmax([ln 2, 0]) = {p}")
    big = softmax(np.array([1000.0, 0.0, -1000.0]))
    _expect(bool(np.all(np.isfinite(big))) and abs(big.sum() - 1.0) < 1e-12, "softmax overflowed on large logits")


def check_grad_check_quadratic() -> None:
    x = Rng(0).split("quadratic").generator.standard_normal((3, 4))
    err = grad_check(lambda v: float(np.sum(v * v)), 2 * x, x, eps=1e-4)
    _expect(err < 1e-6, f"quadratic grad_check error {err:.3e}")


def check_reformulation(trials: int = 24) -> None:
    """Shared-index top-k matches the per-head key index: same rows, scores off by the b_k term."""
    for trial in range(trials):
        rng = Rng(trial).split("selftest", "reformulation")
        gen = rng.generator
        d_model = int(gen.choice([8, 32, 64]))
        heads = int(gen.choice([1, 2, 4]))
        n = int(gen.integers(4, 129))
        cfg = ModelConfig(d_model=d_model, n_heads=heads, d_ff=2 * d_model, init_std=0.5)
        weights = _random_weights(cfg, rng)
        memory = gen.standard_normal((n, d_model))
        ds = Datastore(memory, np.arange(n)).freeze()
        for hp in weights.head_projections():
            h_d = gen.standard_normal(d_model)
            k = int(gen.integers(1, n + 1))
            shared = query(ds, project_query(h_d, hp), k)
            naive = naive_per_head_topk(h_d, hp, build_per_head_key_index(memory, hp), k)
            _expect(
                np.array_equal(shared.indices, naive.indices),
                f"trial {trial}: top-{k} rows differ between shared and per-head indexes",
            )
            _expect(
                np.allclose(naive.scores, shared.scores + key_bias_offset(h_d, hp), rtol=1e-9, atol=1e-6),
                f"trial {trial}: scores differ beyond the key-bias offset",
            )


def check_full_subsumption(trials: int = 12) -> None:
    for trial in range(trials):
        rng = Rng(trial).split("selftest", "subsumption")
        gen = rng.generator
        cfg = ModelConfig(d_model=16, n_heads=2, d_ff=32, init_std=0.3)
        weights = _random_weights(cfg, rng)
        n = int(gen.integers(1, 65))
        memory = gen.standard_normal((n, cfg.d_model))
        ds = Datastore(memory, np.arange(n)).freeze()
        for hp in weights.head_projections():
            h_d = gen.standard_normal(cfg.d_model)
            rows = memory[query(ds, project_query(h_d, hp), n).indices]
            diff = np.max(np.abs(attend_retrieved(h_d, rows, hp) - full_attention_oracle(h_d, memory, hp)))
            _expect(diff <= 1e-5, f"trial {trial}: k=n retrieval differs from full attention by {diff:.3e}")


def check_memory_accounting() -> None:
    _expect(memory_bytes(10**6, 1024, 2) == 2_048_000_000, "memory_bytes(1e6, 1024, 2) is not n x d x b")
    _expect(memory_bytes(1_024_000, 1024, 2) == 2_097_152_000, "memory_bytes(1024000, 1024, 2) is wrong")
    vectors = Rng(0).split("payload").generator.standard_normal((1000, 64)).astype(np.float32)
    ds = build(Datastore(vectors, np.arange(1000)))
    _expect(ds.payload_bytes == 256_000, f"payload of a 1000 x 64 float32 datastore is {ds.payload_bytes} bytes")


def check_chunk_partition() -> None:
    for w in (4, 8, 16, 32):
        for n in range(1, 10 * w + 1):
            plan = chunk_spans(n, w)
            edges = [(s.keep_start, s.keep_end) for s in plan.spans]
            _expect(edges[0][0] == 0 and edges[-1][1] == n, f"n={n} w={w}: keep ranges do not span [0, n)")
            _expect(
                all(a[1] == b[0] for a, b in zip(edges, edges[1:])),
                f"n={n} w={w}: keep ranges overlap or leave a gap",
            )
            _expect(
                all(s.start <= s.keep_start < s.keep_end <= s.end for s in plan.spans),
                f"n={n} w={w}: a keep range leaves its chunk",
            )

    cfg = ModelConfig(window=8, d_model=16, d_ff=32)
    weights = ModelWeights.initialize(cfg)
    gen = Rng(0).split("selftest", "chunks").generator
    for n in (1, 5, 8, 9, 23, 80):
        ids = gen.integers(4, cfg.vocab_size, size=n)
        encoded = encode_long(weights, ids)
        for span in encoded.plan.spans:
            local = encode_window(weights, ids[span.start : span.end])
            kept = local[span.keep_start - span.start : span.keep_end - span.start]
            _expect(
                np.array_equal(encoded.vectors[span.keep_start : span.keep_end], kept),
                f"n={n}: encode_long rows differ from the owning chunk's encoding",
            )


def check_coverage() -> None:
    rng = Rng(0).split("selftest", "coverage")
    gen = rng.generator
    cfg = ModelConfig(d_model=16, n_heads=2, d_ff=32, init_std=0.3)
    weights = _random_weights(cfg, rng)
    n = 48
    ds = Datastore(gen.standard_normal((n, cfg.d_model)), np.arange(n)).freeze()
    for hp in weights.head_projections():
        h_d = gen.standard_normal(cfg.d_model)
        cov = [attention_mass_coverage(h_d, hp, ds, k) for k in range(n + 1)]
        _expect(all(b >= a - 1e-12 for a, b in zip(cov, cov[1:])), "coverage decreases with k")
        _expect(abs(cov[-1] - 1.0) <= 1e-6, f"coverage at k=n is {cov[-1]}")


def check_decoder_consistency() -> None:
    rng = Rng(0).split("selftest", "decoder")
    cfg = ModelConfig(d_model=16, n_heads=2, d_ff=32, window=8, init_std=0.3)
    weights = _random_weights(cfg, rng)
    source = rng.generator.integers(4, cfg.vocab_size, size=8)
    prefix = [BOS, 7, 9, 11]
    ds = build(encode_long(weights, source))
    full = RetrievalCrossAttention(ds, "full")
    reference = monolithic_logits(weights, source, prefix)
    uncached = decode_step(weights, prefix, full)
    _expect(np.allclose(uncached, reference[-1], atol=1e-8), "full-provider decode differs from the monolithic model")
    cache = DecoderCache()
    for t in range(1, len(prefix) + 1):
        step = decode_step(weights, prefix[:t], full, cache)
        _expect(np.allclose(step, reference[t - 1], atol=1e-8), f"cached decode differs at position {t - 1}")


def check_retrieval_gradients() -> None:
    """Finite differences through encoder, frozen retrieval and decoder on a d_model=8 model."""
    rng = Rng(0).split("selftest", "gradients")
    cfg = ModelConfig(d_model=8, n_heads=2, d_ff=16, window=8, vocab_size=16, init_std=0.3)
    weights = _random_weights(cfg, rng)
    source = rng.generator.integers(4, cfg.vocab_size, size=20)
    target = [BOS, 5, 9, 6, EOS]

    encoded = encode_long(weights, source, keep_caches=True)
    cross = RetrievalCrossAttention(build(encoded), "retrieval", 4)
    _, grads = teacher_forced_loss(weights, cross, target)
    encode_long_backward(weights, encoded, grads.memory, grads)
    cross.freeze()

    for name in ("dec.0.cross.wq", "dec.0.cross.wk", "dec.0.cross.wv", "enc.0.self.wv"):
        def loss_at(x, name=name):
            perturbed = weights.copy()
            perturbed.params[name] = x
            frozen = cross.with_memory(encode_long(perturbed, source).vectors)
            return teacher_forced_loss(perturbed, frozen, target)[0]

        err = grad_check(loss_at, grads.params[name], weights.params[name], eps=1e-5)
        _expect(err < 1e-3, f"{name}: max relative gradient error {err:.3e}")


def check_config() -> None:
    cfg = parse_config("{}")
    _expect(cfg.model.window == 16 and cfg.model.d_model == 32 and cfg.retrieval_k == 16, "defaults changed")
    try:
        parse_config('{"model": {"window": 10}}')
    except ConfigValidationError:
        pass
    else:
        raise SelftestFailure("window=10 was accepted")


CHECKS: list[tuple[str, Callable[[], None]]] = [
    ("softmax", check_softmax),
    ("grad_check_quadratic", check_grad_check_quadratic),
    ("reformulation_exactness", check_reformulation),
    ("full_attention_subsumption", check_full_subsumption),
    ("memory_accounting", check_memory_accounting),
    ("chunk_partition", check_chunk_partition),
    ("attention_mass_coverage", check_coverage),
    ("decoder_consistency", check_decoder_consistency),
    ("retrieval_gradients", check_retrieval_gradients),
    ("config_defaults", check_config),
]


def run_selftest(only: list[str] | None = None) -> SelftestReport:
    report = SelftestReport()
    for name, check in CHECKS:
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            check()
        except SelftestFailure as exc:
            report.checks.append(CheckResult(name, False, time.perf_counter() - t0, str(exc)))
            logger.error("selftest %s failed: %s", name, exc)
        except Exception as exc:
            report.checks.append(CheckResult(name, False, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"))
            logger.debug(traceback.format_exc())
            logger.error("selftest %s raised %s", name, type(exc).__name__)
        else:
            report.checks.append(CheckResult(name, True, time.perf_counter() - t0))
            logger.info("selftest %s passed", name)
    return report
