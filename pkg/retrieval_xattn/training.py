# retrieval_xattn/training.py
#
# The six training configurations (truncated baseline, +early stop with
# retrieval, chunked augmentation, random-encoded, retrieval, alternating)
# over batch-size-1 steps, with generation-based early stopping.

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .chunker import encode_long, encode_long_backward
from .corpus import Example
from .errors import ArgumentError, ConfigValidationError
from .evalbench.metrics import mean_needle_recall
from .inference import generate
from .knn_index import build
from .model import EOS, Gradients, ModelConfig, ModelWeights, teacher_forced_loss
from .numerics import Rng
from .retrieval_attention import RetrievalCrossAttention

logger = logging.getLogger(__name__)

VARIANTS = ("standard_truncated", "train_chunked", "random_encoded", "retrieval", "alternating")
VALIDATION_MODES = ("truncated", "unlimiformer")


@dataclass(frozen=True)
class TrainingRegime:
    variant: str = "retrieval"
    validation_mode: str = "unlimiformer"
    train_truncation_limit: int | None = None  # None: 16 x window
    max_epochs: int = 30
    patience: int = 3
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    k: int | None = None  # None: window
    name: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigValidationError(f"regime.variant must be one of {', '.join(VARIANTS)}, got {self.variant!r}")
        if self.validation_mode not in VALIDATION_MODES:
            raise ConfigValidationError(
                f"regime.validation_mode must be one of {', '.join(VALIDATION_MODES)}, got {self.validation_mode!r}"
            )
        if self.max_epochs < 1:
            raise ConfigValidationError(f"regime.max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 0:
            raise ConfigValidationError(f"regime.patience must be >= 0, got {self.patience}")
        if self.train_truncation_limit is not None and self.train_truncation_limit < 1:
            raise ConfigValidationError("regime.train_truncation_limit must be >= 1")
        if self.k is not None and self.k < 1:
            raise ConfigValidationError(f"regime.k must be >= 1, got {self.k}")
        if not self.lr > 0:
            raise ConfigValidationError(f"regime.lr must be > 0, got {self.lr}")

    @property
    def label(self) -> str:
        return self.name or self.variant

    def truncation_limit(self, config: ModelConfig) -> int:
        return self.train_truncation_limit or 16 * config.window

    def retrieval_k(self, config: ModelConfig) -> int:
        return self.k or config.window

    def step_variant(self, batch_index: int) -> str:
        """Step construction used for the given batch (alternating starts with random_encoded)."""
        if self.variant == "alternating":
            return "random_encoded" if batch_index % 2 == 0 else "retrieval"
        if self.variant == "train_chunked":
            return "standard_truncated"
        return self.variant


PRESETS: dict[str, TrainingRegime] = {
    "baseline": TrainingRegime("standard_truncated", "truncated", name="baseline"),
    "early_stop_unlimiformer": TrainingRegime("standard_truncated", "unlimiformer", name="early_stop_unlimiformer"),
    "train_chunked": TrainingRegime("train_chunked", "unlimiformer", name="train_chunked"),
    "random_encoded": TrainingRegime("random_encoded", "unlimiformer", name="random_encoded"),
    "retrieval": TrainingRegime("retrieval", "unlimiformer", name="retrieval"),
    "alternating": TrainingRegime("alternating", "unlimiformer", name="alternating"),
}


# --------------------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


class Adam:
    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def init_state(self, weights: ModelWeights) -> AdamState:
        return AdamState(
            {k: np.zeros_like(v) for k, v in weights.params.items()},
            {k: np.zeros_like(v) for k, v in weights.params.items()},
        )

    def step(self, weights: ModelWeights, grads: Gradients, state: AdamState) -> None:
        state.t += 1
        c1 = 1.0 - self.beta1**state.t
        c2 = 1.0 - self.beta2**state.t
        for name, p in weights.params.items():
            g = grads.params[name]
            m, v = state.m[name], state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------------------
# Steps
# --------------------------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    grads: Gradients
    provider: RetrievalCrossAttention


@dataclass
class TrainingStep:
    variant: str
    source: np.ndarray
    target: np.ndarray
    k: int | None = None
    rng: Rng | None = None

    def execute(self, weights: ModelWeights) -> StepResult:
        encoded = encode_long(weights, self.source, keep_caches=True)
        ds = build(encoded)
        if self.variant == "standard_truncated":
            cross = RetrievalCrossAttention(ds, "full")
        elif self.variant == "random_encoded":
            cross = RetrievalCrossAttention(ds, "random_encoded", self.k, rng=self.rng)
        else:
            cross = RetrievalCrossAttention(ds, "retrieval", self.k)
        loss, grads = teacher_forced_loss(weights, cross, self.target)
        if grads.memory is not None:
            encode_long_backward(weights, encoded, grads.memory, grads)
        return StepResult(loss, grads, cross)


def _fit_target(target, window: int) -> np.ndarray:
    ids = np.asarray(target, dtype=np.int64)
    if ids.size > window:
        ids = np.concatenate([ids[: window - 1], [EOS]])
    return ids


def make_step_standard(example: Example, config: ModelConfig) -> TrainingStep:
    """Truncated baseline: the encoder sees the first window of the input only."""
    source = np.asarray(example.input, dtype=np.int64)[: config.window]
    return TrainingStep("standard_truncated", source, _fit_target(example.target, config.window))


def make_step_random_encoded(
    example: Example, config: ModelConfig, regime: TrainingRegime, rng: Rng
) -> TrainingStep:
    source = np.asarray(example.input, dtype=np.int64)[: regime.truncation_limit(config)]
    return TrainingStep(
        "random_encoded", source, _fit_target(example.target, config.window),
        k=regime.retrieval_k(config), rng=rng,
    )


def make_step_retrieval(example: Example, config: ModelConfig, regime: TrainingRegime) -> TrainingStep:
    source = np.asarray(example.input, dtype=np.int64)[: regime.truncation_limit(config)]
    return TrainingStep(
        "retrieval", source, _fit_target(example.target, config.window), k=regime.retrieval_k(config)
    )


def make_step(variant: str, example: Example, config: ModelConfig, regime: TrainingRegime, rng: Rng) -> TrainingStep:
    if variant == "standard_truncated":
        return make_step_standard(example, config)
    if variant == "random_encoded":
        return make_step_random_encoded(example, config, regime, rng)
    if variant == "retrieval":
        return make_step_retrieval(example, config, regime)
    raise ArgumentError(f"no step construction for variant {variant!r}")


def chunk_example(example: Example, window: int) -> list[Example]:
    src = example.input
    if len(src) <= window:
        return [example]
    return [Example(tuple(src[i : i + window]), example.target) for i in range(0, len(src), window)]


def augment_chunked(corpus: Sequence[Example], window: int) -> list[Example]:
    """Split each input into non-overlapping window-sized chunks, each paired with the full target."""
    out: list[Example] = []
    for ex in corpus:
        out.extend(chunk_example(ex, window))
    return out


# --------------------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------------------

def _gold(example: Example) -> list[int]:
    return [int(t) for t in example.target[1:-1]]


def _generate_all(weights, examples, truncate: bool, k, workers: int) -> list[list[int]]:
    def run(ex):
        return generate(weights, ex.input, "retrieval", k=k, truncate=truncate).tokens

    if workers > 1 and len(examples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, examples))
    return [run(ex) for ex in examples]


def validate_unlimiformer(
    weights: ModelWeights,
    val_corpus: Sequence[Example],
    k: int | None = None,
    workers: int = 1,
) -> float:
    """Mean needle recall of greedy generation over full-length inputs behind retrieval."""
    if not val_corpus:
        raise ArgumentError("validation corpus is empty")
    outs = _generate_all(weights, val_corpus, False, k, workers)
    return mean_needle_recall(outs, [_gold(ex) for ex in val_corpus])


def validate_truncated(weights: ModelWeights, val_corpus: Sequence[Example], workers: int = 1) -> float:
    if not val_corpus:
        raise ArgumentError("validation corpus is empty")
    outs = _generate_all(weights, val_corpus, True, None, workers)
    return mean_needle_recall(outs, [_gold(ex) for ex in val_corpus])


# --------------------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_score: float
    regime: str

    def line(self) -> str:
        return f"{self.epoch},{self.train_loss:.6f},{self.val_score:.6f},{self.regime}"


@dataclass
class TrainState:
    weights: ModelWeights
    optimizer: AdamState
    epoch: int = 0
    best_score: float = -math.inf
    best_epoch: int = 0
    batches_seen: int = 0
    history: list[EpochRecord] = field(default_factory=list)


def _epoch_examples(corpus, regime, config, rng: Rng, epoch: int) -> Iterator[Example]:
    order = rng.split("order", epoch).generator.permutation(len(corpus))
    for i in order:
        if regime.variant == "train_chunked":
            yield from chunk_example(corpus[i], config.window)
        else:
            yield corpus[i]


def run_epoch(state: TrainState, corpus, config, regime, rng: Rng, optimizer: Adam, epoch: int) -> float:
    losses = []
    for ex in _epoch_examples(corpus, regime, config, rng, epoch):
        variant = regime.step_variant(state.batches_seen)
        step = make_step(variant, ex, config, regime, rng.split("sample", state.batches_seen))
        result = step.execute(state.weights)
        optimizer.step(state.weights, result.grads, state.optimizer)
        state.batches_seen += 1
        losses.append(result.loss)
    return float(np.mean(losses))


def train(
    config: ModelConfig,
    regime: TrainingRegime,
    corpus: Sequence[Example],
    validation: Sequence[Example] | None = None,
    *,
    seed: int | None = None,
    weights: ModelWeights | None = None,
    log_path: str | None = None,
    workers: int = 1,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainState:
    """Batch-size-1 training with early stopping on validation needle recall.

    `validation` defaults to the training corpus. Returns the state at the best
    validation epoch.
    """
    if not corpus:
        raise ArgumentError("training corpus is empty")
    validation = list(validation) if validation else list(corpus)
    rng = Rng(config.seed if seed is None else seed)
    weights = weights.copy() if weights is not None else ModelWeights.initialize(config, rng.split("init"))
    optimizer = Adam(regime.lr, regime.beta1, regime.beta2)
    state = TrainState(weights, optimizer.init_state(weights))
    best = weights.copy()
    stale = 0

    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, regime.max_epochs + 1):
            t0 = time.perf_counter()
            train_loss = run_epoch(state, corpus, config, regime, rng, optimizer, epoch)
            if regime.validation_mode == "unlimiformer":
                score = validate_unlimiformer(state.weights, validation, regime.retrieval_k(config), workers)
            else:
                score = validate_truncated(state.weights, validation, workers)
            state.epoch = epoch
            record = EpochRecord(epoch, train_loss, score, regime.label)
            state.history.append(record)
            logger.info(
                "epoch %d: loss %.4f, val %.4f (%s, %.1fs)",
                epoch, train_loss, score, regime.label, time.perf_counter() - t0,
            )
            if log_file:
                log_file.write(record.line() + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(record)

            if score > state.best_score:
                state.best_score, state.best_epoch = score, epoch
                best = state.weights.copy()
                stale = 0
            else:
                stale += 1
                if stale > regime.patience:
                    logger.info("early stop after epoch %d (best epoch %d)", epoch, state.best_epoch)
                    break
    finally:
        if log_file:
            log_file.close()

    state.weights = best
    return state


# --------------------------------------------------------------------------------------
# Relative training cost
# --------------------------------------------------------------------------------------

def bench_training_cost(
    config: ModelConfig,
    presets: dict[str, TrainingRegime],
    corpus: Sequence[Example],
    *,
    seed: int = 0,
) -> list[dict]:
    """Seconds for one training epoch per regime, relative to the first one listed."""
    if not presets:
        raise ArgumentError("no regimes to compare")
    rows = []
    for name, regime in presets.items():
        rng = Rng(seed)
        weights = ModelWeights.initialize(config, rng.split("init"))
        optimizer = Adam(regime.lr, regime.beta1, regime.beta2)
        state = TrainState(weights, optimizer.init_state(weights))
        t0 = time.perf_counter()
        run_epoch(state, corpus, config, regime, rng, optimizer, 1)
        rows.append({"regime": name, "epoch_seconds": time.perf_counter() - t0, "steps": state.batches_seen})
    base = rows[0]["epoch_seconds"]
    for row in rows:
        row["relative_to_baseline"] = row["epoch_seconds"] / base if base > 0 else float("nan")
    return rows
