# retrieval_xattn/evalbench/tasks.py
#
# Needle-copy task: filler tokens with m distinct needle tokens scattered
# uniformly; the target repeats the needles in order of appearance.

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..corpus import Example
from ..errors import ArgumentError
from ..model import BOS, EOS
from ..numerics import Rng

FIRST_CONTENT_ID = 4


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "needle_copy"
    n: int = 128
    window: int = 16
    m: int = 8
    vocab: int = 64
    seed: int = 0
    count: int = 50
    examples: tuple[Example, ...] = field(default=(), compare=False, repr=False)

    @property
    def gold(self) -> list[list[int]]:
        return [list(ex.target[1:-1]) for ex in self.examples]


def token_pools(vocab: int) -> tuple[np.ndarray, np.ndarray]:
    """(needle ids, filler ids): the lower and upper halves of the content range."""
    content = np.arange(FIRST_CONTENT_ID, vocab, dtype=np.int64)
    if content.size < 2:
        raise ArgumentError(f"vocabulary of {vocab} leaves no room for needles and filler")
    half = content.size // 2
    return content[:half], content[half:]


def _one_example(rng: np.random.Generator, n: int, m: int, needles: np.ndarray, filler: np.ndarray) -> Example:
    tokens = rng.choice(filler, size=n)
    positions = np.sort(rng.choice(n, size=m, replace=False))
    chosen = rng.choice(needles, size=m, replace=False)
    tokens[positions] = chosen
    target = (BOS, *(int(t) for t in chosen), EOS)
    return Example(tuple(int(t) for t in tokens), target)


def generate_needle_task(n: int, W: int, m: int, vocab: int, seed: int, count: int = 50) -> SyntheticTask:
    """Deterministic needle-copy dataset of `count` examples of length n."""
    if n < W:
        raise ArgumentError(f"needle task: n={n} shorter than the window {W}")
    if m < 1:
        raise ArgumentError(f"needle task: m must be >= 1, got {m}")
    if 4 * m > n:
        raise ArgumentError(f"needle task: m={m} exceeds n/4 for n={n}")
    if m + 2 > W:
        raise ArgumentError(f"needle task: target of {m} needles plus BOS/EOS does not fit window {W}")
    needles, filler = token_pools(vocab)
    if m > needles.size:
        raise ArgumentError(f"needle task: m={m} exceeds the {needles.size} available needle ids")
    if count < 1:
        raise ArgumentError(f"needle task: count must be >= 1, got {count}")

    rng = Rng(seed).split("needle_task")
    examples = tuple(
        _one_example(rng.split(i).generator, n, m, needles, filler) for i in range(count)
    )
    return SyntheticTask("needle_copy", n, W, m, vocab, seed, count, examples)
