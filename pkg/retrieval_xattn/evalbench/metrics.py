# retrieval_xattn/evalbench/metrics.py

from __future__ import annotations

from collections.abc import Iterable, Sequence

from ..errors import ArgumentError


def _occurs(candidate: tuple[int, ...], entity: tuple[int, ...]) -> bool:
    m = len(entity)
    if m == 0:
        return True
    return any(candidate[i : i + m] == entity for i in range(len(candidate) - m + 1))


def entity_mention_recall(candidate: Sequence[int], gold_entities: Iterable[Sequence[int]]) -> float:
    """Fraction of unique gold entities occurring contiguously in the candidate.

    An empty gold set scores 1.0 so corpus averages stay defined.
    """
    gold = {tuple(int(t) for t in e) for e in gold_entities}
    if not gold:
        return 1.0
    cand = tuple(int(t) for t in candidate)
    return sum(1 for e in gold if _occurs(cand, e)) / len(gold)


def needle_recall(generated: Sequence[int], gold_needles: Iterable[int]) -> float:
    return entity_mention_recall(generated, [(int(t),) for t in gold_needles])


def mean_needle_recall(generations: Sequence[Sequence[int]], golds: Sequence[Iterable[int]]) -> float:
    if len(generations) != len(golds):
        raise ArgumentError(f"{len(generations)} generations for {len(golds)} gold sets")
    if not generations:
        return 0.0
    return sum(needle_recall(g, gold) for g, gold in zip(generations, golds)) / len(generations)
