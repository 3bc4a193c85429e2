"""Ranking metrics for the db_id router.

Every query has one relevant label by default. Passing a set of labels as
``gold`` switches that query to multi-gold scoring: AP averages precision
over the relevant hits, NDCG normalises by the ideal ordering and R@1
divides by the number of relevant labels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence


@dataclass(frozen=True)
class RankedPrediction:
    gold_class: str | frozenset
    ranked_classes: tuple[str, ...]
    scores: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not self.ranked_classes:
            raise ValueError("ranked_classes must be non-empty")
        if len(set(self.ranked_classes)) != len(self.ranked_classes):
            raise ValueError("ranked_classes must be distinct")

    @property
    def golds(self) -> frozenset:
        g = self.gold_class
        return g if isinstance(g, frozenset) else frozenset([g])

    def rank(self) -> int | None:
        """1-based rank of the first relevant class, None when absent."""
        for i, c in enumerate(self.ranked_classes, 1):
            if c in self.golds:
                return i
        return None


def _check(predictions):
    if not predictions:
        raise ValueError("need at least one prediction")


def average_precision(p: RankedPrediction) -> float:
    golds = p.golds
    hits, total = 0, 0.0
    for i, c in enumerate(p.ranked_classes, 1):
        if c in golds:
            hits += 1
            total += hits / i
    return total / len(golds)


def map_score(predictions: Sequence[RankedPrediction]) -> float:
    _check(predictions)
    return sum(average_precision(p) for p in predictions) / len(predictions)


def ndcg(p: RankedPrediction) -> float:
    golds = p.golds
    dcg = sum(1.0 / math.log2(i + 1) for i, c in enumerate(p.ranked_classes, 1) if c in golds)
    ideal = sum(1.0 / math.log2(i + 1) for i in range(1, min(len(golds), len(p.ranked_classes)) + 1))
    return dcg / ideal


def ndcg_score(predictions: Sequence[RankedPrediction]) -> float:
    _check(predictions)
    return sum(ndcg(p) for p in predictions) / len(predictions)


def precision_recall_at_1(predictions: Sequence[RankedPrediction]) -> tuple[float, float]:
    _check(predictions)
    p1 = r1 = 0.0
    for p in predictions:
        hit = p.ranked_classes[0] in p.golds
        p1 += hit
        r1 += hit / len(p.golds)
    n = len(predictions)
    return p1 / n, r1 / n


def within_top_k(predictions: Sequence[RankedPrediction], k: int = 5) -> int:
    return sum(1 for p in predictions if (r := p.rank()) is not None and r <= k)
