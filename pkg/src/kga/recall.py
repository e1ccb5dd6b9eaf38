"""Gold-triple recall at multiples of the unit length."""

from __future__ import annotations

import logging
import math
from typing import Sequence

log = logging.getLogger(__name__)


def cutoff(alpha: float, unit: int) -> int:
    """``ceil(alpha * unit)``, with the product rounded to 9 decimals first so
    that e.g. ``3 * 2`` never becomes ``6.000000001``."""
    return math.ceil(round(alpha * unit, 9))


def instance_recall(ranking: Sequence[int], gold: Sequence[int], alpha: float) -> float:
    top = set(ranking[:cutoff(alpha, len(gold))])
    return sum(g in top for g in gold) / len(gold)


def recall_at_alpha(rankings: Sequence[Sequence[int]], golds: Sequence[Sequence[int]],
                    alphas: Sequence[float]) -> list[float]:
    """Mean fraction of gold triples ranked within the top ``ceil(alpha*|gold|)``.

    Instances with an empty gold list are skipped.
    """
    if len(rankings) != len(golds):
        raise ValueError("need one ranking per gold list")
    if any(a <= 0 for a in alphas):
        raise ValueError("alpha must be positive")
    pairs = [(r, g) for r, g in zip(rankings, golds) if len(g)]
    if len(pairs) < len(golds):
        log.warning("skipped %d instance(s) with no gold triples", len(golds) - len(pairs))
    if not pairs:
        return [0.0 for _ in alphas]
    return [sum(instance_recall(r, g, a) for r, g in pairs) / len(pairs) for a in alphas]


def random_recall_expectation(pool_sizes: Sequence[int], units: Sequence[int],
                              alphas: Sequence[float]) -> list[float]:
    """Expected recall of a uniformly random ranking.

    The number of gold triples in a random top-``c`` of a pool of ``P`` is
    hypergeometric with mean ``|gold| * c / P``, so each instance contributes
    ``min(c, P) / P``.
    """
    out = []
    for a in alphas:
        vals = [min(cutoff(a, u), p) / p for p, u in zip(pool_sizes, units)]
        out.append(sum(vals) / len(vals))
    return out
