"""Sentence-to-code-line tracing and its TopK metrics.

Each gold mapping group (sentences judged semantically equivalent) queries
the entity's candidate pool once per sentence.  A group scores a *hit* at K
when any of its sentences ranks any of the group's gold lines within the top
K.  Two pairwise metrics combine an AF-or-VT side with the CP side per CVE:

* gold-input value   = sum_i a_i_T * cp_i_T / sum_i A_i_T * CP_i_T
* end-to-end value   = sum_i a_i * cp_i / sum_i (A_i_T + A_i_F) * (CP_i_T + CP_i_F)

where the lowercase counters count groups hit at K (end-to-end restricted to
extractor true-positive sentences) and the uppercase ones count gold groups
and extractor false positives.  The AF/VT pairing is intentionally
unavailable: trigger lines live in the old file version and fix lines in the
new one, so that pair never grounds a joint analysis.

A sentence gold-labeled with both entities of a pair would pair with itself;
such group pairs are excluded from both sums and reported via
``PairAccumulator.excluded_pairs``.  Without overlapping groups the pair
counts reduce exactly to the products above.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import CodeLine
from .errors import GoldOutsidePool, VulnTraceError
from .scorers import Scorer

log = logging.getLogger(__name__)

PAIR_A_SIDES = ("VT", "AF")  # the CP side is fixed; AF/VT_Code does not exist


@dataclass(frozen=True)
class TraceQuery:
    cve_id: str
    entity: str
    sentence_group: tuple[str, ...]  # sorted sentence keys
    query_texts: tuple[str, ...]  # aligned with sentence_group

    def __post_init__(self):
        if not self.sentence_group:
            raise VulnTraceError("trace query needs at least one sentence")
        if len(self.sentence_group) != len(self.query_texts):
            raise VulnTraceError("sentence keys and texts must align")


@dataclass(frozen=True)
class ScoredCandidate:
    line: str  # CodeLine key
    score: float


@dataclass(frozen=True)
class TraceRanking:
    """One sentence's full ordering of the candidate pool."""

    query: TraceQuery
    sentence_key: str
    ranked: tuple[ScoredCandidate, ...]

    def top(self, k: int) -> tuple[str, ...]:
        return tuple(c.line for c in self.ranked[:k])


def rank_candidates(
    scorer: Scorer, query: TraceQuery, pool: Sequence[CodeLine]
) -> list[TraceRanking]:
    """One ranking per sentence in the group, each a permutation of the pool.

    Ties break on (file, side, line_no) so repeated runs are byte-identical.
    """
    if not pool:
        raise VulnTraceError(f"{query.cve_id}: empty pool reached the ranker")
    contents = [line.content for line in pool]
    rankings: list[TraceRanking] = []
    for sentence_key, text in zip(query.sentence_group, query.query_texts):
        scores = scorer.score_pool(text, contents)
        if len(scores) != len(pool):
            raise VulnTraceError("scorer returned a mismatched score list")
        order = sorted(
            range(len(pool)), key=lambda i: (-scores[i], pool[i].sort_key())
        )
        rankings.append(
            TraceRanking(
                query=query,
                sentence_key=sentence_key,
                ranked=tuple(
                    ScoredCandidate(line=pool[i].key, score=float(scores[i]))
                    for i in order
                ),
            )
        )
    return rankings


def hit_at_k(
    query: TraceQuery,
    gold_lines: Iterable[str],
    rankings: Sequence[TraceRanking],
    k: int,
) -> bool:
    """Group hit: any sentence ranks any gold line within the top k."""
    if k < 1:
        raise VulnTraceError(f"k must be >= 1, got {k}")
    gold = set(gold_lines)
    if rankings:
        pool_keys = {c.line for c in rankings[0].ranked}
        for line in sorted(gold):
            if line not in pool_keys:
                raise GoldOutsidePool(query.cve_id, query.entity, line)
    for ranking in rankings:
        if gold.intersection(ranking.top(k)):
            return True
    return False


@dataclass(frozen=True)
class GroupOutcome:
    """Hit record for one gold mapping group under one scorer."""

    cve_id: str
    project: str
    entity: str
    sentence_keys: frozenset[str]
    hits: Mapping[int, bool]  # k -> hit over all group sentences
    tp_hits: Mapping[int, bool] = field(default_factory=dict)  # k -> hit over TP sentences


def topk_single(outcomes: Iterable[GroupOutcome], entity: str, k: int) -> float | None:
    """Fraction of the entity's groups hit at k; None when there are no groups."""
    groups = [o for o in outcomes if o.entity == entity]
    if not groups:
        return None
    return sum(1 for o in groups if o.hits.get(k, False)) / len(groups)


def topk_single_tp(outcomes: Iterable[GroupOutcome], entity: str, k: int) -> float | None:
    """End-to-end variant: hits restricted to extractor true positives."""
    groups = [o for o in outcomes if o.entity == entity]
    if not groups:
        return None
    return sum(1 for o in groups if o.tp_hits.get(k, False)) / len(groups)


@dataclass
class PairAccumulator:
    """Per-CVE counters behind the pair formulas, for one A-side entity.

    ``a_T``/``cp_T``/``a``/``cp`` map k to counts of hit groups; ``pairs_T``
    and the per-k pair hit counts realize the products of those counters with
    self-pairing group pairs removed.
    """

    cve_id: str
    a_side: str
    a_T: dict[int, int]
    cp_T: dict[int, int]
    a: dict[int, int]
    cp: dict[int, int]
    A_T: int
    A_F: int
    CP_T: int
    CP_F: int
    pairs_T: int
    pair_hits_T: dict[int, int]
    pair_hits_tp: dict[int, int]
    excluded_pairs: int


def build_pair_accumulator(
    cve_id: str,
    a_side: str,
    a_groups: Sequence[GroupOutcome],
    cp_groups: Sequence[GroupOutcome],
    k_values: Sequence[int],
    a_false_positives: int = 0,
    cp_false_positives: int = 0,
) -> PairAccumulator:
    if a_side not in PAIR_A_SIDES:
        raise VulnTraceError(f"pair metrics pair {PAIR_A_SIDES} with CP, not {a_side!r}")
    a_T = {k: sum(1 for g in a_groups if g.hits.get(k, False)) for k in k_values}
    cp_T = {k: sum(1 for g in cp_groups if g.hits.get(k, False)) for k in k_values}
    a = {k: sum(1 for g in a_groups if g.tp_hits.get(k, False)) for k in k_values}
    cp = {k: sum(1 for g in cp_groups if g.tp_hits.get(k, False)) for k in k_values}

    pairs_T = 0
    excluded = 0
    pair_hits_T = {k: 0 for k in k_values}
    pair_hits_tp = {k: 0 for k in k_values}
    for g in a_groups:
        for h in cp_groups:
            if g.sentence_keys & h.sentence_keys:
                excluded += 1
                log.warning(
                    "%s: sentence(s) %s are gold for both %s and CP; "
                    "excluding the self-pair from %s/CP_Code",
                    cve_id,
                    sorted(g.sentence_keys & h.sentence_keys),
                    a_side,
                    a_side,
                )
                continue
            pairs_T += 1
            for k in k_values:
                if g.hits.get(k, False) and h.hits.get(k, False):
                    pair_hits_T[k] += 1
                if g.tp_hits.get(k, False) and h.tp_hits.get(k, False):
                    pair_hits_tp[k] += 1

    return PairAccumulator(
        cve_id=cve_id,
        a_side=a_side,
        a_T=a_T,
        cp_T=cp_T,
        a=a,
        cp=cp,
        A_T=len(a_groups),
        A_F=a_false_positives,
        CP_T=len(cp_groups),
        CP_F=cp_false_positives,
        pairs_T=pairs_T,
        pair_hits_T=pair_hits_T,
        pair_hits_tp=pair_hits_tp,
        excluded_pairs=excluded,
    )


def pair_topk_gold(accumulators: Sequence[PairAccumulator], k: int) -> float | None:
    """Gold-input pair accuracy; None when no CVE contributes a pair."""
    numerator = sum(acc.pair_hits_T.get(k, 0) for acc in accumulators)
    denominator = sum(acc.pairs_T for acc in accumulators)
    if denominator == 0:
        return None
    return numerator / denominator


def pair_topk_end_to_end(accumulators: Sequence[PairAccumulator], k: int) -> float | None:
    """End-to-end pair accuracy with extractor false positives in the denominator."""
    numerator = 0
    denominator = 0
    for acc in accumulators:
        numerator += acc.pair_hits_tp.get(k, 0)
        denominator += (
            acc.pairs_T
            + acc.A_T * acc.CP_F
            + acc.A_F * acc.CP_T
            + acc.A_F * acc.CP_F
        )
    if denominator == 0:
        return None
    return numerator / denominator
