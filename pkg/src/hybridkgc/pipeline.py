"""Hybrid ranking strategies: a primary ranker over rule-supported candidates
composed with a fallback ordering over the zero-evidence rest.

The fallback only ever orders entities the primary could not rank; the two
blocks are concatenated, never interleaved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import (
    CandidatePartition,
    Evidence,
    noisy_or_score,
    rank_max_tiebreak,
    rank_noisy_or,
)
from .kg import INV, KnowledgeGraph, Query, Vocab
from .rankers import NbfConfig, ParamStore, gnn_forward, nbf_forward
from .rig import build_rig, top_ground_rules
from .util import derive_seed

PRIMARY_STRATEGIES = ("rule-max", "noisy-or", "rgcn", "compgcn", "nbf")
FALLBACK_STRATEGIES = ("shuffle", "nbf")
_STRATEGY_ALIASES = {"anyburl-max": "rule-max", "nbfnet": "nbf"}


@dataclass(frozen=True)
class StrategySpec:
    """primary+fallback pair, e.g. rule-max+shuffle or noisy-or+nbf."""

    primary: str
    fallback: str

    def __post_init__(self):
        if self.primary not in PRIMARY_STRATEGIES:
            raise ValueError(f"unknown primary strategy {self.primary!r}")
        if self.fallback not in FALLBACK_STRATEGIES:
            raise ValueError(f"unknown fallback strategy {self.fallback!r}")

    @classmethod
    def parse(cls, text: str) -> "StrategySpec":
        if "+" not in text:
            raise ValueError(f"strategy must look like primary+fallback, got {text!r}")
        primary, fallback = text.split("+", 1)
        primary = _STRATEGY_ALIASES.get(primary, primary)
        fallback = _STRATEGY_ALIASES.get(fallback, fallback)
        return cls(primary, fallback)

    def __str__(self) -> str:
        return f"{self.primary}+{self.fallback}"


@dataclass(frozen=True)
class RankedEntry:
    """One candidate in a hybrid ranking.

    tie_key identifies the tie group: entries with equal (provenance,
    tie_key) are considered tied for metric purposes. Shuffled fallback
    entries all share tie_key None (pure chance ordering).
    """

    entity: int
    score: float | None
    tie_key: tuple | float | None
    provenance: str  # "primary" or "fallback"


@dataclass
class HybridRanking:
    query: Query
    entries: list[RankedEntry]

    def position_of(self, entity: int) -> int:
        for i, e in enumerate(self.entries):
            if e.entity == entity:
                return i
        raise KeyError(f"entity {entity} not in ranking")


@dataclass
class StrategyModels:
    """Everything a strategy may need at query time."""

    fact_graph: KnowledgeGraph
    aggregator: tuple[str, object, ParamStore] | None = None  # (arch, config, store)
    nbf: tuple[NbfConfig, ParamStore] | None = None
    rig_top_k: int = 5
    _nbf_cache: dict = field(default_factory=dict)
    _agg_cache: dict = field(default_factory=dict)

    def nbf_scores(self, query: Query) -> np.ndarray:
        """Full-entity score vector for a query, memoized."""
        if self.nbf is None:
            raise ValueError("strategy requires a trained path-message ranker")
        key = (query.anchor, query.relation, query.direction)
        got = self._nbf_cache.get(key)
        if got is None:
            config, store = self.nbf
            qrel = query.relation + (
                self.fact_graph.num_relations if query.direction == INV else 0
            )
            got = nbf_forward(store, config, self.fact_graph, query.anchor, qrel)
            self._nbf_cache[key] = got
        return got

    def aggregator_scores(self, query: Query, evidences: Sequence[Evidence]) -> np.ndarray:
        """Per-candidate aggregator confidences, memoized per (query, candidate)."""
        if self.aggregator is None:
            raise ValueError("strategy requires a trained aggregator")
        arch, config, store = self.aggregator
        n_rel = self.fact_graph.num_relations
        qrel = query.relation + (n_rel if query.direction == INV else 0)
        qkey = (query.anchor, query.relation, query.direction)
        fresh = [ev for ev in evidences if (qkey, ev.candidate) not in self._agg_cache]
        for chunk_at in range(0, len(fresh), 256):
            chunk = fresh[chunk_at : chunk_at + 256]
            rigs = [
                build_rig(top_ground_rules(ev, self.rig_top_k), query.anchor, ev.candidate)
                for ev in chunk
            ]
            scores = gnn_forward(store, arch, config, rigs, [qrel] * len(rigs), n_rel)
            for ev, s in zip(chunk, scores):
                self._agg_cache[(qkey, ev.candidate)] = float(s)
        return np.array([self._agg_cache[(qkey, ev.candidate)] for ev in evidences])


def _primary_entries(
    query: Query, partition: CandidatePartition, spec: StrategySpec, models: StrategyModels
) -> list[RankedEntry]:
    if spec.primary == "rule-max":
        ordered = rank_max_tiebreak(partition)
        return [
            RankedEntry(
                ev.candidate,
                ev.distinct_rule_confidences[0],
                tuple(ev.distinct_rule_confidences),
                "primary",
            )
            for ev in ordered
        ]
    if spec.primary == "noisy-or":
        return [
            RankedEntry(ev.candidate, score, score, "primary")
            for ev, score in rank_noisy_or(partition)
        ]
    if spec.primary in ("rgcn", "compgcn"):
        evidences = partition.supported
        scores = models.aggregator_scores(query, evidences)
        order = sorted(
            range(len(evidences)), key=lambda i: (-scores[i], evidences[i].candidate)
        )
        return [
            RankedEntry(evidences[i].candidate, float(scores[i]), float(scores[i]), "primary")
            for i in order
        ]
    if spec.primary == "nbf":
        scores = models.nbf_scores(query)
        cands = sorted(
            (ev.candidate for ev in partition.supported), key=lambda c: (-scores[c], c)
        )
        return [RankedEntry(c, float(scores[c]), float(scores[c]), "primary") for c in cands]
    raise ValueError(f"unknown primary strategy {spec.primary!r}")


def _fallback_entries(
    query: Query,
    rest: Sequence[int],
    spec: StrategySpec,
    models: StrategyModels,
    rng: np.random.Generator,
) -> list[RankedEntry]:
    if spec.fallback == "shuffle":
        order = list(rest)
        rng.shuffle(order)
        return [RankedEntry(int(e), None, None, "fallback") for e in order]
    if spec.fallback == "nbf":
        scores = models.nbf_scores(query)
        order = sorted(rest, key=lambda c: (-scores[c], c))
        return [RankedEntry(int(c), float(scores[c]), float(scores[c]), "fallback") for c in order]
    raise ValueError(f"unknown fallback strategy {spec.fallback!r}")


def compose(query: Query, primary: list[RankedEntry], fallback: list[RankedEntry]) -> HybridRanking:
    """Concatenate the two blocks; overlapping entities are an error."""
    seen = {e.entity for e in primary}
    overlap = seen & {e.entity for e in fallback}
    if overlap:
        raise ValueError(f"primary and fallback rankings overlap on {sorted(overlap)[:5]}")
    return HybridRanking(query, primary + fallback)


def run_strategy(
    query: Query,
    partition: CandidatePartition,
    spec: StrategySpec,
    models: StrategyModels,
    shuffle_seed: int = 0,
) -> HybridRanking:
    """Rank rule-supported candidates by the primary strategy, the rest by the
    fallback. The shuffle rng is seeded from the given seed and the query, so
    every query gets its own reproducible stream.
    """
    rng = np.random.default_rng(
        derive_seed(shuffle_seed, query.anchor, query.relation, query.direction)
    )
    primary = _primary_entries(query, partition, spec, models)
    fallback = _fallback_entries(query, sorted(partition.unsupported), spec, models, rng)
    return compose(query, primary, fallback)


def ranking_to_json(ranking: HybridRanking, entity_vocab: Vocab, relation_vocab: Vocab) -> dict:
    q = ranking.query
    pattern = (
        f"({entity_vocab.name(q.anchor)}, {relation_vocab.name(q.relation)}, ?)"
        if q.direction != INV
        else f"(?, {relation_vocab.name(q.relation)}, {entity_vocab.name(q.anchor)})"
    )
    return {
        "query": pattern,
        "entities": [entity_vocab.name(e.entity) for e in ranking.entries],
        "scores": [e.score for e in ranking.entries],
        "provenance": [e.provenance for e in ranking.entries],
    }
