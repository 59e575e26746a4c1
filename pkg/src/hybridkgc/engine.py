"""Applying mined rules to link prediction queries and ranking the evidence.

apply_rules partitions the candidate universe into entities carrying rule
evidence (with their ground-rule matches) and the zero-confidence rest.
Rankers order the supported side only; composing with a fallback over the
rest is the pipeline's job.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cmp_to_key
from typing import Iterable, Sequence

from .kg import FWD, INV, KnowledgeGraph, Query, Triple, Vocab
from .rules import BodyAtom, ClosedPathRule, RuleSet, rule_to_text

DEFAULT_MAX_MATCHES = 100


@dataclass(frozen=True)
class GroundRuleMatch:
    """One instantiation of a rule body witnessed in the fact graph."""

    rule: ClosedPathRule
    confidence: float
    body_triples: tuple[Triple, ...]

    def endpoints(self) -> tuple[int, int]:
        """(X0, Xn) of the instantiated body chain."""
        first = self.body_triples[0]
        r0, d0 = self.rule.body[0]
        x0 = first.head if d0 == FWD else first.tail
        last = self.body_triples[-1]
        rn, dn = self.rule.body[-1]
        xn = last.tail if dn == FWD else last.head
        return x0, xn


@dataclass
class Evidence:
    """All retained matches for one candidate entity."""

    candidate: int
    matches: list[GroundRuleMatch]
    distinct_rule_confidences: tuple[float, ...]

    @classmethod
    def from_matches(cls, candidate: int, matches: list[GroundRuleMatch]) -> "Evidence":
        by_rule: dict[ClosedPathRule, float] = {}
        for m in matches:
            by_rule.setdefault(m.rule, m.confidence)
        confs = tuple(sorted(by_rule.values(), reverse=True))
        return cls(candidate, matches, confs)


@dataclass
class CandidatePartition:
    """Query-specific split of the candidate universe by rule support."""

    query: Query
    supported: list[Evidence]
    unsupported: set[int]

    def evidence_for(self, entity: int) -> Evidence | None:
        for ev in self.supported:
            if ev.candidate == entity:
                return ev
        return None


def _match_order_key(m: GroundRuleMatch):
    return (-m.confidence, m.rule, m.body_triples)


def apply_rules(
    fact_graph: KnowledgeGraph,
    rules: RuleSet,
    query: Query,
    max_matches_per_candidate: int = DEFAULT_MAX_MATCHES,
    exclude: Triple | None = None,
) -> CandidatePartition:
    """Ground every rule whose head matches the query relation at the anchor.

    Tail queries traverse bodies forward from the anchor; head queries
    traverse the body reversed with directions flipped, so recorded body
    triples always read in body order from X0 to Xn. At most
    `max_matches_per_candidate` matches are retained per candidate, keeping
    the highest confidences (rules are processed in descending confidence).
    `exclude` hides one fact-graph edge from every body walk (both
    directions); training on known triples uses it so the answer's own edge
    never supplies its evidence.
    """
    if not 0 <= query.anchor < fact_graph.num_entities:
        raise ValueError(f"query anchor {query.anchor} out of range")
    if not 0 <= query.relation < fact_graph.num_relations:
        raise ValueError(f"query relation {query.relation} out of range")
    adj = fact_graph._adj
    matches: dict[int, list[GroundRuleMatch]] = {}
    for rule in rules.rules_for(query.relation):
        confidence = rules.stats[rule].confidence
        if query.direction == FWD:
            walk = rule.body
        else:
            walk = tuple(BodyAtom(r, 1 - d) for r, d in reversed(rule.body))
        # iterative DFS; each frame: (node, depth, triples so far)
        stack: list[tuple[int, int, tuple[Triple, ...]]] = [(query.anchor, 0, ())]
        last = len(walk) - 1
        while stack:
            node, depth, sofar = stack.pop()
            r, d = walk[depth]
            nbrs = adj[node].get(r * 2 + d, ())
            for nbr in nbrs:
                triple = Triple(node, r, nbr) if d == FWD else Triple(nbr, r, node)
                if exclude is not None and triple == exclude:
                    continue
                chain = sofar + (triple,)
                if depth == last:
                    if query.direction == FWD:
                        candidate, body_triples = nbr, chain
                    else:
                        candidate, body_triples = nbr, tuple(reversed(chain))
                    bucket = matches.setdefault(candidate, [])
                    if len(bucket) < max_matches_per_candidate:
                        bucket.append(GroundRuleMatch(rule, confidence, body_triples))
                else:
                    stack.append((nbr, depth + 1, chain))
    supported = []
    for candidate in sorted(matches):
        ms = sorted(matches[candidate], key=_match_order_key)
        supported.append(Evidence.from_matches(candidate, ms))
    unsupported = set(range(fact_graph.num_entities)) - set(matches)
    return CandidatePartition(query, supported, unsupported)


# ---------------------------------------------------------------------------
# ranking the supported side


def compare_confidence_profiles(a: Sequence[float], b: Sequence[float]) -> int:
    """Lexicographic comparison of descending confidence lists.

    Returns -1 when `a` ranks better. A proper prefix ranks after its
    extensions: the longer list keeps promising positive confidence where
    the shorter one has run out.
    """
    for x, y in zip(a, b):
        if x != y:
            return -1 if x > y else 1
    if len(a) == len(b):
        return 0
    return -1 if len(a) > len(b) else 1


def rank_max_tiebreak(partition: CandidatePartition) -> list[Evidence]:
    """Order supported candidates by max confidence with full-profile tie-breaking.

    Profiles equal all the way down fall back to ascending entity id. The
    profile is invariant under duplicated matches since it is built from
    distinct rules only.
    """

    def cmp(a: Evidence, b: Evidence) -> int:
        c = compare_confidence_profiles(a.distinct_rule_confidences, b.distinct_rule_confidences)
        if c != 0:
            return c
        return -1 if a.candidate < b.candidate else (1 if a.candidate > b.candidate else 0)

    return sorted(partition.supported, key=cmp_to_key(cmp))


def noisy_or_score(confidences: Iterable[float]) -> float:
    prod = 1.0
    for c in confidences:
        prod *= 1.0 - c
    return 1.0 - prod


def rank_noisy_or(partition: CandidatePartition) -> list[tuple[Evidence, float]]:
    """Order supported candidates by noisy-or over their distinct rules' confidences."""
    scored = [
        (ev, noisy_or_score(ev.distinct_rule_confidences)) for ev in partition.supported
    ]
    scored.sort(key=lambda pair: (-pair[1], pair[0].candidate))
    return scored


def evidence_to_json(
    evidence: Evidence,
    entity_vocab: Vocab,
    relation_vocab: Vocab,
) -> dict:
    """JSON-friendly dump of one candidate's matches for debugging."""
    from .rules import RuleStats

    items = []
    for m in evidence.matches:
        stats = RuleStats(0, 0, m.confidence)
        text = rule_to_text(m.rule, stats, relation_vocab).split("\t")[3]
        items.append(
            {
                "rule": text,
                "confidence": m.confidence,
                "path": [
                    [entity_vocab.name(t.head), relation_vocab.name(t.relation), entity_vocab.name(t.tail)]
                    for t in m.body_triples
                ],
            }
        )
    return {
        "candidate": entity_vocab.name(evidence.candidate),
        "distinct_rule_confidences": list(evidence.distinct_rule_confidences),
        "matches": items,
    }
