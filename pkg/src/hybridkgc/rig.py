"""Rule instantiation graphs: per-candidate subgraphs built from top ground rules.

The RIG for a (query, candidate) pair is the union of the body triples of the
highest-confidence ground rules supporting the candidate, stored with inverse
edges. Node features are concatenated one-hot encodings of each node's
within-RIG hop distance to the query anchor (head) and to the candidate (tail).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .kg import FWD, INV, Triple, Vocab
from .engine import Evidence, GroundRuleMatch

DEFAULT_TOP_K = 5
DEFAULT_DISTANCE_CAP = 5


@dataclass
class RuleInstantiationGraph:
    """A small labeled multigraph with designated head and tail nodes.

    nodes holds global entity ids in first-seen order; edges are
    (local_src, relation, direction, local_dst) with one forward and one
    inverse entry per underlying triple.
    """

    nodes: list[int]
    triples: list[Triple]
    edges: list[tuple[int, int, int, int]]
    head_local: int
    tail_local: int
    contributing: list[GroundRuleMatch]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


def top_ground_rules(evidence: Evidence, k: int = DEFAULT_TOP_K) -> list[GroundRuleMatch]:
    """The k highest-confidence matches, extended by all ties at the k-th value.

    Matches in Evidence are already sorted by confidence then deterministic
    keys, so the returned list is stable.
    """
    if k < 1:
        raise ValueError("k must be positive")
    ms = evidence.matches
    if len(ms) <= k:
        return list(ms)
    cutoff = ms[k - 1].confidence
    end = k
    while end < len(ms) and ms[end].confidence == cutoff:
        end += 1
    return list(ms[:end])


def build_rig(
    matches: list[GroundRuleMatch],
    head: int,
    tail: int,
) -> RuleInstantiationGraph:
    """Union the body triples of `matches` into one graph with inverse edges.

    `head` is the query anchor and `tail` the candidate entity. Every match
    must connect exactly these two endpoints. Local node indices follow
    first-seen order over the given match list, so the result is
    deterministic for a sorted input.
    """
    if not matches:
        raise ValueError("cannot build a rule instantiation graph from no matches")
    local: dict[int, int] = {}
    nodes: list[int] = []

    def intern(entity: int) -> int:
        got = local.get(entity)
        if got is not None:
            return got
        local[entity] = len(nodes)
        nodes.append(entity)
        return local[entity]

    intern(head)
    intern(tail)
    seen: set[Triple] = set()
    triples: list[Triple] = []
    for m in matches:
        x0, xn = m.endpoints()
        if {x0, xn} != {head, tail}:
            raise ValueError(
                f"match endpoints ({x0}, {xn}) do not connect head {head} and tail {tail}"
            )
        for t in m.body_triples:
            if t not in seen:
                seen.add(t)
                triples.append(t)
                intern(t.head)
                intern(t.tail)
    edges = []
    for t in triples:
        s, d = local[t.head], local[t.tail]
        edges.append((s, t.relation, FWD, d))
        edges.append((d, t.relation, INV, s))
    return RuleInstantiationGraph(
        nodes, triples, edges, local[head], local[tail], list(matches)
    )


def _local_distances(rig: RuleInstantiationGraph, source_local: int) -> list[int]:
    adj: list[list[int]] = [[] for _ in rig.nodes]
    for s, _, _, d in rig.edges:
        adj[s].append(d)
    dist = [-1] * len(rig.nodes)
    dist[source_local] = 0
    queue = deque([source_local])
    while queue:
        cur = queue.popleft()
        for nbr in adj[cur]:
            if dist[nbr] < 0:
                dist[nbr] = dist[cur] + 1
                queue.append(nbr)
    return dist


def featurize(rig: RuleInstantiationGraph, distance_cap: int = DEFAULT_DISTANCE_CAP) -> np.ndarray:
    """One row per node: one-hot(dist to head) concat one-hot(dist to tail).

    Distances are measured inside the RIG only. Each block has
    distance_cap + 2 buckets; distances beyond the cap (or unreachable,
    which cannot happen for connected RIGs) land in the overflow bucket.
    """
    width = distance_cap + 2
    d_head = _local_distances(rig, rig.head_local)
    d_tail = _local_distances(rig, rig.tail_local)
    feats = np.zeros((rig.num_nodes, 2 * width), dtype=np.float64)
    for i in range(rig.num_nodes):
        dh = d_head[i]
        dt = d_tail[i]
        bh = dh if 0 <= dh <= distance_cap else distance_cap + 1
        bt = dt if 0 <= dt <= distance_cap else distance_cap + 1
        feats[i, bh] = 1.0
        feats[i, width + bt] = 1.0
    return feats


def rig_to_dot(
    rig: RuleInstantiationGraph,
    entity_vocab: Vocab,
    relation_vocab: Vocab,
    distance_cap: int = DEFAULT_DISTANCE_CAP,
) -> str:
    """Graphviz rendering: nodes show entity names and (head, tail) distances.

    Only the forward edge of each underlying triple is drawn. The query
    anchor is drawn as a double circle, the candidate as a double octagon.
    """
    d_head = _local_distances(rig, rig.head_local)
    d_tail = _local_distances(rig, rig.tail_local)

    def esc(s: str) -> str:
        return s.replace("\\", "\\\\").replace('"', '\\"')

    lines = ["digraph rig {", "  rankdir=LR;", "  node [shape=ellipse];"]
    for i, ent in enumerate(rig.nodes):
        label = f"{esc(entity_vocab.name(ent))}\\n({d_head[i]}, {d_tail[i]})"
        shape = ""
        if i == rig.head_local:
            shape = ", shape=doublecircle"
        elif i == rig.tail_local:
            shape = ", shape=doubleoctagon"
        lines.append(f'  n{i} [label="{label}"{shape}];')
    local = {ent: i for i, ent in enumerate(rig.nodes)}
    for t in rig.triples:
        s, d = local[t.head], local[t.tail]
        lines.append(f'  n{s} -> n{d} [label="{esc(relation_vocab.name(t.relation))}"];')
    lines.append("}")
    return "\n".join(lines)
