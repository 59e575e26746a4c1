"""Knowledge graph storage: vocabularies, indexed triple stores, inductive dataset bundles.

A dataset bundle holds two entity-disjoint graphs (train graph and test graph),
each split into train/valid/test, sharing a single frozen relation vocabulary.
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

FWD = 0  # traverse an edge (h, r, t) from h to t
INV = 1  # traverse against the stored direction

DATASET_ALIASES = {"fb15k-237": "fb237", "nell-995": "nell", "wn18rr": "WN18RR"}


class DataError(Exception):
    """Malformed or inconsistent dataset files."""


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Query(NamedTuple):
    """A link-prediction query.

    direction FWD means (anchor, relation, ?); direction INV means (?, relation, anchor).
    """

    anchor: int
    relation: int
    direction: int

    @classmethod
    def tail_query(cls, head: int, relation: int) -> "Query":
        return cls(head, relation, FWD)

    @classmethod
    def head_query(cls, relation: int, tail: int) -> "Query":
        return cls(tail, relation, INV)


class Vocab:
    """Bijection between names and dense integer ids, optionally frozen."""

    def __init__(self) -> None:
        self._ids: dict[str, int] = {}
        self._names: list[str] = []
        self._frozen = False

    def add(self, name: str) -> int:
        got = self._ids.get(name)
        if got is not None:
            return got
        if self._frozen:
            raise DataError(f"unknown name {name!r} in frozen vocabulary")
        new_id = len(self._names)
        self._ids[name] = new_id
        self._names.append(name)
        return new_id

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, ident: int) -> str:
        return self._names[ident]

    def freeze(self) -> None:
        self._frozen = True

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def names(self) -> list[str]:
        return list(self._names)


class KnowledgeGraph:
    """Immutable, deduplicated triple store indexed by (entity, relation, direction).

    Neighbor lists are sorted by entity id, so all traversals are deterministic.
    The entity/relation vocabularies may cover more entities than appear in this
    split's triples; isolated entities simply have empty adjacency.
    """

    def __init__(
        self,
        entity_vocab: Vocab,
        relation_vocab: Vocab,
        triples: Iterable[Triple],
    ) -> None:
        self.entity_vocab = entity_vocab
        self.relation_vocab = relation_vocab
        n_ent = len(entity_vocab)
        n_rel = len(relation_vocab)
        seen = set()
        for t in triples:
            if not (0 <= t.head < n_ent and 0 <= t.tail < n_ent):
                raise DataError(f"entity id out of range in {t}")
            if not (0 <= t.relation < n_rel):
                raise DataError(f"relation id out of range in {t}")
            seen.add(Triple(*t))
        self.triples: list[Triple] = sorted(seen)
        self.triple_set: frozenset[Triple] = frozenset(self.triples)

        adj: list[dict[int, list[int]]] = [dict() for _ in range(n_ent)]
        for h, r, t in self.triples:
            adj[h].setdefault(r * 2 + FWD, []).append(t)
            adj[t].setdefault(r * 2 + INV, []).append(h)
        self._adj: list[dict[int, tuple[int, ...]]] = [
            {k: tuple(sorted(v)) for k, v in sorted(d.items())} for d in adj
        ]
        # flat (relation, direction, neighbor) lists for uniform random walks
        self._edges: list[tuple[tuple[int, int, int], ...]] = [
            tuple(
                (key // 2, key % 2, nbr)
                for key, nbrs in d.items()
                for nbr in nbrs
            )
            for d in self._adj
        ]
        self._edge_arrays = None

    @property
    def num_entities(self) -> int:
        return len(self.entity_vocab)

    @property
    def num_relations(self) -> int:
        return len(self.relation_vocab)

    def __len__(self) -> int:
        return len(self.triples)

    def neighbors(self, entity: int, relation: int, direction: int) -> tuple[int, ...]:
        """Sorted entity ids reachable from `entity` via `relation` in `direction`."""
        if not 0 <= entity < self.num_entities:
            raise ValueError(f"entity id {entity} out of range")
        if not 0 <= relation < self.num_relations:
            raise ValueError(f"relation id {relation} out of range")
        return self._adj[entity].get(relation * 2 + direction, ())

    def edges_of(self, entity: int) -> tuple[tuple[int, int, int], ...]:
        """All (relation, direction, neighbor) edges leaving `entity`, both directions."""
        return self._edges[entity]

    def triple_index(self, triple: Triple) -> int | None:
        """Position of `triple` in the sorted triple list, or None if absent."""
        i = bisect.bisect_left(self.triples, triple)
        if i < len(self.triples) and self.triples[i] == triple:
            return i
        return None

    def has_edge(self, src: int, relation: int, direction: int, dst: int) -> bool:
        nbrs = self._adj[src].get(relation * 2 + direction, ())
        i = bisect.bisect_left(nbrs, dst)
        return i < len(nbrs) and nbrs[i] == dst

    def connecting(self, src: int, dst: int) -> list[tuple[int, int]]:
        """All (relation, direction) labels of edges from src to dst."""
        out = []
        for key, nbrs in self._adj[src].items():
            i = bisect.bisect_left(nbrs, dst)
            if i < len(nbrs) and nbrs[i] == dst:
                out.append((key // 2, key % 2))
        return out

    def bfs_distance(self, source: int, cap: int = 5) -> list[int]:
        """Undirected, relation-agnostic hop distances from `source`.

        Returns a dense map (list indexed by entity id). Distances above `cap`
        and unreachable entities are reported as the overflow sentinel cap + 1.
        """
        if not 0 <= source < self.num_entities:
            raise ValueError(f"entity id {source} out of range")
        sentinel = cap + 1
        dist = [sentinel] * self.num_entities
        dist[source] = 0
        queue = deque([source])
        while queue:
            cur = queue.popleft()
            d = dist[cur]
            if d >= cap:
                continue
            for _, _, nbr in self._edges[cur]:
                if dist[nbr] == sentinel:
                    dist[nbr] = d + 1
                    queue.append(nbr)
        return dist

    def edge_arrays(self):
        """(src, dst, rel) int64 arrays over all triples plus inverses.

        Inverse edges use relation id r + num_relations. Cached.
        """
        if self._edge_arrays is None:
            n_rel = self.num_relations
            h = np.fromiter((t.head for t in self.triples), dtype=np.int64, count=len(self.triples))
            r = np.fromiter((t.relation for t in self.triples), dtype=np.int64, count=len(self.triples))
            t_ = np.fromiter((t.tail for t in self.triples), dtype=np.int64, count=len(self.triples))
            src = np.concatenate([h, t_])
            dst = np.concatenate([t_, h])
            rel = np.concatenate([r, r + n_rel])
            self._edge_arrays = (src, dst, rel)
        return self._edge_arrays


@dataclass
class GraphSplits:
    """Train/valid/test splits of one graph, sharing vocabularies."""

    train: KnowledgeGraph
    valid: KnowledgeGraph
    test: KnowledgeGraph

    def __iter__(self) -> Iterator[KnowledgeGraph]:
        return iter((self.train, self.valid, self.test))

    @property
    def entity_vocab(self) -> Vocab:
        return self.train.entity_vocab

    def union_triples(self) -> set[Triple]:
        return set().union(*(kg.triple_set for kg in self))


@dataclass
class DatasetBundle:
    """An inductive benchmark: entity-disjoint train and test graphs."""

    name: str
    version: str
    train_graphs: GraphSplits
    test_graphs: GraphSplits
    relation_vocab: Vocab


def read_triple_lines(path: Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def _load_splits(
    directory: Path,
    relation_vocab: Vocab,
) -> GraphSplits:
    directory = Path(directory)
    raw = {}
    entity_vocab = Vocab()
    for split in ("train", "valid", "test"):
        path = directory / f"{split}.txt"
        if not path.exists():
            raise DataError(f"missing split file {path}")
        rows = read_triple_lines(path)
        triples = []
        for h, r, t in rows:
            triples.append(
                Triple(entity_vocab.add(h), relation_vocab.add(r), entity_vocab.add(t))
            )
        raw[split] = triples
    kwargs = {
        split: KnowledgeGraph(entity_vocab, relation_vocab, triples)
        for split, triples in raw.items()
    }
    return GraphSplits(**kwargs)


def load_dataset(root: Path | str, dataset: str, version: str) -> DatasetBundle:
    """Load `{dataset}_{version}` and `{dataset}_{version}_ind` from `root`.

    The relation vocabulary is built from the train-graph files and frozen;
    test-graph files introducing new relations abort with DataError. Entity
    name sets of the two graphs must be disjoint.
    """
    root = Path(root)
    dataset = DATASET_ALIASES.get(dataset.lower(), dataset)
    train_dir = root / f"{dataset}_{version}"
    test_dir = root / f"{dataset}_{version}_ind"
    if not train_dir.is_dir():
        raise DataError(f"dataset directory {train_dir} not found")
    if not test_dir.is_dir():
        raise DataError(f"dataset directory {test_dir} not found")
    relation_vocab = Vocab()
    train_graphs = _load_splits(train_dir, relation_vocab)
    relation_vocab.freeze()
    test_graphs = _load_splits(test_dir, relation_vocab)
    shared = set(train_graphs.entity_vocab.names()) & set(test_graphs.entity_vocab.names())
    if shared:
        sample = sorted(shared)[:3]
        raise DataError(
            f"train/test entity vocabularies overlap ({len(shared)} shared, e.g. {sample})"
        )
    return DatasetBundle(dataset, version, train_graphs, test_graphs, relation_vocab)


def write_triples(kg: KnowledgeGraph, path: Path | str) -> None:
    """Serialize a graph back to TSV (id-sorted, so reload reproduces the same ids)."""
    ent, rel = kg.entity_vocab, kg.relation_vocab
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.triples:
            fh.write(f"{ent.name(h)}\t{rel.name(r)}\t{ent.name(t)}\n")


def known_answers(graphs: Iterable[KnowledgeGraph], query: Query) -> set[int]:
    """All entities answering `query` in any of the given graphs."""
    out: set[int] = set()
    for kg in graphs:
        out.update(kg.neighbors(query.anchor, query.relation, query.direction))
    return out


def filter_set(bundle: DatasetBundle, query: Query, gold: int) -> set[int]:
    """Known correct answers other than `gold`, over all test-graph splits."""
    answers = known_answers(bundle.test_graphs, query)
    answers.discard(gold)
    return answers
