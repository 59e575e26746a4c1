"""Vocabularies, graph indexing, dataset loading, and filtering."""

import numpy as np
import pytest

from hybridkgc.kg import (
    FWD,
    INV,
    DataError,
    KnowledgeGraph,
    Query,
    Triple,
    Vocab,
    filter_set,
    known_answers,
    load_dataset,
    write_triples,
)

from conftest import make_kg, make_vocab, random_kg, write_dataset
from oracles import bruteforce_distance


class TestVocab:
    def test_add_is_idempotent(self):
        v = Vocab()
        assert v.add("x") == 0
        assert v.add("y") == 1
        assert v.add("x") == 0
        assert len(v) == 2

    def test_roundtrip_and_membership(self):
        v = make_vocab(["a", "b"])
        assert v.id("b") == 1
        assert v.name(1) == "b"
        assert "a" in v and "z" not in v
        assert v.names() == ["a", "b"]

    def test_frozen_rejects_new_names(self):
        v = make_vocab(["a"])
        with pytest.raises(DataError):
            v.add("b")
        assert v.add("a") == 0  # existing names stay fine


class TestKnowledgeGraph:
    def test_triples_sorted_and_deduplicated(self):
        kg = make_kg(3, 2, [(2, 1, 0), (0, 0, 1), (2, 1, 0)])
        assert kg.triples == [Triple(0, 0, 1), Triple(2, 1, 0)]
        assert len(kg.triple_set) == 2

    def test_neighbors_both_directions(self, chain_kg):
        assert chain_kg.neighbors(0, 0, FWD) == (1,)
        assert chain_kg.neighbors(1, 0, INV) == (0,)
        assert chain_kg.neighbors(1, 2, FWD) == ()

    def test_neighbors_sorted(self):
        kg = make_kg(4, 1, [(0, 0, 3), (0, 0, 1), (0, 0, 2)])
        assert kg.neighbors(0, 0, FWD) == (1, 2, 3)

    def test_has_edge_and_connecting(self, chain_kg):
        assert chain_kg.has_edge(0, 0, FWD, 1)
        assert chain_kg.has_edge(1, 0, INV, 0)
        assert not chain_kg.has_edge(1, 0, FWD, 0)
        assert (0, FWD) in chain_kg.connecting(0, 1)
        assert (0, INV) in chain_kg.connecting(1, 0)

    def test_bfs_distance_matches_bruteforce(self, rng):
        for _ in range(15):
            kg = random_kg(rng, 12, 3, 20)
            for a in range(0, 12, 3):
                dist = kg.bfs_distance(a, cap=4)
                for b in range(12):
                    assert dist[b] == bruteforce_distance(kg, a, b, 4)

    def test_edge_arrays_cover_both_directions(self, chain_kg):
        src, dst, rel = chain_kg.edge_arrays()
        n = len(chain_kg.triples)
        assert len(src) == 2 * n
        # inverse block mirrors the forward block with shifted relation ids
        assert list(src[n:]) == list(dst[:n])
        assert list(rel[n:]) == [r + chain_kg.num_relations for r in rel[:n]]

    def test_out_of_range_triple_rejected(self):
        with pytest.raises(DataError):
            make_kg(2, 1, [(0, 0, 5)])


class TestDatasetIO:
    def _tiny_splits(self):
        train = {
            "train": [("a", "r", "b"), ("b", "s", "c"), ("a", "r", "c")],
            "valid": [("a", "s", "b")],
            "test": [("c", "r", "a")],
        }
        ind = {
            "train": [("x", "r", "y"), ("y", "s", "z")],
            "valid": [("x", "s", "y")],
            "test": [("z", "r", "x")],
        }
        return train, ind

    def test_load_roundtrip(self, tmp_path):
        train, ind = self._tiny_splits()
        write_dataset(tmp_path, "toy", "v1", train, ind)
        bundle = load_dataset(tmp_path, "toy", "v1")
        assert bundle.name == "toy" and bundle.version == "v1"
        assert bundle.relation_vocab.names() == ["r", "s"]
        assert len(bundle.train_graphs.train.triples) == 3
        assert len(bundle.test_graphs.test.triples) == 1
        # entity universes are independent
        assert "a" in bundle.train_graphs.entity_vocab
        assert "a" not in bundle.test_graphs.entity_vocab

    def test_alias_resolution(self, tmp_path):
        train, ind = self._tiny_splits()
        write_dataset(tmp_path, "WN18RR", "v1", train, ind)
        bundle = load_dataset(tmp_path, "wn18rr", "v1")
        assert bundle.name == "WN18RR"

    def test_new_relation_in_test_graph_rejected(self, tmp_path):
        train, ind = self._tiny_splits()
        ind["test"] = [("z", "brandnew", "x")]
        write_dataset(tmp_path, "toy", "v1", train, ind)
        with pytest.raises(DataError):
            load_dataset(tmp_path, "toy", "v1")

    def test_overlapping_entities_rejected(self, tmp_path):
        train, ind = self._tiny_splits()
        ind["train"] = [("a", "r", "y")]
        write_dataset(tmp_path, "toy", "v1", train, ind)
        with pytest.raises(DataError):
            load_dataset(tmp_path, "toy", "v1")

    def test_malformed_line_rejected(self, tmp_path):
        train, ind = self._tiny_splits()
        write_dataset(tmp_path, "toy", "v1", train, ind)
        (tmp_path / "toy_v1" / "train.txt").write_text("a\tb\n")
        with pytest.raises(DataError):
            load_dataset(tmp_path, "toy", "v1")

    def test_missing_split_rejected(self, tmp_path):
        train, ind = self._tiny_splits()
        write_dataset(tmp_path, "toy", "v1", train, ind)
        (tmp_path / "toy_v1" / "valid.txt").unlink()
        with pytest.raises(DataError):
            load_dataset(tmp_path, "toy", "v1")

    def test_write_triples_roundtrip(self, tmp_path, chain_kg):
        path = tmp_path / "out.txt"
        write_triples(chain_kg, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0].split("\t") == ["e0", "r0", "e1"]
        assert len(lines) == len(chain_kg.triples)


class TestQueriesAndFilters:
    def test_query_constructors(self):
        q = Query.tail_query(3, 1)
        assert (q.anchor, q.relation, q.direction) == (3, 1, FWD)
        q = Query.head_query(1, 4)
        assert (q.anchor, q.relation, q.direction) == (4, 1, INV)

    def test_known_answers_unions_graphs(self, chain_kg):
        other = make_kg(3, 3, [(0, 0, 2)])
        got = known_answers([chain_kg, other], Query.tail_query(0, 0))
        assert got == {1, 2}

    def test_filter_set_excludes_gold(self, tmp_path):
        train = {
            "train": [("a", "r", "b")],
            "valid": [("a", "r", "c")],
            "test": [("a", "r", "d")],
        }
        ind = {
            "train": [("x", "r", "y"), ("x", "r", "w")],
            "valid": [("x", "r", "z")],
            "test": [("x", "r", "v"), ("u", "r", "v")],
        }
        write_dataset(tmp_path, "toy", "v1", train, ind)
        bundle = load_dataset(tmp_path, "toy", "v1")
        ev = bundle.test_graphs.entity_vocab
        q = Query.tail_query(ev.id("x"), 0)
        gold = ev.id("v")
        others = filter_set(bundle, q, gold)
        # every other known answer across the test-graph splits, gold excluded
        assert others == {ev.id("y"), ev.id("w"), ev.id("z")}
        assert gold not in others


DATA_ROOT = "data"


class TestVendoredData:
    def test_fb_v1_shape(self):
        bundle = load_dataset(DATA_ROOT, "fb15k-237", "v1")
        assert len(bundle.relation_vocab) == 180
        assert len(bundle.train_graphs.train.triples) == 4245
        assert len(bundle.test_graphs.test.triples) == 205

    def test_wn_v1_shape(self):
        bundle = load_dataset(DATA_ROOT, "wn18rr", "v1")
        assert len(bundle.relation_vocab) == 9
        assert len(bundle.train_graphs.train.triples) == 5410
        assert len(bundle.test_graphs.test.triples) == 188
