"""Metrics protocol: midpoint ranks, filtering, settings, dataset statistics."""

import numpy as np
import pytest

from hybridkgc.engine import apply_rules
from hybridkgc.evaluation import (
    EvalConfig,
    MetricsReport,
    dataset_stats,
    evaluate,
    frequency_bands,
    gold_rank,
    restrict_partition,
)
from hybridkgc.kg import (
    FWD,
    DatasetBundle,
    GraphSplits,
    KnowledgeGraph,
    Query,
    Triple,
)
from hybridkgc.pipeline import HybridRanking, RankedEntry, StrategyModels, StrategySpec
from hybridkgc.rules import BodyAtom, ClosedPathRule, RuleSet, RuleStats

from conftest import make_kg, make_vocab


def as_rule(head, body):
    return ClosedPathRule(head, tuple(BodyAtom(*a) for a in body))


def ranking_of(*groups):
    """Build a ranking from (entities, tie_key, provenance) groups."""
    entries = []
    for entities, key, prov in groups:
        for e in entities:
            entries.append(RankedEntry(e, None if key is None else 0.5, key, prov))
    return HybridRanking(Query.tail_query(0, 0), entries)


class TestGoldRank:
    def test_untied_positions(self):
        r = ranking_of(([4], 0.9, "primary"), ([7], 0.5, "primary"), ([1], 0.1, "primary"))
        assert gold_rank(r, 4) == 1
        assert gold_rank(r, 7) == 2
        assert gold_rank(r, 1) == 3

    def test_midpoint_of_tie_group(self):
        # three-way tie occupying positions 2-4: midpoint rank 3
        r = ranking_of(([9], 0.9, "primary"), ([1, 2, 3], 0.5, "primary"))
        for gold in (1, 2, 3):
            assert gold_rank(r, gold) == 3

    def test_half_up_rounding(self):
        # two-way tie at positions 1-2: midpoint 1.5 rounds half-up to 2
        r = ranking_of(([5, 6], 0.7, "primary"),)
        assert gold_rank(r, 5) == 2
        assert gold_rank(r, 6) == 2

    def test_shuffled_fallback_is_one_tie_group(self):
        r = ranking_of(([2], 0.9, "primary"), ([4, 5, 6, 7], None, "fallback"))
        # block spans positions 2-5, midpoint 3.5 -> 4, independent of order
        for gold in (4, 5, 6, 7):
            assert gold_rank(r, gold) == 4

    def test_provenance_separates_tie_groups(self):
        # same tie_key but different provenance must not merge
        entries = [
            RankedEntry(1, 0.5, None, "primary"),
            RankedEntry(2, None, None, "fallback"),
        ]
        r = HybridRanking(Query.tail_query(0, 0), entries)
        assert gold_rank(r, 1) == 1
        assert gold_rank(r, 2) == 2

    def test_missing_gold_rejected(self):
        r = ranking_of(([1], 0.5, "primary"),)
        with pytest.raises(ValueError):
            gold_rank(r, 42)


class TestFrequencyBands:
    def test_split_points(self):
        # 10 relations, descending counts: 1 frequent, 4 common, 5 rare
        triples = []
        for rel in range(10):
            for i in range(10 - rel):
                triples.append((i, rel, i + 1))
        kg = make_kg(12, 10, triples)
        bands = frequency_bands(kg)
        assert bands[0] == "frequent"
        assert all(bands[r] == "common" for r in (1, 2, 3, 4))
        assert all(bands[r] == "rare" for r in (5, 6, 7, 8, 9))

    def test_count_ties_break_by_relation_id(self):
        kg = make_kg(4, 2, [(0, 0, 1), (0, 1, 2)])
        bands = frequency_bands(kg)
        assert bands[0] == "frequent"
        assert bands[1] == "rare"


class TestRestrictPartition:
    def test_drops_candidates_outside_universe(self, diamond_kg):
        rules = RuleSet({as_rule(2, [(0, FWD), (1, FWD)]): RuleStats(2, 2, 1.0)})
        part = apply_rules(diamond_kg, rules, Query.tail_query(0, 2))
        shrunk = restrict_partition(part, {0, 1, 3})
        assert [ev.candidate for ev in shrunk.supported] == [3]
        assert shrunk.unsupported == {0, 1}


def crafted_bundle():
    """Hand-built inductive dataset with fully predictable ranks.

    Rules (attached by the caller): r1 <= r0,r0 at 0.5 and r1 <= r2 at 0.9.
    Test-graph facts give the gold a 0.5 chain and a decoy a 0.9 shortcut;
    the decoy is a known answer from the valid split, so filtering removes it.
    """
    rels = make_vocab(["r0", "r1", "r2"])
    a_ents = make_vocab([f"a{i}" for i in range(4)])
    train_graphs = GraphSplits(
        KnowledgeGraph(a_ents, rels, [Triple(0, 0, 1), Triple(1, 0, 2), Triple(0, 1, 2)]),
        KnowledgeGraph(a_ents, rels, [Triple(0, 1, 3)]),
        KnowledgeGraph(a_ents, rels, [Triple(1, 1, 3)]),
    )
    b_ents = make_vocab([f"b{i}" for i in range(5)])
    fact = KnowledgeGraph(b_ents, rels, [
        Triple(0, 0, 1), Triple(1, 0, 2),   # chain b0 -> b1 -> b2
        Triple(0, 2, 4),                     # shortcut feeding the decoy b4
        Triple(3, 0, 4),
    ])
    valid = KnowledgeGraph(b_ents, rels, [Triple(0, 1, 4)])  # decoy is a true answer
    test = KnowledgeGraph(b_ents, rels, [Triple(0, 1, 2)])
    bundle = DatasetBundle("crafted", "v0", train_graphs, GraphSplits(fact, valid, test), rels)
    rules = RuleSet({
        as_rule(1, [(0, FWD), (0, FWD)]): RuleStats(2, 4, 0.5),
        as_rule(1, [(2, FWD)]): RuleStats(9, 10, 0.9),
    })
    return bundle, rules


class TestEvaluate:
    def test_filtered_ranks_on_crafted_bundle(self):
        bundle, rules = crafted_bundle()
        models = StrategyModels(fact_graph=bundle.test_graphs.train)
        spec = StrategySpec.parse("rule-max+shuffle")
        filtered = evaluate(bundle, rules, spec, models, EvalConfig(runs=2))
        raw = evaluate(bundle, rules, spec, models,
                       EvalConfig(runs=2, filtered=False))
        # tail query: decoy b4 at 0.9 outranks gold b2 raw; filtering removes it.
        # head query: only candidate is the gold itself either way.
        assert filtered.mean["mrr"] == pytest.approx(1.0)
        assert raw.mean["mrr"] == pytest.approx((0.5 + 1.0) / 2)
        assert filtered.queries == 2
        # deterministic outcome: zero spread across runs
        assert filtered.spread["mrr"] == 0.0
        assert raw.per_run[0] == raw.per_run[1]

    def test_reduced50_bit_reproducible(self):
        bundle, rules = crafted_bundle()
        models = StrategyModels(fact_graph=bundle.test_graphs.train)
        spec = StrategySpec.parse("rule-max+shuffle")
        cfg = EvalConfig(setting="reduced50", reduced_negatives=3, runs=3, seed=11)
        a = evaluate(bundle, rules, spec, models, cfg)
        b = evaluate(bundle, rules, spec, models, cfg)
        assert a.to_json() == b.to_json()

    def test_wrong_fact_graph_rejected(self):
        bundle, rules = crafted_bundle()
        models = StrategyModels(fact_graph=bundle.train_graphs.train)
        with pytest.raises(ValueError):
            evaluate(bundle, rules, StrategySpec.parse("rule-max+shuffle"), models,
                     EvalConfig(runs=1))

    def test_dump_rankings_called_once_per_query(self):
        bundle, rules = crafted_bundle()
        models = StrategyModels(fact_graph=bundle.test_graphs.train)
        seen = []
        evaluate(bundle, rules, StrategySpec.parse("rule-max+shuffle"), models,
                 EvalConfig(runs=3), dump_rankings=lambda q, g, r: seen.append((q, g)))
        assert len(seen) == 2  # one tail + one head query, first run only

    def test_unknown_setting_rejected(self):
        with pytest.raises(ValueError):
            EvalConfig(setting="tenfold")

    def test_report_serialization_shapes(self):
        bundle, rules = crafted_bundle()
        models = StrategyModels(fact_graph=bundle.test_graphs.train)
        report = evaluate(bundle, rules, StrategySpec.parse("noisy-or+shuffle"),
                          models, EvalConfig(runs=2))
        blob = report.to_json()
        assert blob["strategy"] == "noisy-or+shuffle"
        assert set(blob["metrics"]) == {"mrr", "hits1", "hits3", "hits10"}
        rows = report.csv_rows()
        assert len(rows) == 4 + 3 * 4  # all + one block per band
        assert {r["band"] for r in rows} == {"all", "frequent", "common", "rare"}


class TestDatasetStats:
    def test_counts_without_rules(self):
        bundle, _ = crafted_bundle()
        report = dataset_stats(bundle)
        assert report.train_graph["relations"] == 2  # r2 unused in the train graph
        assert report.test_graph["entities"] == 5
        assert report.num_rules is None
        assert report.pct_no_evidence is None

    def test_evidence_partition_percentages(self):
        bundle, rules = crafted_bundle()
        report = dataset_stats(bundle, rules)
        # tail query: A_q = {b2, b4} -> neither zero, single, nor many;
        # head query: A_q = {b0} -> single
        assert report.pct_no_evidence == pytest.approx(0.0)
        assert report.pct_single_evidence == pytest.approx(50.0)
        assert report.pct_many_evidence == pytest.approx(0.0)
        # gold instantiations: tail gold b2 has one chain match, head gold b0 too
        assert report.mean_gold_instantiations == pytest.approx(1.0)
        assert report.num_rules == 2

    def test_json_keys(self):
        bundle, rules = crafted_bundle()
        blob = dataset_stats(bundle, rules).to_json()
        assert blob["dataset"] == "crafted_v0"
        assert "pct_queries_no_evidence" in blob
