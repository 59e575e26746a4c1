"""Evaluation protocol: ranking metrics over the inductive test graph.

Models are trained on the train graph; at test time rules and rankers see
the test graph's train split as the fact graph and are scored on its test
split. Every triple yields a tail and a head query. The candidate universe
is either all test-graph entities or the gold plus 50 sampled negatives;
known correct answers other than the gold are removed when filtering is on.
Gold ranks use the midpoint tie policy with half-up rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import CandidatePartition, Evidence, apply_rules
from .kg import FWD, INV, DatasetBundle, KnowledgeGraph, Query, filter_set
from .pipeline import HybridRanking, StrategyModels, StrategySpec, run_strategy
from .rules import RuleSet
from .util import derive_seed, round_half_up

BANDS = ("frequent", "common", "rare")
METRICS = ("mrr", "hits1", "hits3", "hits10")


@dataclass
class EvalConfig:
    setting: str = "full"  # or "reduced50"
    reduced_negatives: int = 50
    filtered: bool = True
    runs: int = 5
    seed: int = 0
    max_matches_per_candidate: int = 100

    def __post_init__(self):
        if self.setting not in ("full", "reduced50"):
            raise ValueError(f"unknown setting {self.setting!r}")


@dataclass
class MetricsReport:
    dataset: str
    strategy: str
    setting: str
    filtered: bool
    runs: int
    queries: int
    mean: dict[str, float]
    spread: dict[str, float]
    bands: dict[str, dict[str, float]]
    band_queries: dict[str, int]
    per_run: list[dict[str, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "strategy": self.strategy,
            "setting": self.setting,
            "filtered": self.filtered,
            "runs": self.runs,
            "queries": self.queries,
            "metrics": self.mean,
            "spread": self.spread,
            "bands": self.bands,
            "band_queries": self.band_queries,
            "per_run": self.per_run,
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for metric in METRICS:
            rows.append(
                {
                    "dataset": self.dataset,
                    "strategy": self.strategy,
                    "setting": self.setting,
                    "band": "all",
                    "metric": metric,
                    "mean": self.mean[metric],
                    "spread": self.spread[metric],
                }
            )
        for band in BANDS:
            for metric in METRICS:
                rows.append(
                    {
                        "dataset": self.dataset,
                        "strategy": self.strategy,
                        "setting": self.setting,
                        "band": band,
                        "metric": metric,
                        "mean": self.bands[band].get(metric, float("nan")),
                        "spread": self.bands[band].get(f"{metric}_spread", float("nan")),
                    }
                )
        return rows


def gold_rank(ranking: HybridRanking, gold: int) -> int:
    """Midpoint rank of the gold entity inside its tie group, rounded half-up.

    Entries are tied when they share provenance and tie key; the shuffled
    fallback block is one big tie group.
    """
    entries = ranking.entries
    idx = None
    for i, e in enumerate(entries):
        if e.entity == gold:
            idx = i
            break
    if idx is None:
        raise ValueError(f"gold entity {gold} missing from the candidate universe")
    me = entries[idx]
    start = idx
    while start > 0 and entries[start - 1].provenance == me.provenance and entries[start - 1].tie_key == me.tie_key:
        start -= 1
    end = idx
    while (
        end + 1 < len(entries)
        and entries[end + 1].provenance == me.provenance
        and entries[end + 1].tie_key == me.tie_key
    ):
        end += 1
    tied_others = end - start
    return round_half_up(1.0 + start + tied_others / 2.0)


def restrict_partition(partition: CandidatePartition, universe: set[int]) -> CandidatePartition:
    supported = [ev for ev in partition.supported if ev.candidate in universe]
    unsupported = partition.unsupported & universe
    return CandidatePartition(partition.query, supported, unsupported)


def frequency_bands(train_split: KnowledgeGraph) -> dict[int, str]:
    """Relation id -> frequent / common / rare by train-split triple counts.

    The top ceil(10%) most frequent relations are frequent, the next up to
    ceil(50%) are common, the rest rare. Count ties break by relation id.
    """
    n = train_split.num_relations
    counts = [0] * n
    for _, r, _ in train_split.triples:
        counts[r] += 1
    order = sorted(range(n), key=lambda r: (-counts[r], r))
    n_frequent = math.ceil(0.1 * n)
    n_common_end = math.ceil(0.5 * n)
    bands = {}
    for pos, rel in enumerate(order):
        if pos < n_frequent:
            bands[rel] = "frequent"
        elif pos < n_common_end:
            bands[rel] = "common"
        else:
            bands[rel] = "rare"
    return bands


def _test_queries(bundle: DatasetBundle) -> list[tuple[Query, int]]:
    out = []
    for h, r, t in bundle.test_graphs.test.triples:
        out.append((Query.tail_query(h, r), t))
        out.append((Query.head_query(r, t), h))
    return out


def _metric_dict(ranks: Sequence[int]) -> dict[str, float]:
    arr = np.asarray(ranks, dtype=np.float64)
    return {
        "mrr": float((1.0 / arr).mean()),
        "hits1": float((arr <= 1).mean()),
        "hits3": float((arr <= 3).mean()),
        "hits10": float((arr <= 10).mean()),
    }


def evaluate(
    bundle: DatasetBundle,
    rules: RuleSet,
    spec: StrategySpec,
    models: StrategyModels,
    config: EvalConfig,
    dump_rankings=None,
) -> MetricsReport:
    """Rank the gold answer of every test query under the strategy.

    Metrics are averaged over config.runs evaluation runs with the run index
    folded into every random stream (candidate sampling and fallback
    shuffling). Rule application and neural scores are query-deterministic,
    so they are computed once and shared across runs.
    """
    fact = bundle.test_graphs.train
    if models.fact_graph is not fact:
        raise ValueError("models.fact_graph must be the test graph's train split")
    queries = _test_queries(bundle)
    bands = frequency_bands(bundle.train_graphs.train)
    n_ent = fact.num_entities
    full_universe = set(range(n_ent))

    partitions: dict[Query, CandidatePartition] = {}
    for query, _ in queries:
        if query not in partitions:
            partitions[query] = apply_rules(
                fact, rules, query, config.max_matches_per_candidate
            )

    per_run: list[dict[str, float]] = []
    per_run_bands: list[dict[str, dict[str, float]]] = []
    band_counts: dict[str, int] = {b: 0 for b in BANDS}
    for run in range(config.runs):
        ranks: list[int] = []
        band_ranks: dict[str, list[int]] = {b: [] for b in BANDS}
        for query, gold in queries:
            if config.setting == "reduced50":
                rng = np.random.default_rng(
                    derive_seed(config.seed, run, query.anchor, query.relation, query.direction, gold)
                )
                k = min(config.reduced_negatives, n_ent - 1)
                draw = rng.choice(n_ent - 1, size=k, replace=False)
                draw = draw + (draw >= gold)
                universe = {gold} | {int(x) for x in draw}
            else:
                universe = set(full_universe)
            if config.filtered:
                universe -= filter_set(bundle, query, gold)
            universe.add(gold)
            partition = restrict_partition(partitions[query], universe)
            ranking = run_strategy(
                query,
                partition,
                spec,
                models,
                shuffle_seed=derive_seed(config.seed, run),
            )
            rank = gold_rank(ranking, gold)
            ranks.append(rank)
            band_ranks[bands[query.relation]].append(rank)
            if dump_rankings is not None and run == 0:
                dump_rankings(query, gold, ranking)
        per_run.append(_metric_dict(ranks))
        per_run_bands.append(
            {b: (_metric_dict(rs) if rs else {}) for b, rs in band_ranks.items()}
        )
        if run == 0:
            band_counts = {b: len(rs) for b, rs in band_ranks.items()}

    mean = {m: float(np.mean([r[m] for r in per_run])) for m in METRICS}
    spread = {m: float(np.std([r[m] for r in per_run])) for m in METRICS}
    band_summary: dict[str, dict[str, float]] = {}
    for b in BANDS:
        vals: dict[str, float] = {}
        if band_counts[b]:
            for m in METRICS:
                series = [rb[b][m] for rb in per_run_bands]
                vals[m] = float(np.mean(series))
                vals[f"{m}_spread"] = float(np.std(series))
        band_summary[b] = vals
    return MetricsReport(
        dataset=f"{bundle.name}_{bundle.version}",
        strategy=str(spec),
        setting=config.setting,
        filtered=config.filtered,
        runs=config.runs,
        queries=len(queries),
        mean=mean,
        spread=spread,
        bands=band_summary,
        band_queries=band_counts,
        per_run=per_run,
    )


# ---------------------------------------------------------------------------
# dataset statistics


@dataclass
class StatsReport:
    dataset: str
    train_graph: dict[str, int]
    test_graph: dict[str, int]
    num_rules: int | None
    pct_no_evidence: float | None
    pct_single_evidence: float | None
    pct_many_evidence: float | None
    mean_gold_instantiations: float | None

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "train_graph": self.train_graph,
            "test_graph": self.test_graph,
            "num_rules": self.num_rules,
            "pct_queries_no_evidence": self.pct_no_evidence,
            "pct_queries_single_evidence": self.pct_single_evidence,
            "pct_queries_many_evidence": self.pct_many_evidence,
            "mean_gold_instantiations": self.mean_gold_instantiations,
        }


def _graph_counts(graphs) -> dict[str, int]:
    union = graphs.union_triples()
    relations = {t.relation for t in union}
    return {
        "relations": len(relations),
        "entities": len(graphs.entity_vocab),
        "triples": len(union),
    }


def dataset_stats(
    bundle: DatasetBundle,
    rules: RuleSet | None = None,
    max_matches: int = 100,
) -> StatsReport:
    """Table-style dataset summary plus rule-coverage statistics.

    Coverage runs over the test-graph test split (both query directions,
    full unfiltered universe): the share of queries whose evidence set is
    empty, a single candidate, or more than ten candidates, and the mean
    number of ground-rule instantiations supporting the gold answer.
    """
    report = StatsReport(
        dataset=f"{bundle.name}_{bundle.version}",
        train_graph=_graph_counts(bundle.train_graphs),
        test_graph=_graph_counts(bundle.test_graphs),
        num_rules=None,
        pct_no_evidence=None,
        pct_single_evidence=None,
        pct_many_evidence=None,
        mean_gold_instantiations=None,
    )
    if rules is None:
        return report
    fact = bundle.test_graphs.train
    zero = one = many = 0
    gold_counts = []
    queries = _test_queries(bundle)
    for query, gold in queries:
        partition = apply_rules(fact, rules, query, max_matches)
        size = len(partition.supported)
        if size == 0:
            zero += 1
        elif size == 1:
            one += 1
        if size > 10:
            many += 1
        ev = next((e for e in partition.supported if e.candidate == gold), None)
        gold_counts.append(len(ev.matches) if ev is not None else 0)
    n = len(queries)
    report.num_rules = len(rules)
    report.pct_no_evidence = 100.0 * zero / n
    report.pct_single_evidence = 100.0 * one / n
    report.pct_many_evidence = 100.0 * many / n
    report.mean_gold_instantiations = float(np.mean(gold_counts))
    return report
