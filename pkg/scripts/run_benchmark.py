#!/usr/bin/env python
"""End-to-end benchmark driver: mine, train, evaluate, tabulate.

Runs every requested hybrid strategy on one inductive dataset version and
prints a metric table, optionally saving JSON/CSV artifacts. Example:

    python scripts/run_benchmark.py --dataset fb237 --version v1 \
        --budget-seconds 100 --strategies rule-max+shuffle,rule-max+nbf \
        --outdir results/fb237_v1
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from hybridkgc.evaluation import EvalConfig, evaluate
from hybridkgc.kg import load_dataset
from hybridkgc.pipeline import StrategyModels, StrategySpec
from hybridkgc.rankers import config_for, train_aggregator, train_nbf
from hybridkgc.rules import mine, write_rules

log = logging.getLogger("run_benchmark")

DEFAULT_STRATEGIES = "rule-max+shuffle,noisy-or+shuffle,rule-max+nbf,rgcn+shuffle,compgcn+shuffle,nbf+shuffle"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data-root", default="data")
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--version", default="v1")
    ap.add_argument("--budget-seconds", type=float, default=100.0)
    ap.add_argument("--strategies", default=DEFAULT_STRATEGIES)
    ap.add_argument("--setting", choices=("full", "reduced50"), default="full")
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=None, help="override training epochs")
    ap.add_argument("--outdir", default=None)
    args = ap.parse_args()
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(asctime)s %(message)s", datefmt="%H:%M:%S"
    )

    specs = [StrategySpec.parse(s.strip()) for s in args.strategies.split(",") if s.strip()]
    bundle = load_dataset(args.data_root, args.dataset, args.version)
    outdir = Path(args.outdir) if args.outdir else None
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)

    started = time.monotonic()
    ruleset = mine(bundle.train_graphs.train, budget_seconds=args.budget_seconds, seed=args.seed)
    log.info("mined %d rules in %.1fs", len(ruleset), time.monotonic() - started)
    if outdir:
        write_rules(ruleset, bundle.relation_vocab, outdir / "rules.tsv")

    overrides = {"epochs": args.epochs} if args.epochs is not None else {}
    fact = bundle.test_graphs.train
    aggregators = {}
    for arch in ("rgcn", "compgcn"):
        if any(s.primary == arch for s in specs):
            log.info("training %s aggregator", arch)
            config = config_for(arch, **overrides)
            store, report = train_aggregator(bundle, ruleset, arch, config, seed=args.seed)
            log.info("%s best validation accuracy %.3f", arch, report.best_val_metric)
            aggregators[arch] = (arch, config, store)
    nbf = None
    if any(s.primary == "nbf" or s.fallback == "nbf" for s in specs):
        log.info("training path-message ranker")
        config = config_for("nbf", **overrides)
        store, report = train_nbf(bundle, config, seed=args.seed)
        log.info("nbf best validation MRR %.3f", report.best_val_metric)
        nbf = (config, store)

    eval_config = EvalConfig(setting=args.setting, runs=args.runs, seed=args.seed)
    results = []
    for spec in specs:
        models = StrategyModels(
            fact_graph=fact, aggregator=aggregators.get(spec.primary), nbf=nbf
        )
        report = evaluate(bundle, ruleset, spec, models, eval_config)
        results.append(report)
        log.info("%s: MRR %.3f hits@10 %.3f", spec, report.mean["mrr"], report.mean["hits10"])

    header = f"{'strategy':24s} {'MRR':>7s} {'H@1':>7s} {'H@3':>7s} {'H@10':>7s}"
    print(header)
    print("-" * len(header))
    for r in results:
        print(
            f"{r.strategy:24s} {r.mean['mrr']:7.3f} {r.mean['hits1']:7.3f}"
            f" {r.mean['hits3']:7.3f} {r.mean['hits10']:7.3f}"
        )
    if outdir:
        (outdir / "results.json").write_text(
            json.dumps([r.to_json() for r in results], indent=2) + "\n", encoding="utf-8"
        )
        log.info("wrote %s", outdir / "results.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
