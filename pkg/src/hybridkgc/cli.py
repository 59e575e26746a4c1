"""Command line entry points.

Subcommands cover the whole workflow: ``ingest`` validates a dataset and
prints its statistics, ``mine`` learns rules, ``train`` fits one of the
neural rankers, ``eval`` scores a hybrid strategy on the test graph,
``stats`` adds rule-coverage numbers, ``explain`` dumps the evidence behind
one prediction, and ``ablate`` sweeps mining budgets or RIG sizes.

Options can be preloaded from a flat ``key = value`` config file passed via
``--config``; command line flags always win. Keys that a given subcommand
does not define are ignored, so one file can drive a whole experiment.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .engine import apply_rules, evidence_to_json, noisy_or_score
from .evaluation import EvalConfig, dataset_stats, evaluate, gold_rank
from .kg import DataError, Query, load_dataset
from .pipeline import (
    FALLBACK_STRATEGIES,
    PRIMARY_STRATEGIES,
    StrategyModels,
    StrategySpec,
    ranking_to_json,
)
from .rankers import (
    config_for,
    load_ranker,
    save_ranker,
    train_aggregator,
    train_nbf,
)
from .rig import build_rig, rig_to_dot, top_ground_rules
from .rules import mine, read_rules, write_rules

log = logging.getLogger("hybridkgc")


# ---------------------------------------------------------------------------
# config file and small output helpers


def read_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment, blank lines skipped."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, val = line.partition("=")
            if not eq or not key.strip():
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


_TRUE = ("1", "true", "yes", "on")


def apply_config(subparser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Turn config entries into subparser defaults, honoring option types."""
    defaults = {}
    for action in subparser._actions:
        if action.dest in values:
            raw = values[action.dest]
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                defaults[action.dest] = raw.lower() in _TRUE
            elif action.type is not None:
                defaults[action.dest] = action.type(raw)
            else:
                defaults[action.dest] = raw
    subparser.set_defaults(**defaults)


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
        log.info("wrote %s", path)
    else:
        print(text)


def _write_csv(rows: list[dict], path: str) -> None:
    if not rows:
        return
    fields: dict[str, None] = {}  # rows may carry different keys; union them
    for row in rows:
        fields.update((k, None) for k in row)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), restval="")
        writer.writeheader()
        writer.writerows(rows)
    log.info("wrote %s", path)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _load_bundle(args):
    if not args.dataset:
        raise DataError("--dataset is required (e.g. fb237, WN18RR, nell)")
    return load_dataset(args.data_root, args.dataset, args.version)


def _log_progress(epoch: int, metric: float) -> None:
    log.info("epoch %d: validation metric %.4f", epoch, metric)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    bundle = _load_bundle(args)
    report = dataset_stats(bundle)
    log.info(
        "loaded %s %s: %d relations, train graph %d triples, test graph %d triples",
        bundle.name,
        bundle.version,
        len(bundle.relation_vocab),
        report.train_graph["triples"],
        report.test_graph["triples"],
    )
    _write_json(report.to_json(), args.out)
    return 0


def cmd_mine(args) -> int:
    bundle = _load_bundle(args)
    graph = bundle.train_graphs.train if args.graph == "train" else bundle.test_graphs.train
    modes = sum([args.budget_seconds is not None, args.iterations is not None, args.exhaustive])
    if modes == 0:
        args.budget_seconds = 10.0
    elif modes > 1:
        raise DataError("pick one of --budget-seconds, --iterations, --exhaustive")
    started = time.monotonic()
    ruleset = mine(
        graph,
        budget_seconds=args.budget_seconds,
        iterations=args.iterations,
        exhaustive=args.exhaustive,
        max_len=args.max_len,
        pc=args.pc,
        seed=args.seed,
        min_support=args.min_support,
        min_confidence=args.min_confidence,
        grounding_cap=args.grounding_cap,
    )
    elapsed = time.monotonic() - started
    write_rules(ruleset, bundle.relation_vocab, args.out)
    log.info("mined %d rules in %.1fs -> %s", len(ruleset), elapsed, args.out)
    print(json.dumps({"rules": len(ruleset), "elapsed_seconds": elapsed, "out": args.out}))
    return 0


_HIDDEN_FIELD = {"rgcn": "hidden", "compgcn": "hidden", "nbf": "dim"}


def cmd_train(args) -> int:
    bundle = _load_bundle(args)
    overrides = {}
    for key in ("epochs", "patience", "lr", "layers", "negatives"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.hidden is not None:
        overrides[_HIDDEN_FIELD[args.arch]] = args.hidden
    if args.arch == "compgcn" and args.composition is not None:
        overrides["composition"] = args.composition
    config = config_for(args.arch, **overrides)
    if args.arch == "nbf":
        store, report = train_nbf(bundle, config, seed=args.seed, progress=_log_progress)
    else:
        if not args.rules:
            raise DataError("aggregator training needs --rules")
        rules = read_rules(args.rules, bundle.relation_vocab)
        store, report = train_aggregator(
            bundle,
            rules,
            args.arch,
            config,
            seed=args.seed,
            top_k=args.top_k,
            max_matches=args.max_matches,
            progress=_log_progress,
        )
    save_ranker(args.out, args.arch, config, store)
    log.info(
        "trained %s: best validation metric %.4f at epoch %d (%d run) -> %s",
        args.arch,
        report.best_val_metric,
        report.best_epoch,
        report.epochs_run,
        args.out,
    )
    print(
        json.dumps(
            {
                "arch": args.arch,
                "best_val_metric": report.best_val_metric,
                "best_epoch": report.best_epoch,
                "epochs_run": report.epochs_run,
                "out": args.out,
            }
        )
    )
    return 0


def _build_models(args, bundle, spec: StrategySpec) -> StrategyModels:
    fact = bundle.test_graphs.train
    aggregator = None
    nbf = None
    if spec.primary in ("rgcn", "compgcn"):
        if not args.aggregator_model:
            raise DataError(f"strategy {spec} needs --aggregator-model")
        arch, config, store = load_ranker(args.aggregator_model)
        if arch != spec.primary:
            raise DataError(f"checkpoint is {arch}, strategy wants {spec.primary}")
        aggregator = (arch, config, store)
    if spec.primary == "nbf" or spec.fallback == "nbf":
        if not args.nbf_model:
            raise DataError(f"strategy {spec} needs --nbf-model")
        arch, config, store = load_ranker(args.nbf_model)
        if arch != "nbf":
            raise DataError(f"checkpoint is {arch}, expected nbf")
        nbf = (config, store)
    return StrategyModels(
        fact_graph=fact, aggregator=aggregator, nbf=nbf, rig_top_k=args.top_k
    )


def cmd_eval(args) -> int:
    spec = StrategySpec.parse(args.strategy)
    bundle = _load_bundle(args)
    rules = read_rules(args.rules, bundle.relation_vocab)
    models = _build_models(args, bundle, spec)
    config = EvalConfig(
        setting=args.setting,
        filtered=not args.raw,
        runs=args.runs,
        seed=args.seed,
        max_matches_per_candidate=args.max_matches,
    )
    dump_fh = None
    dump_fn = None
    if args.dump_rankings:
        dump_fh = open(args.dump_rankings, "w", encoding="utf-8")
        evoc = bundle.test_graphs.entity_vocab

        def dump_fn(query, gold, ranking):
            record = ranking_to_json(ranking, evoc, bundle.relation_vocab)
            record["gold"] = evoc.name(gold)
            record["rank"] = gold_rank(ranking, gold)
            dump_fh.write(json.dumps(record) + "\n")

    try:
        report = evaluate(bundle, rules, spec, models, config, dump_rankings=dump_fn)
    finally:
        if dump_fh:
            dump_fh.close()
    log.info(
        "%s on %s (%s, %s): MRR %.3f, hits@10 %.3f over %d queries",
        spec,
        report.dataset,
        report.setting,
        "filtered" if report.filtered else "raw",
        report.mean["mrr"],
        report.mean["hits10"],
        report.queries,
    )
    _write_json(report.to_json(), args.out)
    if args.csv:
        _write_csv(report.csv_rows(), args.csv)
    return 0


def cmd_stats(args) -> int:
    bundle = _load_bundle(args)
    rules = read_rules(args.rules, bundle.relation_vocab) if args.rules else None
    report = dataset_stats(bundle, rules, max_matches=args.max_matches)
    _write_json(report.to_json(), args.out)
    return 0


def cmd_explain(args) -> int:
    bundle = _load_bundle(args)
    rules = read_rules(args.rules, bundle.relation_vocab)
    graphs = bundle.test_graphs if args.graph == "test" else bundle.train_graphs
    evoc = graphs.entity_vocab
    rvoc = bundle.relation_vocab
    for name, vocab, what in (
        (args.head, evoc, "entity"),
        (args.tail, evoc, "entity"),
        (args.relation, rvoc, "relation"),
    ):
        if name not in vocab:
            raise DataError(f"unknown {what} {name!r} in the {args.graph} graph")
    head, tail = evoc.id(args.head), evoc.id(args.tail)
    rel = rvoc.id(args.relation)
    if args.direction == "tail":
        query, candidate = Query.tail_query(head, rel), tail
    else:
        query, candidate = Query.head_query(rel, tail), head
    partition = apply_rules(graphs.train, rules, query, args.max_matches)
    evidence = partition.evidence_for(candidate)
    out = {
        "triple": [args.head, args.relation, args.tail],
        "query_direction": args.direction,
        "supported": evidence is not None,
    }
    if evidence is not None:
        out["max_confidence"] = evidence.distinct_rule_confidences[0]
        out["noisy_or"] = noisy_or_score(evidence.distinct_rule_confidences)
        out["evidence"] = evidence_to_json(evidence, evoc, rvoc)
        if args.dot:
            rig = build_rig(top_ground_rules(evidence, args.top_k), query.anchor, candidate)
            Path(args.dot).write_text(rig_to_dot(rig, evoc, rvoc), encoding="utf-8")
            log.info("wrote %s", args.dot)
    _write_json(out, args.out)
    return 0


def _ablate_eval(bundle, rules, spec, models, runs, seed, setting):
    config = EvalConfig(setting=setting, runs=runs, seed=seed)
    return evaluate(bundle, rules, spec, models, config)


def _ablate_row(bundle, rules, spec, models, args, sweep, value, extra):
    full = _ablate_eval(bundle, rules, spec, models, args.runs, args.seed, "full")
    reduced = _ablate_eval(bundle, rules, spec, models, args.runs, args.seed, "reduced50")
    row = {
        "sweep": sweep,
        "value": value,
        "strategy": str(spec),
        "rules": len(rules),
        "mrr": full.mean["mrr"],
        "hits1": full.mean["hits1"],
        "hits3": full.mean["hits3"],
        "hits10": full.mean["hits10"],
        "hits10_reduced": reduced.mean["hits10"],
    }
    row.update(extra)
    log.info(
        "%s=%s %s: MRR %.3f hits@10 %.3f (reduced %.3f)",
        sweep,
        value,
        spec,
        row["mrr"],
        row["hits10"],
        row["hits10_reduced"],
    )
    return row


def _train_for_ablation(bundle, rules, args, top_k):
    overrides = {"epochs": args.epochs} if args.epochs is not None else {}
    config = config_for(args.arch, **overrides)
    store, report = train_aggregator(
        bundle, rules, args.arch, config, seed=args.seed, top_k=top_k
    )
    models = StrategyModels(
        fact_graph=bundle.test_graphs.train,
        aggregator=(args.arch, config, store),
        rig_top_k=top_k,
    )
    return models, report


def cmd_ablate(args) -> int:
    bundle = _load_bundle(args)
    rows = []
    rule_max = StrategySpec.parse("rule-max+shuffle")
    agg_spec = StrategySpec.parse(f"{args.arch}+shuffle")
    if args.sweep == "budget":
        for budget in args.budgets:
            ruleset = mine(bundle.train_graphs.train, budget_seconds=budget, seed=args.seed)
            log.info("budget %.0fs: %d rules", budget, len(ruleset))
            plain = StrategyModels(fact_graph=bundle.test_graphs.train)
            rows.append(
                _ablate_row(bundle, ruleset, rule_max, plain, args, "budget", budget, {})
            )
            models, report = _train_for_ablation(bundle, ruleset, args, args.top_k)
            rows.append(
                _ablate_row(
                    bundle,
                    ruleset,
                    agg_spec,
                    models,
                    args,
                    "budget",
                    budget,
                    {"val_metric": report.best_val_metric},
                )
            )
    else:
        budget = args.budget_seconds if args.budget_seconds is not None else 100.0
        ruleset = mine(bundle.train_graphs.train, budget_seconds=budget, seed=args.seed)
        log.info("mined %d rules for the RIG-size sweep", len(ruleset))
        for k in args.topk_values:
            models, report = _train_for_ablation(bundle, ruleset, args, k)
            rows.append(
                _ablate_row(
                    bundle,
                    ruleset,
                    agg_spec,
                    models,
                    args,
                    "topk",
                    k,
                    {"val_metric": report.best_val_metric},
                )
            )
    _write_json(rows, args.out)
    if args.csv:
        _write_csv(rows, args.csv)
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file of option defaults")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--data-root", default="data", help="dataset directory root")
    common.add_argument("--dataset", help="dataset name (fb237, WN18RR, nell)")
    common.add_argument("--version", default="v1", help="benchmark split version")
    common.add_argument("--seed", type=int, default=0, help="base random seed")
    common.add_argument("--out", default=None, help="output file (default: stdout)")

    parser = argparse.ArgumentParser(
        prog="hybridkgc",
        description="rule mining, neural reranking, and hybrid evaluation for"
        " inductive knowledge graph completion",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("ingest", parents=[common], help="load and summarize a dataset")
    p.set_defaults(func=cmd_ingest)
    commands["ingest"] = p

    p = sub.add_parser("mine", parents=[common], help="mine closed path rules")
    p.add_argument("--graph", choices=("train", "test"), default="train")
    p.add_argument("--budget-seconds", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--max-len", type=int, default=4)
    p.add_argument("--pc", type=float, default=5.0)
    p.add_argument("--min-support", type=int, default=2)
    p.add_argument("--min-confidence", type=float, default=1e-4)
    p.add_argument("--grounding-cap", type=int, default=100_000)
    p.set_defaults(func=cmd_mine)
    commands["mine"] = p

    p = sub.add_parser("train", parents=[common], help="train a neural ranker")
    p.add_argument("--arch", choices=("rgcn", "compgcn", "nbf"), required=True)
    p.add_argument("--rules", help="rule file (aggregators only)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--composition", choices=("hadamard", "subtract"), default=None)
    p.add_argument("--top-k", type=int, default=5, help="ground rules per RIG")
    p.add_argument("--max-matches", type=int, default=100)
    p.set_defaults(func=cmd_train)
    commands["train"] = p

    p = sub.add_parser("eval", parents=[common], help="evaluate a hybrid strategy")
    p.add_argument(
        "--strategy",
        required=True,
        help="primary+fallback, e.g. rule-max+shuffle, noisy-or+nbf,"
        f" compgcn+shuffle (primaries: {', '.join(PRIMARY_STRATEGIES)};"
        f" fallbacks: {', '.join(FALLBACK_STRATEGIES)})",
    )
    p.add_argument("--rules", required=True)
    p.add_argument("--aggregator-model")
    p.add_argument("--nbf-model")
    p.add_argument("--setting", choices=("full", "reduced50"), default="full")
    p.add_argument("--raw", action="store_true", help="skip known-answer filtering")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--max-matches", type=int, default=100)
    p.add_argument("--csv", help="also write per-band metric rows as CSV")
    p.add_argument("--dump-rankings", help="JSONL file of first-run rankings")
    p.set_defaults(func=cmd_eval)
    commands["eval"] = p

    p = sub.add_parser("stats", parents=[common], help="dataset and coverage statistics")
    p.add_argument("--rules", help="rule file enabling coverage statistics")
    p.add_argument("--max-matches", type=int, default=100)
    p.set_defaults(func=cmd_stats)
    commands["stats"] = p

    p = sub.add_parser("explain", parents=[common], help="show evidence for one triple")
    p.add_argument("--rules", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--relation", required=True)
    p.add_argument("--tail", required=True)
    p.add_argument("--direction", choices=("tail", "head"), default="tail")
    p.add_argument("--graph", choices=("train", "test"), default="test")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--max-matches", type=int, default=100)
    p.add_argument("--dot", help="write the top-rule RIG as Graphviz")
    p.set_defaults(func=cmd_explain)
    commands["explain"] = p

    p = sub.add_parser("ablate", parents=[common], help="budget or RIG-size sweeps")
    p.add_argument("--sweep", choices=("budget", "topk"), required=True)
    p.add_argument("--budgets", type=_float_list, default=[10.0, 100.0, 1000.0])
    p.add_argument("--topk-values", type=_int_list, default=[5, 10, 50, 100, 1000])
    p.add_argument("--budget-seconds", type=float, default=None)
    p.add_argument("--arch", choices=("rgcn", "compgcn"), default="compgcn")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_ablate)
    commands["ablate"] = p

    return parser, commands


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    boot = argparse.ArgumentParser(add_help=False)
    boot.add_argument("--config", default=None)
    boot.add_argument("--verbose", action="store_true")
    pre, _ = boot.parse_known_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if pre.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%H:%M:%S",
    )
    parser, commands = build_parser()
    if pre.config:
        values = read_config_file(pre.config)
        for sp in commands.values():
            apply_config(sp, values)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
