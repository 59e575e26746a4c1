"""Neural rerankers built on the autodiff kernel.

Two families: relational GNN aggregators (basis-decomposed relational
convolution or composition-based convolution) scoring rule instantiation
graphs, and a path-message ranker propagating query-conditioned messages
over the whole fact graph. Head queries are answered by querying the
inverse relation id (r + num_relations) as a tail query throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Adam, ParamStore, Tape, Tensor, backward, load_checkpoint, save_checkpoint
from .kg import FWD, INV, DatasetBundle, KnowledgeGraph, Query, Triple
from .engine import apply_rules, Evidence
from .rig import RuleInstantiationGraph, build_rig, featurize, top_ground_rules
from .rules import RuleSet
from .util import derive_seed

AGGREGATOR_ARCHS = ("rgcn", "compgcn")


@dataclass
class RgcnConfig:
    layers: int = 4
    bases: int = 4
    hidden: int = 32
    distance_cap: int = 5
    lr: float = 0.004
    patience: int = 3
    negatives: int = 2
    epochs: int = 50


@dataclass
class CompGcnConfig:
    layers: int = 4
    hidden: int = 32
    distance_cap: int = 5
    lr: float = 0.001
    patience: int = 3
    negatives: int = 2
    epochs: int = 50
    composition: str = "hadamard"  # or "subtract"


@dataclass
class NbfConfig:
    layers: int = 6  # inductive fallback targets live 5-6 hops out; 4 cannot reach them
    dim: int = 32
    negatives: int = 32
    lr: float = 0.001
    epochs: int = 30
    patience: int = 5


@dataclass
class TrainReport:
    best_val_metric: float
    best_epoch: int
    epochs_run: int
    history: list[float] = field(default_factory=list)


def config_for(arch: str, **overrides):
    if arch == "rgcn":
        return RgcnConfig(**overrides)
    if arch == "compgcn":
        return CompGcnConfig(**overrides)
    if arch == "nbf":
        return NbfConfig(**overrides)
    raise ValueError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# aggregators over rule instantiation graphs


@dataclass
class RigBatch:
    """Several RIGs stacked into one disjoint graph."""

    feats: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray  # relation + direction * num_relations
    tail_rows: np.ndarray
    query_rels: np.ndarray
    num_nodes: int


def build_rig_batch(
    rigs: Sequence[RuleInstantiationGraph],
    query_rels: Sequence[int],
    num_relations: int,
    distance_cap: int,
) -> RigBatch:
    feats = []
    src, dst, rel = [], [], []
    tails, qrels = [], []
    offset = 0
    for rig, qr in zip(rigs, query_rels):
        feats.append(featurize(rig, distance_cap))
        for s, r, d, t in rig.edges:
            src.append(offset + s)
            dst.append(offset + t)
            rel.append(r + d * num_relations)
        tails.append(offset + rig.tail_local)
        qrels.append(qr)
        offset += rig.num_nodes
    return RigBatch(
        np.concatenate(feats, axis=0),
        np.asarray(src, dtype=np.int64),
        np.asarray(dst, dtype=np.int64),
        np.asarray(rel, dtype=np.int64),
        np.asarray(tails, dtype=np.int64),
        np.asarray(qrels, dtype=np.int64),
        offset,
    )


def init_aggregator_params(
    arch: str,
    config,
    num_relations: int,
    seed: int = 0,
) -> ParamStore:
    """Fresh parameters; feature width is fixed by the distance encoding."""
    rng = np.random.default_rng(derive_seed(seed, 11))
    store = ParamStore()
    feat = 2 * (config.distance_cap + 2)
    hid = config.hidden
    n_rel = 2 * num_relations
    dims = [feat] + [hid] * config.layers
    if arch == "rgcn":
        for i in range(config.layers):
            store.xavier(f"l{i}.w0", dims[i], dims[i + 1], rng)
            for j in range(config.bases):
                store.xavier(f"l{i}.basis{j}", dims[i], dims[i + 1], rng)
            store.xavier(f"l{i}.coeff", n_rel, config.bases, rng)
    elif arch == "compgcn":
        store.normal("rel0", n_rel, feat, rng)
        for i in range(config.layers):
            store.xavier(f"l{i}.w_fwd", dims[i], dims[i + 1], rng)
            store.xavier(f"l{i}.w_inv", dims[i], dims[i + 1], rng)
            store.xavier(f"l{i}.w_self", dims[i], dims[i + 1], rng)
            store.xavier(f"l{i}.w_rel", dims[i], dims[i + 1], rng)
    else:
        raise ValueError(f"unknown aggregator architecture {arch!r}")
    store.normal("query_rel", n_rel, hid, rng)
    store.xavier("head.w", hid + hid, 1, rng)
    store.zeros("head.b", 1, 1)
    return store


def _rgcn_logits(tape: Tape, store: ParamStore, cfg: RgcnConfig, batch: RigBatch) -> Tensor:
    # 1 / c_{v,r}: in-degree of the target node under the edge's relation
    counts: dict[tuple[int, int], int] = {}
    for t, r in zip(batch.dst, batch.rel):
        counts[(int(t), int(r))] = counts.get((int(t), int(r)), 0) + 1
    norm = np.array(
        [[1.0 / counts[(int(t), int(r))]] for t, r in zip(batch.dst, batch.rel)]
    )
    h = tape.leaf(batch.feats)
    for i in range(cfg.layers):
        self_part = tape.matmul(h, store.tensor(tape, f"l{i}.w0"))
        coeff = tape.gather_rows(store.tensor(tape, f"l{i}.coeff"), batch.rel)
        msg = None
        for j in range(cfg.bases):
            basis_out = tape.matmul(h, store.tensor(tape, f"l{i}.basis{j}"))
            term = tape.scale_rows(
                tape.gather_rows(basis_out, batch.src),
                tape.slice_cols(coeff, j, j + 1),
            )
            msg = term if msg is None else tape.add(msg, term)
        msg = tape.scale_rows(msg, norm)
        agg = tape.segment_sum(msg, batch.dst, batch.num_nodes)
        h = tape.relu(tape.add(self_part, agg))
    return _score_head(tape, store, h, batch)


def _compgcn_logits(tape: Tape, store: ParamStore, cfg: CompGcnConfig, batch: RigBatch) -> Tensor:
    fwd_pos = np.flatnonzero(batch.rel < (store["rel0"].shape[0] // 2))
    inv_pos = np.flatnonzero(batch.rel >= (store["rel0"].shape[0] // 2))
    h = tape.leaf(batch.feats)
    z = store.tensor(tape, "rel0")
    for i in range(cfg.layers):
        h_src = tape.gather_rows(h, batch.src)
        z_edge = tape.gather_rows(z, batch.rel)
        if cfg.composition == "hadamard":
            comp = tape.hadamard(h_src, z_edge)
        elif cfg.composition == "subtract":
            comp = tape.add(h_src, tape.scalar_mul(z_edge, -1.0))
        else:
            raise ValueError(f"unknown composition {cfg.composition!r}")
        parts = []
        for positions, weight in ((fwd_pos, f"l{i}.w_fwd"), (inv_pos, f"l{i}.w_inv")):
            if positions.size == 0:
                continue
            sub = tape.gather_rows(comp, positions)
            moved = tape.matmul(sub, store.tensor(tape, weight))
            parts.append(tape.segment_sum(moved, batch.dst[positions], batch.num_nodes))
        agg = parts[0]
        for p in parts[1:]:
            agg = tape.add(agg, p)
        self_part = tape.matmul(h, store.tensor(tape, f"l{i}.w_self"))
        h = tape.relu(tape.add(agg, self_part))
        z = tape.matmul(z, store.tensor(tape, f"l{i}.w_rel"))
    return _score_head(tape, store, h, batch)


def _score_head(tape: Tape, store: ParamStore, h: Tensor, batch: RigBatch) -> Tensor:
    tails = tape.gather_rows(h, batch.tail_rows)
    q = tape.gather_rows(store.tensor(tape, "query_rel"), batch.query_rels)
    joint = tape.concat_cols(tails, q)
    logits = tape.add(tape.matmul(joint, store.tensor(tape, "head.w")), store.tensor(tape, "head.b"))
    return logits


def _aggregator_logits(tape: Tape, store: ParamStore, arch: str, config, batch: RigBatch) -> Tensor:
    if arch == "rgcn":
        return _rgcn_logits(tape, store, config, batch)
    if arch == "compgcn":
        return _compgcn_logits(tape, store, config, batch)
    raise ValueError(f"unknown aggregator architecture {arch!r}")


def gnn_forward(
    store: ParamStore,
    arch: str,
    config,
    rigs: Sequence[RuleInstantiationGraph],
    query_rels: Sequence[int],
    num_relations: int,
) -> np.ndarray:
    """Confidence in [0, 1] for each (RIG, query relation) pair."""
    if not rigs:
        return np.zeros(0)
    batch = build_rig_batch(rigs, query_rels, num_relations, config.distance_cap)
    tape = Tape()
    logits = _aggregator_logits(tape, store, arch, config, batch)
    return tape.sigmoid(logits).data.ravel().copy()


# ---------------------------------------------------------------------------
# aggregator training


@dataclass
class _AggExample:
    query_rel: int
    gold_rig: RuleInstantiationGraph
    pool_matches: dict[int, list]
    pool: list[int]
    anchor: int


def _query_rel_id(query: Query, num_relations: int) -> int:
    return query.relation + (num_relations if query.direction == INV else 0)


def _collect_examples(
    fact: KnowledgeGraph,
    extra_known: KnowledgeGraph | None,
    source: KnowledgeGraph,
    rules: RuleSet,
    top_k: int,
    max_matches: int,
) -> list[_AggExample]:
    """One example per query whose gold answer has rule evidence.

    When the source triple sits in the fact graph (training on known edges)
    that edge is hidden from the body walks, matching the test-time situation
    where the queried fact is absent.
    """
    examples = []
    n_rel = fact.num_relations
    for h, r, t in source.triples:
        hidden = Triple(h, r, t) if Triple(h, r, t) in fact.triple_set else None
        for query, gold in ((Query.tail_query(h, r), t), (Query.head_query(r, t), h)):
            partition = apply_rules(fact, rules, query, max_matches, exclude=hidden)
            by_cand = {ev.candidate: ev for ev in partition.supported}
            gold_ev = by_cand.get(gold)
            if gold_ev is None:
                continue
            known = set(fact.neighbors(query.anchor, query.relation, query.direction))
            if extra_known is not None:
                known |= set(extra_known.neighbors(query.anchor, query.relation, query.direction))
            known.add(gold)
            pool = sorted(c for c in by_cand if c not in known)
            gold_rig = build_rig(top_ground_rules(gold_ev, top_k), query.anchor, gold)
            pool_matches = {c: top_ground_rules(by_cand[c], top_k) for c in pool}
            examples.append(
                _AggExample(_query_rel_id(query, n_rel), gold_rig, pool_matches, pool, query.anchor)
            )
    return examples


def _example_batch(
    ex: _AggExample,
    negatives: Sequence[int],
    num_relations: int,
    distance_cap: int,
    rig_cache: dict[tuple[int, int, int], RuleInstantiationGraph],
) -> tuple[RigBatch, np.ndarray]:
    rigs = [ex.gold_rig]
    for neg in negatives:
        key = (ex.query_rel, ex.anchor, neg)
        rig = rig_cache.get(key)
        if rig is None:
            rig = build_rig(ex.pool_matches[neg], ex.anchor, neg)
            rig_cache[key] = rig
        rigs.append(rig)
    labels = np.zeros((len(rigs), 1))
    labels[0, 0] = 1.0
    batch = build_rig_batch(rigs, [ex.query_rel] * len(rigs), num_relations, distance_cap)
    return batch, labels


def _aggregator_accuracy(
    store: ParamStore,
    arch: str,
    config,
    examples: list[_AggExample],
    fixed_negatives: list[list[int]],
    num_relations: int,
) -> float:
    correct = 0
    total = 0
    rig_cache: dict[tuple[int, int, int], RuleInstantiationGraph] = {}
    for ex, negs in zip(examples, fixed_negatives):
        batch, labels = _example_batch(ex, negs, num_relations, config.distance_cap, rig_cache)
        tape = Tape()
        logits = _aggregator_logits(tape, store, arch, config, batch)
        preds = (logits.data.ravel() > 0).astype(float)
        correct += int((preds == labels.ravel()).sum())
        total += len(preds)
    return correct / total if total else 0.0


def train_aggregator(
    bundle: DatasetBundle,
    rules: RuleSet,
    arch: str,
    config,
    seed: int = 0,
    top_k: int = 5,
    max_matches: int = 100,
    progress=None,
) -> tuple[ParamStore, TrainReport]:
    """Binary-classification training of a RIG aggregator.

    Every train-split triple yields a tail and a head query; queries whose
    gold answer lacks rule evidence are skipped. Each kept query contributes
    the gold RIG (label 1) and `config.negatives` rule-supported negatives
    (label 0), resampled every epoch. Early stopping tracks validation-split
    binary accuracy with the configured patience; the best parameters are
    returned.
    """
    if arch not in AGGREGATOR_ARCHS:
        raise ValueError(f"unknown aggregator architecture {arch!r}")
    fact = bundle.train_graphs.train
    n_rel = fact.num_relations
    train_examples = _collect_examples(fact, None, fact, rules, top_k, max_matches)
    val_examples = _collect_examples(
        fact, bundle.train_graphs.valid, bundle.train_graphs.valid, rules, top_k, max_matches
    )
    if not train_examples:
        raise ValueError("no trainable queries: no gold answer has rule evidence")

    val_rng = np.random.default_rng(derive_seed(seed, 101))
    val_negatives = [
        list(val_rng.choice(ex.pool, size=min(config.negatives, len(ex.pool)), replace=False))
        for ex in val_examples
    ]
    store = init_aggregator_params(arch, config, n_rel, seed)
    adam = Adam(store, config.lr)
    rng = np.random.default_rng(derive_seed(seed, 202))
    rig_cache: dict[tuple[int, int, int], RuleInstantiationGraph] = {}

    def validate() -> float:
        return _aggregator_accuracy(store, arch, config, val_examples, val_negatives, n_rel)

    best_acc = validate()
    best_params = store.copy()
    best_epoch = -1
    history = [best_acc]
    epochs_run = 0
    since_improve = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_examples))
        for idx in order:
            ex = train_examples[int(idx)]
            if ex.pool:
                negs = list(
                    rng.choice(ex.pool, size=min(config.negatives, len(ex.pool)), replace=False)
                )
            else:
                negs = []
            batch, labels = _example_batch(ex, negs, n_rel, config.distance_cap, rig_cache)
            tape = Tape()
            logits = _aggregator_logits(tape, store, arch, config, batch)
            loss = tape.bce_with_logits(logits, labels)
            grads = backward(tape, loss)
            adam.step(grads)
        epochs_run = epoch + 1
        acc = validate()
        history.append(acc)
        if progress is not None:
            progress(epoch, acc)
        if acc > best_acc:
            best_acc = acc
            best_params = store.copy()
            best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                break
    return best_params, TrainReport(best_acc, best_epoch, epochs_run, history)


# ---------------------------------------------------------------------------
# path-message ranker over the fact graph


def init_nbf_params(config: NbfConfig, num_relations: int, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(derive_seed(seed, 33))
    store = ParamStore()
    n_rel = 2 * num_relations
    d = config.dim
    store.normal("edge_rel", n_rel, d, rng)
    store.normal("query_rel", n_rel, d, rng)
    for i in range(config.layers):
        store.xavier(f"l{i}.w", 2 * d, d, rng)
    store.xavier("mlp.w1", 2 * d, d, rng)
    store.zeros("mlp.b1", 1, d)
    store.xavier("mlp.w2", d, 1, rng)
    store.zeros("mlp.b2", 1, 1)
    return store


def _nbf_scores_tensor(
    tape: Tape,
    store: ParamStore,
    config: NbfConfig,
    fact: KnowledgeGraph,
    anchor: int,
    query_rel_id: int,
    masked_triple: Triple | None = None,
) -> Tensor:
    src, dst, rel = fact.edge_arrays()
    if masked_triple is not None:
        n = len(fact.triples)
        pos = fact.triple_index(masked_triple)
        keep = np.ones(2 * n, dtype=bool)
        if pos is not None:
            keep[pos] = False
            keep[pos + n] = False
        src, dst, rel = src[keep], dst[keep], rel[keep]
    n_ent = fact.num_entities
    onehot = np.zeros((n_ent, 1))
    onehot[anchor, 0] = 1.0
    q = tape.gather_rows(store.tensor(tape, "query_rel"), np.array([query_rel_id]))
    h0 = tape.matmul(onehot, q)
    edge_emb = tape.gather_rows(store.tensor(tape, "edge_rel"), rel)
    h = h0
    for i in range(config.layers):
        msg = tape.hadamard(tape.gather_rows(h, src), edge_emb)
        agg = tape.segment_sum(msg, dst, n_ent)
        h = tape.relu(tape.matmul(tape.concat_cols(agg, h0), store.tensor(tape, f"l{i}.w")))
    q_rows = tape.matmul(np.ones((n_ent, 1)), q)
    feats = tape.concat_cols(h, q_rows)
    hidden = tape.relu(tape.add(tape.matmul(feats, store.tensor(tape, "mlp.w1")), store.tensor(tape, "mlp.b1")))
    return tape.add(tape.matmul(hidden, store.tensor(tape, "mlp.w2")), store.tensor(tape, "mlp.b2"))


def nbf_forward(
    store: ParamStore,
    config: NbfConfig,
    fact: KnowledgeGraph,
    anchor: int,
    query_rel_id: int,
    masked_triple: Triple | None = None,
) -> np.ndarray:
    """Scores for every entity as the answer to (anchor, query_rel, ?)."""
    tape = Tape()
    scores = _nbf_scores_tensor(tape, store, config, fact, anchor, query_rel_id, masked_triple)
    return scores.data.ravel().copy()


def _midpoint_rank_of(scores: np.ndarray, gold: int) -> float:
    s = scores[gold]
    better = int((scores > s).sum())
    tied = int((scores == s).sum()) - 1
    return 1.0 + better + tied / 2.0


def _nbf_validation_mrr(
    store: ParamStore, config: NbfConfig, fact: KnowledgeGraph, valid: KnowledgeGraph
) -> float:
    n_rel = fact.num_relations
    rr = []
    for h, r, t in valid.triples:
        for anchor, qrel, gold in ((h, r, t), (t, r + n_rel, h)):
            scores = nbf_forward(store, config, fact, anchor, qrel)
            rr.append(1.0 / _midpoint_rank_of(scores, gold))
    return float(np.mean(rr)) if rr else 0.0


def train_nbf(
    bundle: DatasetBundle,
    config: NbfConfig,
    seed: int = 0,
    progress=None,
) -> tuple[ParamStore, TrainReport]:
    """Query-conditioned training over the train split with edge masking.

    Each triple is read as a tail query and (via the inverse relation id) a
    head query; the triple and its inverse are removed from the message graph
    for its own queries. The loss is BCE over the gold against uniform
    negative entities. Early stopping tracks validation MRR.
    """
    fact = bundle.train_graphs.train
    valid = bundle.train_graphs.valid
    n_rel = fact.num_relations
    n_ent = fact.num_entities
    store = init_nbf_params(config, n_rel, seed)
    adam = Adam(store, config.lr)
    rng = np.random.default_rng(derive_seed(seed, 404))

    queries = []
    for triple in fact.triples:
        h, r, t = triple
        queries.append((h, r, t, triple))
        queries.append((t, r + n_rel, h, triple))

    best_mrr = _nbf_validation_mrr(store, config, fact, valid)
    best_params = store.copy()
    best_epoch = -1
    history = [best_mrr]
    epochs_run = 0
    since_improve = 0
    n_neg = min(config.negatives, n_ent - 1)
    for epoch in range(config.epochs):
        order = rng.permutation(len(queries))
        for idx in order:
            anchor, qrel, gold, triple = queries[int(idx)]
            negs = rng.choice(n_ent - 1, size=n_neg, replace=False)
            negs = negs + (negs >= gold)
            rows = np.concatenate([[gold], negs])
            labels = np.zeros((len(rows), 1))
            labels[0, 0] = 1.0
            tape = Tape()
            scores = _nbf_scores_tensor(tape, store, config, fact, anchor, qrel, triple)
            logits = tape.gather_rows(scores, rows)
            loss = tape.bce_with_logits(logits, labels)
            grads = backward(tape, loss)
            adam.step(grads)
        epochs_run = epoch + 1
        mrr = _nbf_validation_mrr(store, config, fact, valid)
        history.append(mrr)
        if progress is not None:
            progress(epoch, mrr)
        if mrr > best_mrr:
            best_mrr = mrr
            best_params = store.copy()
            best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                break
    return best_params, TrainReport(best_mrr, best_epoch, epochs_run, history)


# ---------------------------------------------------------------------------
# checkpoints with an architecture descriptor


def save_ranker(path: Path | str, arch: str, config, store: ParamStore) -> None:
    meta = {"arch": arch, "config": asdict(config)}
    save_checkpoint(path, store, meta)


def load_ranker(path: Path | str):
    """Returns (arch, config, store); aborts on unknown or mismatched descriptors."""
    store, meta = load_checkpoint(path)
    arch = meta.get("arch")
    if arch not in ("rgcn", "compgcn", "nbf"):
        raise ValueError(f"checkpoint has unknown architecture {arch!r}")
    config = config_for(arch, **meta.get("config", {}))
    return arch, config, store
