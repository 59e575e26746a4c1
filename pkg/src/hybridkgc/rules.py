"""Bottom-up mining of closed path rules with exact confidence scoring.

A closed path rule predicts head(X0, Xn) from a chain of body atoms
b1(X0, X1), ..., bn(Xn-1, Xn), where each atom may traverse its relation
forward or inverted. Mining samples ground paths anchored on observed
triples, generalizes them, and scores each distinct rule exactly by
chaining sparse adjacency-matrix products: the (x0, xn) entry of the
product counts the body's groundings for that entity pair.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .kg import FWD, INV, DataError, KnowledgeGraph, Triple, Vocab
from .util import derive_seed, round_half_up

DEFAULT_MAX_LEN = 4
DEFAULT_PSEUDO_COUNT = 5.0
DEFAULT_MIN_SUPPORT = 2
DEFAULT_MIN_CONFIDENCE = 1e-4
DEFAULT_GROUNDING_CAP = 100_000


class BodyAtom(NamedTuple):
    relation: int
    direction: int


class ClosedPathRule(NamedTuple):
    head: int
    body: tuple[BodyAtom, ...]


class GroundPath(NamedTuple):
    entities: tuple[int, ...]
    atoms: tuple[BodyAtom, ...]
    head_triple: Triple


@dataclass(frozen=True)
class RuleStats:
    support: int
    body_groundings: int
    confidence: float
    estimated: bool = False


def rule_sort_key(rule: ClosedPathRule, stats: RuleStats):
    """Descending confidence, then support, then shorter bodies, then body ids."""
    return (-stats.confidence, -stats.support, len(rule.body), rule.body)


class RuleSet:
    """Mined rules with their statistics, indexed by head relation."""

    def __init__(self, stats: Mapping[ClosedPathRule, RuleStats] | None = None) -> None:
        self.stats: dict[ClosedPathRule, RuleStats] = dict(stats or {})
        self._by_head: dict[int, tuple[ClosedPathRule, ...]] = {}
        self._reindex()

    def _reindex(self) -> None:
        grouped: dict[int, list[ClosedPathRule]] = {}
        for rule in self.stats:
            grouped.setdefault(rule.head, []).append(rule)
        self._by_head = {
            h: tuple(sorted(rs, key=lambda r: rule_sort_key(r, self.stats[r])))
            for h, rs in grouped.items()
        }

    def rules_for(self, head: int) -> tuple[ClosedPathRule, ...]:
        """Rules with the given head, highest confidence first (deterministic ties)."""
        return self._by_head.get(head, ())

    def confidence(self, rule: ClosedPathRule) -> float:
        return self.stats[rule].confidence

    def merge(self, other: "RuleSet") -> "RuleSet":
        """Union of both sets; on collision keep the stats with more groundings."""
        merged = dict(self.stats)
        for rule, st in other.stats.items():
            mine = merged.get(rule)
            if mine is None or (st.body_groundings, st.support) > (mine.body_groundings, mine.support):
                merged[rule] = st
        return RuleSet(merged)

    def __len__(self) -> int:
        return len(self.stats)

    def __iter__(self) -> Iterator[ClosedPathRule]:
        return iter(self.stats)

    def __contains__(self, rule: ClosedPathRule) -> bool:
        return rule in self.stats

    def __eq__(self, other) -> bool:
        return isinstance(other, RuleSet) and self.stats == other.stats


# ---------------------------------------------------------------------------
# scoring


class _RelationMatrices:
    """CSR adjacency per (relation, direction) plus flat triple arrays.

    Built once per graph and cached on it. Matrix entries are int64 counts,
    so chained products stay exact integers.
    """

    def __init__(self, kg: KnowledgeGraph) -> None:
        n = kg.num_entities
        flat = np.array(kg.triples, dtype=np.int64).reshape(-1, 3)
        self.n = n
        self.num_relations = len(kg.relation_vocab)
        self.tri_h = flat[:, 0]
        self.tri_r = flat[:, 1]
        self.tri_t = flat[:, 2]
        self.tri_key = self.tri_h * n + self.tri_t
        ones = np.ones(len(flat), dtype=np.int64)
        self.mats: dict[int, sp.csr_matrix] = {}
        self.outdeg: dict[int, np.ndarray] = {}
        for r in np.unique(self.tri_r):
            m = self.tri_r == r
            for d, rows, cols in ((FWD, self.tri_h[m], self.tri_t[m]), (INV, self.tri_t[m], self.tri_h[m])):
                mat = sp.csr_matrix((ones[m], (rows, cols)), shape=(n, n))
                mat.sort_indices()
                self.mats[int(r) * 2 + d] = mat
                self.outdeg[int(r) * 2 + d] = np.asarray(mat.sum(axis=1)).ravel()


def _matrices(kg: KnowledgeGraph) -> _RelationMatrices:
    cached = getattr(kg, "_relmats", None)
    if cached is None:
        cached = _RelationMatrices(kg)
        kg._relmats = cached
    return cached


def _gather_support(idx: _RelationMatrices, paths: sp.csr_matrix, acc: np.ndarray, tri_mask=None) -> None:
    """Add path counts landing on observed triples into per-relation `acc`.

    `paths` rows are start entities (global ids, or chunk-local when
    tri_mask maps triples into the chunk), columns are endpoints.
    """
    if paths.nnz == 0:
        return
    paths.sort_indices()
    coo = paths.tocoo()
    keys = coo.row.astype(np.int64) * idx.n + coo.col
    if tri_mask is None:
        queries, rels = idx.tri_key, idx.tri_r
    else:
        queries, rels = tri_mask
    pos = np.searchsorted(keys, queries)
    pos = np.minimum(pos, len(keys) - 1)
    hit = keys[pos] == queries
    if hit.any():
        np.add.at(acc, rels[hit], coo.data[pos[hit]])


def _supp_dict(acc: np.ndarray) -> dict[int, int]:
    return {int(r): int(acc[r]) for r in np.nonzero(acc)[0]}


def score_body_all_heads(
    kg: KnowledgeGraph,
    body: Sequence[BodyAtom],
    cap: int = DEFAULT_GROUNDING_CAP,
    seed: int = 0,
) -> tuple[int, dict[int, int], bool]:
    """Exact grounding counts for one body against every head relation.

    Chains the body's adjacency matrices over all start entities at once;
    the returned dict maps each relation with nonzero support to its support
    count. The running total of partial groundings (the summed entries of
    every intermediate product) is bounded by `cap`: each level's size is
    known from the previous product and the next atom's out-degrees, so an
    oversized join is abandoned before it is materialized. Past the cap the
    join restarts in estimation mode over seeded-shuffled chunks of start
    entities, and counts are scaled up by the sampled fraction; such stats
    are flagged estimated.
    """
    idx = _matrices(kg)
    rkeys = [r * 2 + d for r, d in body]
    if any(k not in idx.mats for k in rkeys):
        return 0, {}, False

    paths = idx.mats[rkeys[0]]
    visits = int(paths.sum())
    within_cap = visits <= cap
    if within_cap:
        for k in rkeys[1:]:
            visits += int((paths @ idx.outdeg[k]).sum())
            if visits > cap:
                within_cap = False
                break
            paths = paths @ idx.mats[k]
    if within_cap:
        acc = np.zeros(idx.num_relations, dtype=np.int64)
        _gather_support(idx, paths, acc)
        return int(paths.sum()), _supp_dict(acc), False

    rng = np.random.default_rng(seed)
    order = rng.permutation(idx.n)
    bg = 0
    acc = np.zeros(idx.num_relations, dtype=np.int64)
    visits = 0
    processed = 0
    local = np.zeros(idx.n, dtype=np.int64)
    lo = 0
    chunk = 8
    while lo < idx.n:
        rows = order[lo : lo + chunk]
        lo += chunk
        chunk = min(chunk * 2, 512)  # ramp so tight caps still sample a few starts
        part = idx.mats[rkeys[0]][rows]
        level = int(part.sum())
        if visits + level > cap:
            break
        visits += level
        overflow = False
        for k in rkeys[1:]:
            nxt = int((part @ idx.outdeg[k]).sum())
            if visits + nxt > cap:
                overflow = True
                break
            visits += nxt
            part = part @ idx.mats[k]
        if overflow:
            break
        bg += int(part.sum())
        in_rows = np.isin(idx.tri_h, rows)
        if in_rows.any():
            local[rows] = np.arange(len(rows))
            queries = local[idx.tri_h[in_rows]] * idx.n + idx.tri_t[in_rows]
            _gather_support(idx, part, acc, (queries, idx.tri_r[in_rows]))
        processed += len(rows)
    scale = idx.n / max(processed, 1)
    est_bg = round_half_up(bg * scale)
    supp = _supp_dict(acc)
    est_supp = {h: min(round_half_up(c * scale), est_bg) for h, c in supp.items()}
    return est_bg, est_supp, True


def score_body(
    kg: KnowledgeGraph,
    body: Sequence[BodyAtom],
    heads: Sequence[int],
    cap: int = DEFAULT_GROUNDING_CAP,
    seed: int = 0,
) -> tuple[int, dict[int, int], bool]:
    """Grounding counts for one body projected onto the given head relations."""
    bg, supp, estimated = score_body_all_heads(kg, body, cap=cap, seed=seed)
    return bg, {h: supp.get(h, 0) for h in heads}, estimated


def score_rule(
    kg: KnowledgeGraph,
    rule: ClosedPathRule,
    cap: int = DEFAULT_GROUNDING_CAP,
    pc: float = DEFAULT_PSEUDO_COUNT,
    seed: int = 0,
) -> RuleStats:
    """Exact (or estimated past `cap`) support, groundings, and damped confidence."""
    bg, supp, estimated = score_body(kg, rule.body, [rule.head], cap=cap, seed=seed)
    support = supp[rule.head]
    confidence = support / (bg + pc) if bg + pc > 0 else 0.0
    return RuleStats(support, bg, confidence, estimated)


# ---------------------------------------------------------------------------
# sampling and generalization


def sample_ground_path(
    kg: KnowledgeGraph,
    max_len: int,
    rng: np.random.Generator,
    attempts: int = 20,
) -> GroundPath | None:
    """Sample one ground path witnessing some observed triple.

    Picks a triple (x, h, y) and a target length uniformly, walks length - 1
    uniform random steps from x, then completes the final hop by choosing
    among edges landing exactly on y. Returns None after `attempts` failed
    completions; the caller just resamples.
    """
    if len(kg.triples) == 0:
        raise ValueError("cannot sample from an empty graph")
    for _ in range(attempts):
        head_triple = kg.triples[int(rng.integers(len(kg.triples)))]
        x, _, y = head_triple
        length = int(rng.integers(1, max_len + 1))
        entities = [x]
        atoms: list[BodyAtom] = []
        node = x
        dead = False
        for _ in range(length - 1):
            edges = kg.edges_of(node)
            if not edges:
                dead = True
                break
            r, d, nbr = edges[int(rng.integers(len(edges)))]
            atoms.append(BodyAtom(r, d))
            entities.append(nbr)
            node = nbr
        if dead:
            continue
        closing = kg.connecting(node, y)
        if not closing:
            continue
        r, d = closing[int(rng.integers(len(closing)))]
        atoms.append(BodyAtom(r, d))
        entities.append(y)
        return GroundPath(tuple(entities), tuple(atoms), head_triple)
    return None


def generalize(
    atoms: Sequence[BodyAtom],
    head_relation: int,
    max_len: int = DEFAULT_MAX_LEN,
) -> ClosedPathRule | None:
    """Lift a ground path to a closed rule; None when the rule is degenerate.

    The only degenerate body is the identity: a single forward atom reusing
    the head relation, which every head triple trivially satisfies. The
    inverted single-atom form is a genuine symmetry rule and is kept, as are
    longer bodies that reuse the head relation.
    """
    if not atoms or len(atoms) > max_len:
        return None
    if len(atoms) == 1 and atoms[0] == BodyAtom(head_relation, FWD):
        return None
    return ClosedPathRule(head_relation, tuple(atoms))


# ---------------------------------------------------------------------------
# mining


def _emit(
    rule: ClosedPathRule,
    bg: int,
    support: int,
    estimated: bool,
    pc: float,
    min_support: int,
    min_confidence: float,
) -> RuleStats | None:
    if support < min_support:
        return None
    confidence = support / (bg + pc) if bg + pc > 0 else 0.0
    if confidence < min_confidence:
        return None
    return RuleStats(support, bg, confidence, estimated)


def _mine_exhaustive(
    kg: KnowledgeGraph,
    max_len: int,
    pc: float,
    min_support: int,
    min_confidence: float,
    cap: int,
    seed: int,
) -> dict[ClosedPathRule, RuleStats]:
    """Enumerate every (head, body) pair up to max_len, pruning dead prefixes."""
    present = sorted({t.relation for t in kg.triples})
    alphabet = [BodyAtom(r, d) for r in present for d in (FWD, INV)]
    found: dict[ClosedPathRule, RuleStats] = {}

    def extend(body: tuple[BodyAtom, ...]) -> None:
        bg, supp, est = score_body_all_heads(kg, body, cap=cap, seed=derive_seed(seed, hash(body)))
        if bg == 0:
            return
        for h in sorted(supp):
            rule = generalize(body, h, max_len)
            if rule is None:
                continue
            st = _emit(rule, bg, supp[h], est, pc, min_support, min_confidence)
            if st is not None:
                found[rule] = st
        if len(body) < max_len:
            for atom in alphabet:
                extend(body + (atom,))

    for atom in alphabet:
        extend((atom,))
    return found


def mine(
    kg: KnowledgeGraph,
    budget_seconds: float | None = None,
    iterations: int | None = None,
    exhaustive: bool = False,
    max_len: int = DEFAULT_MAX_LEN,
    pc: float = DEFAULT_PSEUDO_COUNT,
    seed: int = 0,
    min_support: int = DEFAULT_MIN_SUPPORT,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
    grounding_cap: int = DEFAULT_GROUNDING_CAP,
) -> RuleSet:
    """Mine closed path rules under exactly one budget mode.

    Modes: wall-clock seconds (anytime), a fixed iteration count
    (deterministic, for tests), or exhaustive enumeration of all rules up
    to max_len. Sampling only decides which bodies get discovered; each new
    body is then joined exactly once, scoring every candidate head relation
    in the same pass. Statistics never depend on how often a body is drawn.
    """
    modes = sum([budget_seconds is not None, iterations is not None, exhaustive])
    if modes != 1:
        raise ValueError("choose exactly one of budget_seconds, iterations, exhaustive")
    if len(kg.triples) == 0:
        raise ValueError("cannot mine an empty graph")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")

    if exhaustive:
        return RuleSet(
            _mine_exhaustive(kg, max_len, pc, min_support, min_confidence, grounding_cap, seed)
        )

    rng = np.random.default_rng(seed)
    kept: dict[ClosedPathRule, RuleStats] = {}
    scored: set[tuple[BodyAtom, ...]] = set()
    deadline = time.monotonic() + budget_seconds if budget_seconds is not None else None
    step = 0
    while True:
        if iterations is not None and step >= iterations:
            break
        if deadline is not None and time.monotonic() >= deadline:
            break
        step += 1
        path = sample_ground_path(kg, max_len, rng)
        if path is None:
            continue
        body = path.atoms
        if body in scored:
            continue
        scored.add(body)
        bg, supp, est = score_body_all_heads(
            kg, body, cap=grounding_cap, seed=derive_seed(seed, hash(body))
        )
        if bg == 0:
            continue
        for h in sorted(supp):
            rule = generalize(body, h, max_len)
            if rule is None:
                continue
            st = _emit(rule, bg, supp[h], est, pc, min_support, min_confidence)
            if st is not None:
                kept[rule] = st
    return RuleSet(kept)


# ---------------------------------------------------------------------------
# rule file round trip

_ATOM_RE = re.compile(r"^(?P<name>.*)\(X(?P<a>\d+),X(?P<b>\d+)\)$")


def rule_to_text(rule: ClosedPathRule, stats: RuleStats, relation_vocab: Vocab) -> str:
    """One-line textual form: support, groundings, confidence, then the rule."""
    n = len(rule.body)
    parts = []
    for i, (r, d) in enumerate(rule.body):
        name = relation_vocab.name(r)
        if d == FWD:
            parts.append(f"{name}(X{i},X{i + 1})")
        else:
            parts.append(f"{name}(X{i + 1},X{i})")
    head_name = relation_vocab.name(rule.head)
    rule_text = f"{head_name}(X0,X{n}) <= " + ", ".join(parts)
    return f"{stats.support}\t{stats.body_groundings}\t{stats.confidence!r}\t{rule_text}"


def _parse_atom(text: str, relation_vocab: Vocab) -> tuple[int, int, int]:
    m = _ATOM_RE.match(text)
    if m is None:
        raise DataError(f"malformed atom {text!r}")
    name = m.group("name")
    if name not in relation_vocab:
        raise DataError(f"unknown relation {name!r} in rule file")
    a, b = int(m.group("a")), int(m.group("b"))
    return relation_vocab.id(name), a, b


def parse_rule_line(line: str, relation_vocab: Vocab) -> tuple[ClosedPathRule, RuleStats]:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 4:
        raise DataError(f"expected 4 tab-separated fields, got {len(fields)}: {line!r}")
    support, bg = int(fields[0]), int(fields[1])
    confidence = float(fields[2])
    if " <= " not in fields[3]:
        raise DataError(f"missing '<=' separator in rule text: {fields[3]!r}")
    head_text, body_text = fields[3].split(" <= ", 1)
    head_rel, h_a, h_b = _parse_atom(head_text, relation_vocab)
    atom_texts = [t + ")" for t in body_text.split("), ")]
    atom_texts[-1] = atom_texts[-1][:-1]
    atoms = []
    for i, text in enumerate(atom_texts):
        rel, a, b = _parse_atom(text, relation_vocab)
        if (a, b) == (i, i + 1):
            atoms.append(BodyAtom(rel, FWD))
        elif (a, b) == (i + 1, i):
            atoms.append(BodyAtom(rel, INV))
        else:
            raise DataError(f"atom {text!r} breaks the variable chain at position {i}")
    if (h_a, h_b) != (0, len(atoms)):
        raise DataError(f"head variables (X{h_a},X{h_b}) do not span the body")
    rule = ClosedPathRule(head_rel, tuple(atoms))
    return rule, RuleStats(support, bg, confidence)


def write_rules(ruleset: RuleSet, relation_vocab: Vocab, path: Path | str) -> None:
    ordered = sorted(
        ruleset.stats.items(), key=lambda kv: (kv[0].head, rule_sort_key(kv[0], kv[1]))
    )
    with open(path, "w", encoding="utf-8") as fh:
        for rule, stats in ordered:
            fh.write(rule_to_text(rule, stats, relation_vocab) + "\n")


def read_rules(path: Path | str, relation_vocab: Vocab) -> RuleSet:
    stats = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rule, st = parse_rule_line(line, relation_vocab)
            stats[rule] = st
    return RuleSet(stats)
