"""Shared fixtures: tiny hand-built graphs, the planted synthetic dataset, and
index-free reference implementations used as oracles."""
from __future__ import annotations

from collections import defaultdict

import pytest

from tkgrag.kg import Dataset, DatasetSpec, Quadruple, TemporalKG, load_dataset
from tkgrag.retrieval import Provenance, Query, RetrievalConfig, RetrievedHistory
from tkgrag.rules import MiningParams, learn_rules
from tkgrag.synthetic import SyntheticSpec, write_synthetic_dataset


def make_kg(quads, n_entities=None, n_relations=None, inverse=False) -> TemporalKG:
    """Build a TemporalKG from raw (s, r, o, t) tuples with stub names."""
    n_entities = n_entities or (max(max(q[0], q[2]) for q in quads) + 1 if quads else 1)
    n_relations = n_relations or (max(q[1] for q in quads) + 1 if quads else 1)
    entities = [f"E{i}" for i in range(n_entities)]
    relations = [f"R{i}" for i in range(n_relations)]
    if inverse:
        full = list(quads) + [(o, r + n_relations, s, t) for s, r, o, t in quads]
        relations = relations + [f"inv_R{i}" for i in range(n_relations)]
        return TemporalKG(entities, relations, full, n_relations)
    return TemporalKG(entities, relations, quads, n_relations)


def write_dataset_dir(tmp_path, train, valid=(), test=(), id_maps=None):
    """Write raw rows (tab-separated, 4 columns) into a dataset directory."""
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        with open(tmp_path / f"{name}.txt", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write("\t".join(str(c) for c in row) + "\n")
    if id_maps:
        entities, relations = id_maps
        with open(tmp_path / "entity2id.txt", "w", encoding="utf-8") as fh:
            for name, idx in entities:
                fh.write(f"{name}\t{idx}\n")
        with open(tmp_path / "relation2id.txt", "w", encoding="utf-8") as fh:
            for name, idx in relations:
                fh.write(f"{name}\t{idx}\n")
    return tmp_path


# -- index-free references ----------------------------------------------------


def reference_confidence(quads, head_relation, body_relation):
    """Exhaustive (body_support, rule_support, confidence) over raw quads."""
    head_times = defaultdict(list)
    for s, r, o, t in quads:
        if r == head_relation:
            head_times[(s, o)].append(t)
    bodies = [(s, o, t) for s, r, o, t in quads if r == body_relation]
    body_support = len(bodies)
    rule_support = sum(
        1 for s, o, t in bodies if any(t2 > t for t2 in head_times[(s, o)])
    )
    confidence = rule_support / body_support if body_support else 0.0
    return body_support, rule_support, confidence


def reference_retrieve(quads, bank, query: Query, cfg: RetrievalConfig) -> RetrievedHistory:
    """Direct filter-and-sort reimplementation of retrieval, no indices."""
    window = cfg.window if cfg.window is not None else query.t
    rules = list(bank.rules_for(query.relation))
    if cfg.top_rules is not None:
        rules = rules[: cfg.top_rules]
    groups = [(0, query.relation, Provenance(rank=0))]
    for i, rule in enumerate(rules, start=1):
        groups.append((i, rule.body_relation,
                       Provenance(rank=i, body_relation=rule.body_relation,
                                  confidence=rule.confidence)))

    if cfg.stepwise:
        spans, hi = [], query.t
        while hi > 0:
            lo = max(0, hi - window)
            spans.append((lo, hi))
            if lo == 0 or window == 0:
                break
            hi = lo
    else:
        spans = [(max(0, query.t - window), query.t)]

    chosen, seen = [], set()
    for lo, hi in spans:
        for _, relation, prov in groups:
            matches = [
                Quadruple(*q) for q in quads
                if q[0] == query.subject and q[1] == relation and lo <= q[3] < hi
            ]
            matches.sort(key=lambda q: (-q.t, -q.object))
            for quad in matches:
                if quad in seen or len(chosen) >= cfg.max_history:
                    continue
                seen.add(quad)
                chosen.append((quad, prov))
    chosen.sort(key=lambda fp: (fp[0].t, fp[1].rank, fp[0].object))
    return RetrievedHistory(
        query=query,
        facts=tuple(q for q, _ in chosen),
        provenance=tuple(p for _, p in chosen),
    )


def reference_rule_scores(history: RetrievedHistory, bank, query: Query):
    """Straight-line recomputation of the oracle predictor's ranking."""
    conf = {r.body_relation: r.confidence for r in bank.rules_for(query.relation)}
    totals, latest = {}, {}
    for fact in history.facts:
        w = conf.get(fact.relation, 0.0) + (1.0 if fact.relation == query.relation else 0.0)
        if w > 0:
            totals[fact.object] = totals.get(fact.object, 0.0) + w
            latest[fact.object] = max(latest.get(fact.object, -1), fact.t)
    return sorted(totals, key=lambda o: (-totals[o], -latest[o], o))[:10]


# -- the planted synthetic, shared session-wide -------------------------------


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("synthetic")
    write_synthetic_dataset(str(directory), SyntheticSpec())
    return directory


@pytest.fixture(scope="session")
def synthetic_dataset(synthetic_dir) -> Dataset:
    return load_dataset(str(synthetic_dir), DatasetSpec(time_gap=1, inverse=True))


@pytest.fixture(scope="session")
def synthetic_bank(synthetic_dataset):
    return learn_rules(synthetic_dataset.train, MiningParams(num_walks=200, seed=1))
