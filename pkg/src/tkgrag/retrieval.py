"""Rule-guided retrieval of query-relevant history from the event graph.

For a query (subject, relation, ?, t) the retriever collects past facts about
the same subject: first facts carrying the query relation itself, then facts
carrying the mined rule bodies for that relation in descending confidence.
Selection is truncated to a maximum history length and re-sorted into
ascending time order for prompting.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, TextIO

from .kg import Dataset, Quadruple, TemporalKG
from .rules import RuleBank


@dataclass(frozen=True)
class Query:
    subject: int
    relation: int
    t: int
    gold_object: Optional[int] = None

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("query time step must be non-negative")


@dataclass(frozen=True)
class RetrievalConfig:
    """window=None means the whole strict past of the query; top_rules=None
    uses every rule the bank holds for the query relation."""

    window: Optional[int] = None
    top_rules: Optional[int] = None
    max_history: int = 50
    stepwise: bool = False

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")
        if self.top_rules is not None and self.top_rules < 0:
            raise ValueError("top_rules must be >= 0")
        if self.max_history < 1:
            raise ValueError("max_history must be >= 1")

    def as_dict(self) -> dict:
        return {
            "window": self.window,
            "top_rules": self.top_rules,
            "max_history": self.max_history,
            "stepwise": self.stepwise,
        }


@dataclass(frozen=True)
class Provenance:
    """Why a fact was retrieved: rank 0 is a query-relation (rule-head) fact,
    rank i >= 1 is the i-th rule body in bank order."""

    rank: int
    body_relation: Optional[int] = None
    confidence: Optional[float] = None

    @property
    def kind(self) -> str:
        return "rule-head" if self.rank == 0 else "rule-body"

    def as_dict(self) -> dict:
        if self.rank == 0:
            return {"kind": "rule-head", "rank": 0}
        return {
            "kind": "rule-body",
            "rank": self.rank,
            "body_relation": self.body_relation,
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class RetrievedHistory:
    """Facts in canonical prompt order: ascending t, ties broken by provenance
    rank then object id. `provenance` is parallel to `facts`."""

    query: Query
    facts: tuple[Quadruple, ...]
    provenance: tuple[Provenance, ...]

    def __len__(self) -> int:
        return len(self.facts)


def _canonical_order(
    selected: list[tuple[Quadruple, Provenance]]
) -> tuple[tuple[Quadruple, ...], tuple[Provenance, ...]]:
    selected.sort(key=lambda fp: (fp[0].t, fp[1].rank, fp[0].object))
    facts = tuple(fact for fact, _ in selected)
    provenance = tuple(prov for _, prov in selected)
    return facts, provenance


def retrieve(
    kg: TemporalKG, bank: RuleBank, query: Query, cfg: RetrievalConfig = RetrievalConfig()
) -> RetrievedHistory:
    """Collect up to cfg.max_history strict-past facts for one query.

    When truncation is needed, query-relation facts win over rule-body facts,
    higher-confidence rule groups win over lower ones, and within a group more
    recent facts win. cfg.stepwise instead walks the window backwards one
    span at a time, exhausting all groups in a nearer window before moving to
    an older one.
    """
    window = cfg.window if cfg.window is not None else query.t
    rules = bank.rules_for(query.relation)
    if cfg.top_rules is not None:
        rules = rules[: cfg.top_rules]
    groups: list[tuple[int, int, Provenance]] = [
        (0, query.relation, Provenance(rank=0))
    ]
    for i, rule in enumerate(rules, start=1):
        groups.append(
            (i, rule.body_relation,
             Provenance(rank=i, body_relation=rule.body_relation,
                        confidence=rule.confidence))
        )

    if cfg.stepwise:
        spans = []
        hi = query.t
        while hi > 0:
            lo = max(0, hi - window)
            spans.append((lo, hi))
            if lo == 0 or window == 0:
                break
            hi = lo
    else:
        spans = [(max(0, query.t - window), query.t)]

    selected: list[tuple[Quadruple, Provenance]] = []
    taken: set[int] = set()
    budget = cfg.max_history
    for span_lo, span_hi in spans:
        if len(selected) >= budget:
            break
        for _, relation, prov in groups:
            positions = kg.positions_for(query.subject, relation, span_lo, span_hi)
            for pos in positions[::-1]:  # most recent first within the group
                pos = int(pos)
                if pos in taken:
                    continue
                taken.add(pos)
                selected.append((kg.quad_at(pos), prov))
                if len(selected) >= budget:
                    break
            if len(selected) >= budget:
                break

    facts, provenance = _canonical_order(selected)
    return RetrievedHistory(query=query, facts=facts, provenance=provenance)


def retrieve_batch(
    kg: TemporalKG,
    bank: RuleBank,
    queries: Sequence[Query],
    cfg: RetrievalConfig = RetrievalConfig(),
) -> list[RetrievedHistory]:
    return [retrieve(kg, bank, query, cfg) for query in queries]


def queries_from_split(dataset: Dataset, split: str) -> list[Query]:
    """Object-prediction queries, one per original-direction edge of a split,
    in canonical (t, subject, relation, object) order."""
    kg = dataset.split(split)
    queries = []
    for pos in range(len(kg)):
        relation = int(kg.rel[pos])
        if relation >= dataset.num_base_relations:
            continue
        queries.append(
            Query(
                subject=int(kg.sub[pos]),
                relation=relation,
                t=int(kg.ts[pos]),
                gold_object=int(kg.obj[pos]),
            )
        )
    return queries


# -- JSON-lines interchange ---------------------------------------------------


def query_to_dict(query: Query) -> dict:
    payload = {"s": query.subject, "r": query.relation, "t": query.t}
    if query.gold_object is not None:
        payload["gold"] = query.gold_object
    return payload


def query_from_dict(payload: dict) -> Query:
    return Query(
        subject=payload["s"],
        relation=payload["r"],
        t=payload["t"],
        gold_object=payload.get("gold"),
    )


def history_to_dict(history: RetrievedHistory) -> dict:
    facts = []
    for fact, prov in zip(history.facts, history.provenance):
        facts.append(
            {
                "s": fact.subject,
                "r": fact.relation,
                "o": fact.object,
                "t": fact.t,
                "provenance": prov.as_dict(),
            }
        )
    return {"query": query_to_dict(history.query), "facts": facts}


def history_from_dict(payload: dict) -> RetrievedHistory:
    facts = []
    provenance = []
    for row in payload["facts"]:
        facts.append(Quadruple(row["s"], row["r"], row["o"], row["t"]))
        prov = row["provenance"]
        provenance.append(
            Provenance(
                rank=prov["rank"],
                body_relation=prov.get("body_relation"),
                confidence=prov.get("confidence"),
            )
        )
    return RetrievedHistory(
        query=query_from_dict(payload["query"]),
        facts=tuple(facts),
        provenance=tuple(provenance),
    )


def write_histories(histories: Iterable[RetrievedHistory], fh: TextIO) -> int:
    count = 0
    for history in histories:
        fh.write(json.dumps(history_to_dict(history)) + "\n")
        count += 1
    return count


def read_histories(fh: TextIO) -> list[RetrievedHistory]:
    return [history_from_dict(json.loads(line)) for line in fh if line.strip()]
