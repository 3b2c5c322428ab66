"""Time-aware filtered Hits@k evaluation and ablation grids.

The filter removes, from a ranked prediction list, every entity other than
the gold answer that is also a true object for the same (subject, relation,
time step) anywhere in the dataset, so alternative correct answers never
penalize the gold's rank.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

from .client import PredictionList, rule_score_predict
from .kg import Dataset, TemporalKG
from .prompts import Prompt, PromptConfig, build_prompt, select_history
from .retrieval import (
    Query,
    RetrievalConfig,
    RetrievedHistory,
    query_from_dict,
    query_to_dict,
    retrieve,
    retrieve_batch,
)
from .rules import RuleBank

HITS_LEVELS = (1, 3, 10)
ABLATION_HISTORY_LENGTHS = (10, 20, 30, 40, 50)

FilterIndex = dict[tuple[int, int, int], set[int]]


def build_filter_index(
    dataset: Dataset, splits: Sequence[str] = ("train", "valid", "test")
) -> FilterIndex:
    """All true objects per (subject, relation, time step) over the given
    splits, original-direction edges only."""
    index: FilterIndex = {}
    for split in splits:
        kg = dataset.split(split)
        for pos in range(len(kg)):
            relation = int(kg.rel[pos])
            if relation >= dataset.num_base_relations:
                continue
            key = (int(kg.sub[pos]), relation, int(kg.ts[pos]))
            index.setdefault(key, set()).add(int(kg.obj[pos]))
    return index


def time_aware_filter(
    ranked: Sequence[int], query: Query, gold: int, filter_index: FilterIndex
) -> list[int]:
    """Drop co-true objects at the query's own time step, never the gold."""
    others = filter_index.get((query.subject, query.relation, query.t), frozenset())
    return [obj for obj in ranked if obj == gold or obj not in others]


@dataclass(frozen=True)
class EvalRecord:
    query: Query
    predictions: tuple[int, ...]
    rank: Optional[int]
    n_skipped: int = 0
    fingerprint: str = ""

    def as_dict(self) -> dict:
        return {
            "query": query_to_dict(self.query),
            "predictions": list(self.predictions),
            "rank": self.rank,
            "n_skipped": self.n_skipped,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalRecord":
        return cls(
            query=query_from_dict(payload["query"]),
            predictions=tuple(payload["predictions"]),
            rank=payload["rank"],
            n_skipped=payload.get("n_skipped", 0),
            fingerprint=payload.get("fingerprint", ""),
        )


def hits_at_k(records: Sequence[EvalRecord], k: int) -> float:
    """Fraction of records whose gold rank is within k; no rank counts as a
    miss."""
    if k not in HITS_LEVELS:
        raise ValueError(f"k must be one of {HITS_LEVELS}")
    if not records:
        raise ValueError("empty record set")
    hit = sum(1 for r in records if r.rank is not None and r.rank <= k)
    return hit / len(records)


@dataclass(frozen=True)
class EvalReport:
    hits1: float
    hits3: float
    hits10: float
    n_queries: int
    n_unparsed: int
    fingerprint: str = ""

    def as_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "hits": {"1": self.hits1, "3": self.hits3, "10": self.hits10},
            "n_queries": self.n_queries,
            "n_unparsed": self.n_unparsed,
        }


def report_from_records(records: Sequence[EvalRecord], fingerprint: str = "") -> EvalReport:
    return EvalReport(
        hits1=hits_at_k(records, 1),
        hits3=hits_at_k(records, 3),
        hits10=hits_at_k(records, 10),
        n_queries=len(records),
        n_unparsed=sum(r.n_skipped for r in records),
        fingerprint=fingerprint,
    )


class Predictor(Protocol):
    def predict_batch(
        self, items: Sequence[tuple[Query, RetrievedHistory, Prompt]]
    ) -> list[PredictionList]: ...


class OraclePredictor:
    """Endpoint-free predictor scoring candidates by rule confidence."""

    def __init__(self, bank: RuleBank):
        self.bank = bank

    def predict_batch(self, items) -> list[PredictionList]:
        return [
            rule_score_predict(history, self.bank, query)
            for query, history, _prompt in items
        ]


class LLMPredictor:
    """Predictor backed by a completion endpoint speaking the wire contract."""

    def __init__(self, kg: TemporalKG, endpoint: str, params):
        from .client import GenParams, generate_batch, parse_predictions

        self.kg = kg
        self.endpoint = endpoint
        self.params = params if params is not None else GenParams()
        self._generate_batch = generate_batch
        self._parse = parse_predictions

    def predict_batch(self, items) -> list[PredictionList]:
        prompts = [prompt for _query, _history, prompt in items]
        completions = self._generate_batch(prompts, self.params, self.endpoint)
        return [
            self._parse(seqs, prompt, self.kg)
            for seqs, prompt in zip(completions, prompts)
        ]


def _score_one(
    query: Query,
    prediction: PredictionList,
    filter_index: FilterIndex,
    fingerprint: str,
) -> EvalRecord:
    filtered = time_aware_filter(prediction.ranked, query, query.gold_object, filter_index)
    rank = filtered.index(query.gold_object) + 1 if query.gold_object in filtered else None
    return EvalRecord(
        query=query,
        predictions=tuple(filtered),
        rank=rank,
        n_skipped=prediction.n_skipped,
        fingerprint=fingerprint,
    )


def _load_journal(path: str, fingerprint: str) -> dict[int, EvalRecord]:
    completed: dict[int, EvalRecord] = {}
    if not os.path.exists(path):
        return completed
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            payload = json.loads(line)
            record = EvalRecord.from_dict(payload)
            if record.fingerprint != fingerprint:
                raise ValueError(
                    f"journal {path} was written under fingerprint "
                    f"{record.fingerprint!r}, current is {fingerprint!r}"
                )
            completed[payload["index"]] = record
    return completed


def run_eval(
    kg: TemporalKG,
    bank: RuleBank,
    queries: Sequence[Query],
    predictor: Predictor,
    retrieval_cfg: RetrievalConfig = RetrievalConfig(),
    prompt_cfg: PromptConfig = PromptConfig(),
    filter_index: Optional[FilterIndex] = None,
    out_dir: Optional[str] = None,
    fingerprint: str = "",
    chunk_size: int = 32,
) -> tuple[EvalReport, list[EvalRecord]]:
    """Retrieve, prompt, predict, filter, and aggregate over all queries.

    With out_dir set, per-query records stream into a journal as they finish;
    re-running with the same fingerprint skips completed queries, so an
    interrupted run resumes to the identical final report.
    """
    if not queries:
        raise ValueError("empty evaluation set")
    if any(q.gold_object is None for q in queries):
        raise ValueError("every evaluation query needs a gold object")

    journal_path = os.path.join(out_dir, "records.jsonl") if out_dir else None
    completed: dict[int, EvalRecord] = {}
    if journal_path:
        os.makedirs(out_dir, exist_ok=True)
        completed = _load_journal(journal_path, fingerprint)

    pending = [i for i in range(len(queries)) if i not in completed]
    journal = open(journal_path, "a", encoding="utf-8") if journal_path else None
    try:
        for start in range(0, len(pending), chunk_size):
            chunk = pending[start : start + chunk_size]
            items = []
            for i in chunk:
                history = retrieve(kg, bank, queries[i], retrieval_cfg)
                selected = select_history(history, prompt_cfg)
                prompt = build_prompt(selected, prompt_cfg, kg)
                items.append((queries[i], selected, prompt))
            predictions = predictor.predict_batch(items)
            for i, (query, _history, _prompt), prediction in zip(chunk, items, predictions):
                record = _score_one(query, prediction, filter_index or {}, fingerprint)
                completed[i] = record
                if journal:
                    journal.write(json.dumps({"index": i, **record.as_dict()}) + "\n")
            if journal:
                journal.flush()
    finally:
        if journal:
            journal.close()

    records = [completed[i] for i in range(len(queries))]
    report = report_from_records(records, fingerprint)
    if out_dir:
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(report.as_dict(), fh, indent=2)
            fh.write("\n")
    return report, records


def evaluate_histories(
    histories: Sequence[RetrievedHistory],
    predictor: Predictor,
    prompt_cfg: PromptConfig,
    filter_index: FilterIndex,
    kg: TemporalKG,
    fingerprint: str = "",
) -> tuple[EvalReport, list[EvalRecord]]:
    """Evaluation core over pre-retrieved histories (shared by ablation cells)."""
    if not histories:
        raise ValueError("empty evaluation set")
    items = []
    for history in histories:
        selected = select_history(history, prompt_cfg)
        items.append((history.query, selected, build_prompt(selected, prompt_cfg, kg)))
    predictions = predictor.predict_batch(items)
    records = [
        _score_one(query, prediction, filter_index, fingerprint)
        for (query, _history, _prompt), prediction in zip(items, predictions)
    ]
    return report_from_records(records, fingerprint), records


@dataclass(frozen=True)
class AblationCell:
    order: str
    history_length: int
    format: str
    report: EvalReport


def ablation_run(
    kg: TemporalKG,
    bank: RuleBank,
    queries: Sequence[Query],
    orders: Sequence[str],
    history_lengths: Sequence[int],
    formats: Sequence[str],
    predictor: Predictor,
    retrieval_cfg: RetrievalConfig = RetrievalConfig(),
    filter_index: Optional[FilterIndex] = None,
    base_prompt_cfg: PromptConfig = PromptConfig(),
    fingerprint: str = "",
) -> list[AblationCell]:
    """One report per (order, history length, format) cell. Retrieval runs
    once per query and is shared across all cells."""
    if not orders or not history_lengths or not formats:
        raise ValueError("empty ablation grid")
    bad = [n for n in history_lengths if n not in ABLATION_HISTORY_LENGTHS]
    if bad:
        raise ValueError(
            f"history lengths {bad} outside supported {ABLATION_HISTORY_LENGTHS}"
        )
    if max(history_lengths) > retrieval_cfg.max_history:
        raise ValueError("history length exceeds retrieval max_history")

    histories = retrieve_batch(kg, bank, queries, retrieval_cfg)
    cells = []
    for order in orders:
        for length in history_lengths:
            for fmt in formats:
                cfg = PromptConfig(
                    format=fmt,
                    order=order,
                    order_seed=base_prompt_cfg.order_seed,
                    max_facts=length,
                    instruction=base_prompt_cfg.instruction,
                    char_budget=base_prompt_cfg.char_budget,
                )
                cell_tag = f"{fingerprint}/{order}/{length}/{fmt}" if fingerprint else ""
                report, _ = evaluate_histories(
                    histories, predictor, cfg, filter_index or {}, kg, cell_tag
                )
                cells.append(AblationCell(order, length, fmt, report))
    return cells


def ablation_summary(cells: Sequence[AblationCell]) -> str:
    """Tab-separated summary table, one row per cell."""
    lines = ["order\thistory_length\tformat\thits@1\thits@3\thits@10\tn_queries"]
    for cell in cells:
        r = cell.report
        lines.append(
            f"{cell.order}\t{cell.history_length}\t{cell.format}"
            f"\t{r.hits1:.4f}\t{r.hits3:.4f}\t{r.hits10:.4f}\t{r.n_queries}"
        )
    return "\n".join(lines) + "\n"
