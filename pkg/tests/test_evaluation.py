import json
import random

import pytest

from tkgrag.evaluation import (
    EvalRecord,
    LLMPredictor,
    OraclePredictor,
    ablation_run,
    ablation_summary,
    build_filter_index,
    evaluate_histories,
    hits_at_k,
    report_from_records,
    run_eval,
    time_aware_filter,
)
from tkgrag.client import GenParams
from tkgrag.prompts import PromptConfig
from tkgrag.retrieval import Query, RetrievalConfig, queries_from_split, retrieve_batch

from test_client import StubEndpoint


def record(rank, n_skipped=0):
    return EvalRecord(Query(0, 0, 1, gold_object=1), (), rank, n_skipped)


class TestTimeAwareFilter:
    def test_co_true_answers_removed(self):
        index = {(0, 0, 7): {2, 3}}
        got = time_aware_filter([2, 3, 5], Query(0, 0, 7, gold_object=5), 5, index)
        assert got == [5]

    def test_identity_without_co_true(self):
        got = time_aware_filter([2, 3, 5], Query(0, 0, 7, gold_object=5), 5, {})
        assert got == [2, 3, 5]

    def test_gold_never_removed(self):
        index = {(0, 0, 7): {5, 2}}
        got = time_aware_filter([2, 5], Query(0, 0, 7, gold_object=5), 5, index)
        assert got == [5]

    def test_survivor_order_preserved_and_rank_never_worse(self):
        rng = random.Random(0)
        for _ in range(300):
            ranked = rng.sample(range(20), rng.randint(1, 15))
            gold = rng.choice(ranked)
            others = set(rng.sample(range(20), rng.randint(0, 10)))
            index = {(0, 0, 7): others}
            got = time_aware_filter(ranked, Query(0, 0, 7, gold_object=gold), gold, index)
            assert [e for e in ranked if e in got] == got
            assert got.index(gold) <= ranked.index(gold)


class TestHitsAtK:
    def test_pinned_rank_table(self):
        records = [record(1), record(2), record(None), record(11)]
        assert hits_at_k(records, 1) == 0.25
        assert hits_at_k(records, 3) == 0.50
        assert hits_at_k(records, 10) == 0.50

    def test_all_rank_one(self):
        records = [record(1)] * 4
        assert [hits_at_k(records, k) for k in (1, 3, 10)] == [1.0, 1.0, 1.0]

    def test_all_missing(self):
        records = [record(None)] * 3
        assert [hits_at_k(records, k) for k in (1, 3, 10)] == [0.0, 0.0, 0.0]

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            hits_at_k([], 1)

    def test_unsupported_k_rejected(self):
        with pytest.raises(ValueError):
            hits_at_k([record(1)], 5)

    def test_monotone_over_random_records(self):
        rng = random.Random(1)
        for _ in range(1000):
            records = [
                record(rng.choice([None] + list(range(1, 15))))
                for _ in range(rng.randint(1, 30))
            ]
            h1, h3, h10 = (hits_at_k(records, k) for k in (1, 3, 10))
            assert h1 <= h3 <= h10


class TestRunEval:
    def test_empty_queries_rejected(self, synthetic_dataset, synthetic_bank):
        with pytest.raises(ValueError, match="empty evaluation set"):
            run_eval(synthetic_dataset.union_kg(), synthetic_bank, [],
                     OraclePredictor(synthetic_bank))

    def test_gold_required(self, synthetic_dataset, synthetic_bank):
        with pytest.raises(ValueError, match="gold"):
            run_eval(synthetic_dataset.union_kg(), synthetic_bank, [Query(0, 0, 5)],
                     OraclePredictor(synthetic_bank))

    def test_report_aggregates_records(self, synthetic_dataset, synthetic_bank):
        kg = synthetic_dataset.union_kg()
        queries = queries_from_split(synthetic_dataset, "test")[:20]
        report, records = run_eval(
            kg, synthetic_bank, queries, OraclePredictor(synthetic_bank),
            filter_index=build_filter_index(synthetic_dataset),
        )
        assert report.n_queries == 20
        replay = report_from_records(records, report.fingerprint)
        assert replay == report

    def test_journal_written_and_resumed(self, synthetic_dataset, synthetic_bank, tmp_path):
        kg = synthetic_dataset.union_kg()
        queries = queries_from_split(synthetic_dataset, "test")[:30]
        index = build_filter_index(synthetic_dataset)
        full_dir = tmp_path / "full"
        report_full, _ = run_eval(
            kg, synthetic_bank, queries, OraclePredictor(synthetic_bank),
            filter_index=index, out_dir=str(full_dir), fingerprint="fp1",
        )
        # simulate an interruption by keeping only half the journal
        resumed_dir = tmp_path / "resumed"
        resumed_dir.mkdir()
        lines = (full_dir / "records.jsonl").read_text().splitlines(keepends=True)
        (resumed_dir / "records.jsonl").write_text("".join(lines[:15]))
        report_resumed, _ = run_eval(
            kg, synthetic_bank, queries, OraclePredictor(synthetic_bank),
            filter_index=index, out_dir=str(resumed_dir), fingerprint="fp1",
        )
        assert report_resumed == report_full
        assert json.loads((resumed_dir / "report.json").read_text()) == report_full.as_dict()

    def test_rerun_skips_completed_queries(self, synthetic_dataset, synthetic_bank, tmp_path):
        kg = synthetic_dataset.union_kg()
        queries = queries_from_split(synthetic_dataset, "test")[:10]

        class CountingOracle(OraclePredictor):
            calls = 0

            def predict_batch(self, items):
                CountingOracle.calls += len(items)
                return super().predict_batch(items)

        predictor = CountingOracle(synthetic_bank)
        run_eval(kg, synthetic_bank, queries, predictor,
                 out_dir=str(tmp_path), fingerprint="fp")
        assert CountingOracle.calls == 10
        run_eval(kg, synthetic_bank, queries, predictor,
                 out_dir=str(tmp_path), fingerprint="fp")
        assert CountingOracle.calls == 10  # nothing recomputed

    def test_journal_fingerprint_mismatch_rejected(
        self, synthetic_dataset, synthetic_bank, tmp_path
    ):
        kg = synthetic_dataset.union_kg()
        queries = queries_from_split(synthetic_dataset, "test")[:5]
        run_eval(kg, synthetic_bank, queries, OraclePredictor(synthetic_bank),
                 out_dir=str(tmp_path), fingerprint="first")
        with pytest.raises(ValueError, match="fingerprint"):
            run_eval(kg, synthetic_bank, queries, OraclePredictor(synthetic_bank),
                     out_dir=str(tmp_path), fingerprint="second")

    def test_llm_predictor_end_to_end(self, synthetic_dataset, synthetic_bank):
        stub = StubEndpoint(sequences=["0.e01]", "1.e02]"])
        try:
            kg = synthetic_dataset.union_kg()
            queries = queries_from_split(synthetic_dataset, "test")[:8]
            predictor = LLMPredictor(
                kg, stub.url,
                GenParams(num_sequences=2, timeout=5.0, retries=1, backoff=0.01),
            )
            report, records = run_eval(
                kg, synthetic_bank, queries, predictor,
                filter_index=build_filter_index(synthetic_dataset),
            )
            assert report.n_queries == 8
            assert all(len(r.predictions) <= 2 for r in records)
        finally:
            stub.close()


class TestAblation:
    def test_empty_grid_rejected(self, synthetic_dataset, synthetic_bank):
        with pytest.raises(ValueError, match="empty ablation grid"):
            ablation_run(synthetic_dataset.union_kg(), synthetic_bank,
                         queries_from_split(synthetic_dataset, "test")[:5],
                         orders=[], history_lengths=[50], formats=["index"],
                         predictor=OraclePredictor(synthetic_bank))

    def test_unsupported_history_length_rejected(self, synthetic_dataset, synthetic_bank):
        with pytest.raises(ValueError, match="history lengths"):
            ablation_run(synthetic_dataset.union_kg(), synthetic_bank,
                         queries_from_split(synthetic_dataset, "test")[:5],
                         orders=["ascending"], history_lengths=[15], formats=["index"],
                         predictor=OraclePredictor(synthetic_bank))

    def test_grid_shape_and_summary(self, synthetic_dataset, synthetic_bank):
        queries = queries_from_split(synthetic_dataset, "test")[:30]
        cells = ablation_run(
            synthetic_dataset.union_kg(), synthetic_bank, queries,
            orders=["ascending", "descending", "random", "timestamps-removed"],
            history_lengths=[50], formats=["index"],
            predictor=OraclePredictor(synthetic_bank),
            filter_index=build_filter_index(synthetic_dataset),
        )
        assert len(cells) == 4
        ascending = next(c for c in cells if c.order == "ascending")
        for cell in cells:
            assert ascending.report.hits1 >= cell.report.hits1
        table = ablation_summary(cells)
        lines = table.strip().split("\n")
        assert lines[0].split("\t") == [
            "order", "history_length", "format", "hits@1", "hits@3", "hits@10", "n_queries"
        ]
        assert len(lines) == 5

    def test_history_length_axis_uses_shared_retrieval(
        self, synthetic_dataset, synthetic_bank
    ):
        kg = synthetic_dataset.union_kg()
        queries = queries_from_split(synthetic_dataset, "test")[:30]
        index = build_filter_index(synthetic_dataset)
        cells = ablation_run(
            kg, synthetic_bank, queries,
            orders=["ascending"], history_lengths=[10, 50], formats=["index"],
            predictor=OraclePredictor(synthetic_bank), filter_index=index,
        )
        # cross-check one cell against a direct evaluation at that cap
        histories = retrieve_batch(kg, synthetic_bank, queries, RetrievalConfig())
        direct, _ = evaluate_histories(
            histories, OraclePredictor(synthetic_bank),
            PromptConfig(max_facts=10), index, kg,
        )
        ten = next(c for c in cells if c.history_length == 10)
        assert (ten.report.hits1, ten.report.hits3, ten.report.hits10) == (
            direct.hits1, direct.hits3, direct.hits10
        )
