import json
import os
import re

import pytest

from tkgrag.kg import Quadruple
from tkgrag.prompts import (
    DEFAULT_INSTRUCTION,
    PromptConfig,
    build_prompt,
    export_finetune_set,
    make_instruction_sample,
    sample_fewshot,
    select_history,
)
from tkgrag.retrieval import (
    Query,
    RetrievalConfig,
    RetrievedHistory,
    queries_from_split,
    retrieve,
)

from golden_fixture import GOLDEN_DIR, golden_history, golden_kg, golden_name, render_all


class TestGoldenPrompts:
    @pytest.mark.parametrize("fmt", ["index", "lexical"])
    @pytest.mark.parametrize(
        "order", ["ascending", "descending", "random", "timestamps-removed"]
    )
    def test_byte_identical_to_golden_file(self, fmt, order):
        cfg = PromptConfig(format=fmt, order=order, order_seed=0)
        text = build_prompt(golden_history(), cfg, golden_kg()).text
        path = os.path.join(GOLDEN_DIR, golden_name(fmt, order))
        with open(path, encoding="utf-8") as fh:
            assert text == fh.read()

    def test_render_is_pure(self):
        one = render_all()
        two = render_all()
        assert one == two


class TestBuildPrompt:
    def test_query_line_form(self):
        prompt = build_prompt(golden_history(), PromptConfig(), golden_kg())
        assert prompt.query_prefix == "334:[Abdul, Make_an_appeal_or_request,"
        assert prompt.text.endswith(prompt.query_prefix)
        assert not prompt.query_prefix.endswith(" ")

    def test_index_map_first_appearance(self):
        prompt = build_prompt(golden_history(), PromptConfig(), golden_kg())
        assert prompt.index_map == {1: 0, 2: 1}  # France -> 0, Germany -> 1
        assert prompt.text.count("0.France") == 2

    def test_index_map_follows_rendered_order(self):
        cfg = PromptConfig(order="descending")
        prompt = build_prompt(golden_history(), cfg, golden_kg())
        assert list(prompt.index_map) == [1, 2]

    def test_lexical_has_empty_index_map(self):
        prompt = build_prompt(golden_history(), PromptConfig(format="lexical"), golden_kg())
        assert prompt.index_map == {}

    def test_empty_history(self):
        history = RetrievedHistory(Query(0, 0, 334), (), ())
        prompt = build_prompt(history, PromptConfig(format="lexical"), golden_kg())
        assert prompt.text == (
            DEFAULT_INSTRUCTION + "\n" + "334:[Abdul, Make_an_appeal_or_request,"
        )

    def test_index_lines_parse_back_to_quadruples(self):
        kg = golden_kg()
        history = golden_history()
        prompt = build_prompt(history, PromptConfig(), kg)
        line_re = re.compile(r"^(\d+):\[(.+), (.+), (\d+)\.(.+)\]$")
        entity_by_name = {name.replace(" ", "_"): i for i, name in enumerate(kg.entities)}
        relation_by_name = {name.replace(" ", "_"): i for i, name in enumerate(kg.relations)}
        reverse_index = {v: k for k, v in prompt.index_map.items()}
        recovered = []
        for line in prompt.text.split("\n")[1:-1]:
            match = line_re.match(line)
            assert match, line
            t, subject, relation, idx, obj = match.groups()
            assert reverse_index[int(idx)] == entity_by_name[obj]
            recovered.append(
                Quadruple(entity_by_name[subject], relation_by_name[relation],
                          entity_by_name[obj], int(t))
            )
        assert tuple(recovered) == history.facts

    def test_char_budget_on_full_histories(self, synthetic_dataset, synthetic_bank):
        kg = synthetic_dataset.union_kg()
        cfg = PromptConfig(max_facts=50)
        for query in queries_from_split(synthetic_dataset, "test")[:100]:
            history = retrieve(kg, synthetic_bank, query, RetrievalConfig(max_history=50))
            prompt = build_prompt(history, cfg, kg)
            assert len(prompt.text) < 12000

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            PromptConfig(format="verse")
        with pytest.raises(ValueError):
            PromptConfig(order="sideways")
        with pytest.raises(ValueError):
            PromptConfig(max_facts=-1)


class TestSelectHistory:
    def test_truncation_equals_retrieval_at_smaller_budget(
        self, synthetic_dataset, synthetic_bank
    ):
        kg = synthetic_dataset.union_kg()
        for query in queries_from_split(synthetic_dataset, "test")[:40]:
            wide = retrieve(kg, synthetic_bank, query, RetrievalConfig(max_history=50))
            narrow = retrieve(kg, synthetic_bank, query, RetrievalConfig(max_history=10))
            clipped = select_history(wide, PromptConfig(max_facts=10))
            assert clipped.facts == narrow.facts
            assert clipped.provenance == narrow.provenance

    def test_no_cap_returns_input(self):
        history = golden_history()
        assert select_history(history, PromptConfig()) is history


class TestInstructionSamples:
    def test_gold_present_uses_its_index(self):
        history = golden_history()
        history = RetrievedHistory(
            Query(0, 0, 334, gold_object=1), history.facts, history.provenance
        )
        sample = make_instruction_sample(history, PromptConfig(), golden_kg())
        assert sample.output == "0.France]"

    def test_gold_unseen_gets_fresh_index(self):
        sample = make_instruction_sample(golden_history(), PromptConfig(), golden_kg())
        assert sample.output == "2.New_Entity]"

    def test_lexical_output(self):
        sample = make_instruction_sample(
            golden_history(), PromptConfig(format="lexical"), golden_kg()
        )
        assert sample.output == "New_Entity]"

    def test_instruction_plus_input_is_the_prompt(self):
        cfg = PromptConfig()
        sample = make_instruction_sample(golden_history(), cfg, golden_kg())
        prompt = build_prompt(golden_history(), cfg, golden_kg())
        assert sample.instruction + sample.input == prompt.text
        assert sample.output

    def test_missing_gold_rejected(self):
        history = RetrievedHistory(Query(0, 0, 334), (), ())
        with pytest.raises(ValueError, match="gold"):
            make_instruction_sample(history, PromptConfig(), golden_kg())


class TestFewshotSampling:
    def test_exhaustive(self):
        assert sample_fewshot(5, 5, seed=1) == [0, 1, 2, 3, 4]

    def test_deterministic(self):
        assert sample_fewshot(74854, 16, seed=3) == sample_fewshot(74854, 16, seed=3)

    def test_sorted_distinct_in_range(self):
        picks = sample_fewshot(1000, 100, seed=0)
        assert picks == sorted(set(picks))
        assert 0 <= picks[0] and picks[-1] < 1000

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            sample_fewshot(10, 11, seed=0)
        with pytest.raises(ValueError):
            sample_fewshot(10, 0, seed=0)

    def test_uniform_coverage_gap_bound(self):
        # simulated offline: the largest gap over 100 seeds was 838
        for seed in range(20):
            picks = sample_fewshot(74854, 1024, seed=seed)
            gaps = [b - a for a, b in zip(picks, picks[1:])]
            assert max(gaps) < 2000


def audit_no_leakage(jsonl_path):
    """Independent leakage check: every fact line's time step must precede the
    query line's, parsing the rendered text only."""
    line_re = re.compile(r"^(\d+):\[")
    audited = 0
    with open(jsonl_path, encoding="utf-8") as fh:
        for raw in fh:
            sample = json.loads(raw)
            lines = [l for l in sample["input"].split("\n") if l]
            query_t = int(line_re.match(lines[-1]).group(1))
            for line in lines[:-1]:
                fact_t = int(line_re.match(line).group(1))
                assert fact_t < query_t, f"future fact leaked: {line}"
            audited += 1
    return audited


class TestExport:
    @pytest.mark.parametrize("k", [1, 16, 64])
    def test_exact_sample_count(self, synthetic_dataset, synthetic_bank, tmp_path, k):
        out = tmp_path / "finetune.jsonl"
        manifest = export_finetune_set(
            synthetic_dataset, synthetic_bank, k,
            RetrievalConfig(), PromptConfig(), seed=1, out_path=str(out),
        )
        rows = [json.loads(line) for line in open(out, encoding="utf-8")]
        assert len(rows) == k == manifest["n_samples"]
        for row in rows:
            assert set(row) == {"instruction", "input", "output"}
            assert row["output"].endswith("]")

    def test_deterministic_per_seed(self, synthetic_dataset, synthetic_bank, tmp_path):
        a, b, c = (tmp_path / name for name in ("a.jsonl", "b.jsonl", "c.jsonl"))
        for path in (a, b):
            export_finetune_set(synthetic_dataset, synthetic_bank, 16,
                                RetrievalConfig(), PromptConfig(), seed=5,
                                out_path=str(path))
        export_finetune_set(synthetic_dataset, synthetic_bank, 16,
                            RetrievalConfig(), PromptConfig(), seed=6, out_path=str(c))
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()

    def test_no_future_leakage(self, synthetic_dataset, synthetic_bank, tmp_path):
        out = tmp_path / "finetune.jsonl"
        export_finetune_set(synthetic_dataset, synthetic_bank, 64,
                            RetrievalConfig(), PromptConfig(), seed=2, out_path=str(out))
        assert audit_no_leakage(out) == 64

    def test_manifest_records_configs(self, synthetic_dataset, synthetic_bank, tmp_path):
        out = tmp_path / "finetune.jsonl"
        export_finetune_set(synthetic_dataset, synthetic_bank, 4,
                            RetrievalConfig(max_history=20), PromptConfig(), seed=9,
                            out_path=str(out), fingerprint="abc123")
        manifest = json.loads((tmp_path / "finetune.jsonl.manifest.json").read_text())
        assert manifest["seed"] == 9
        assert manifest["retrieval"]["max_history"] == 20
        assert manifest["dataset_stats"]["n_entities"] == 20
        assert manifest["fingerprint"] == "abc123"
        assert manifest["over_char_budget"] == 0

    def test_k_out_of_range(self, synthetic_dataset, synthetic_bank, tmp_path):
        with pytest.raises(ValueError):
            export_finetune_set(synthetic_dataset, synthetic_bank, 10**7,
                                RetrievalConfig(), PromptConfig(), seed=1,
                                out_path=str(tmp_path / "x.jsonl"))

    def test_single_quadruple_train_set(self, tmp_path):
        from tkgrag.kg import DatasetSpec, load_dataset
        from tkgrag.rules import MiningParams, RuleBank

        data_dir = tmp_path / "data"
        data_dir.mkdir()
        for name, rows in (("train", ["0\t0\t1\t0"]), ("valid", []), ("test", [])):
            (data_dir / f"{name}.txt").write_text("".join(r + "\n" for r in rows))
        dataset = load_dataset(str(data_dir), DatasetSpec(inverse=False))
        bank = RuleBank({}, MiningParams())
        out = tmp_path / "one.jsonl"
        export_finetune_set(dataset, bank, 1, RetrievalConfig(), PromptConfig(),
                            seed=0, out_path=str(out))
        row = json.loads(out.read_text())
        # query at t = 0: empty history, input is just the query line
        assert row["input"] == "\n0:[0, 0,"
