"""Prompt rendering and instruction-tuning dataset export.

History facts render one per line as `t:[subject, relation, n.object]` (index
form) or `t:[subject, relation, object]` (lexical form), followed by the
incomplete query line `t:[subject, relation,` that the model must finish.
Index form maps each distinct object to a small integer in order of first
appearance over the rendered lines.
"""
from __future__ import annotations

import dataclasses
import json
import os
import random
from dataclasses import dataclass
from typing import Optional

from .kg import Dataset, TemporalKG
from .retrieval import (
    RetrievalConfig,
    RetrievedHistory,
    queries_from_split,
    retrieve,
)
from .rules import RuleBank

DEFAULT_INSTRUCTION = (
    "You must predict the missing object entity at the end of the last "
    "quadruplet. Each fact has the form time:[subject, relation, index.object]. "
    "Respond with index.object only."
)

FORMATS = ("index", "lexical")
ORDERS = ("ascending", "descending", "random", "timestamps-removed")


@dataclass(frozen=True)
class PromptConfig:
    format: str = "index"
    order: str = "ascending"
    order_seed: int = 0
    max_facts: Optional[int] = None
    instruction: str = DEFAULT_INSTRUCTION
    char_budget: int = 12000

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")
        if self.max_facts is not None and self.max_facts < 0:
            raise ValueError("max_facts must be >= 0")
        if self.char_budget < 1:
            raise ValueError("char_budget must be >= 1")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Prompt:
    """Rendered text plus the candidate-object index map (index format only;
    empty for lexical). text always ends with query_prefix."""

    text: str
    index_map: dict[int, int]
    query_prefix: str
    format: str


@dataclass(frozen=True)
class InstructionSample:
    instruction: str
    input: str
    output: str


def display_name(name: str) -> str:
    return name.replace(" ", "_")


def select_history(history: RetrievedHistory, cfg: PromptConfig) -> RetrievedHistory:
    """Apply the prompt-level fact cap, replaying the retriever's selection
    priority (query-relation facts, then rule groups by confidence, most
    recent first within a group), then restore canonical ascending order."""
    if cfg.max_facts is None or len(history) <= cfg.max_facts:
        return history
    paired = sorted(
        zip(history.facts, history.provenance),
        key=lambda fp: (fp[1].rank, -fp[0].t, -fp[0].object),
    )[: cfg.max_facts]
    paired.sort(key=lambda fp: (fp[0].t, fp[1].rank, fp[0].object))
    return RetrievedHistory(
        query=history.query,
        facts=tuple(fact for fact, _ in paired),
        provenance=tuple(prov for _, prov in paired),
    )


def _rendered_sequence(
    history: RetrievedHistory, cfg: PromptConfig
) -> list[tuple]:
    pairs = list(zip(history.facts, history.provenance))
    if cfg.order == "descending":
        pairs.reverse()
    elif cfg.order == "random":
        random.Random(cfg.order_seed).shuffle(pairs)
    return pairs


def build_prompt(history: RetrievedHistory, cfg: PromptConfig, kg: TemporalKG) -> Prompt:
    """Render one retrieved history into the full prompt string.

    Entity and relation names have internal spaces replaced by underscores.
    The trailing query line carries no object and no trailing space, e.g.
    `334:[Abdul, Make_an_appeal_or_request,`.
    """
    selected = select_history(history, cfg)
    pairs = _rendered_sequence(selected, cfg)
    with_time = cfg.order != "timestamps-removed"

    index_map: dict[int, int] = {}
    lines: list[str] = []
    for fact, _ in pairs:
        subject = display_name(kg.entity_name(fact.subject))
        relation = display_name(kg.relation_name(fact.relation))
        obj = display_name(kg.entity_name(fact.object))
        if cfg.format == "index":
            if fact.object not in index_map:
                index_map[fact.object] = len(index_map)
            obj = f"{index_map[fact.object]}.{obj}"
        prefix = f"{fact.t}:" if with_time else ""
        lines.append(f"{prefix}[{subject}, {relation}, {obj}]")

    query = selected.query
    q_subject = display_name(kg.entity_name(query.subject))
    q_relation = display_name(kg.relation_name(query.relation))
    q_prefix = f"{query.t}:" if with_time else ""
    query_line = f"{q_prefix}[{q_subject}, {q_relation},"

    text = cfg.instruction + "\n" + "".join(line + "\n" for line in lines) + query_line
    return Prompt(text=text, index_map=index_map, query_prefix=query_line, format=cfg.format)


def make_instruction_sample(
    history: RetrievedHistory, cfg: PromptConfig, kg: TemporalKG
) -> InstructionSample:
    """Split a prompt into (instruction, input, output) with the gold
    completion as output. Unseen gold objects get the next fresh index."""
    gold = history.query.gold_object
    if gold is None:
        raise ValueError("query has no gold object")
    prompt = build_prompt(history, cfg, kg)
    gold_name = display_name(kg.entity_name(gold))
    if cfg.format == "index":
        index = prompt.index_map.get(gold, len(prompt.index_map))
        output = f"{index}.{gold_name}]"
    else:
        output = f"{gold_name}]"
    return InstructionSample(
        instruction=cfg.instruction,
        input=prompt.text[len(cfg.instruction):],
        output=output,
    )


def sample_fewshot(n_train_queries: int, k: int, seed: int) -> list[int]:
    """k distinct query indices drawn uniformly without replacement, returned
    ascending so the exported set preserves temporal order."""
    if not 1 <= k <= n_train_queries:
        raise ValueError(
            f"k must be in [1, {n_train_queries}], got {k}"
        )
    return sorted(random.Random(seed).sample(range(n_train_queries), k))


def export_finetune_set(
    dataset: Dataset,
    bank: RuleBank,
    k: int,
    retrieval_cfg: RetrievalConfig,
    prompt_cfg: PromptConfig,
    seed: int,
    out_path: str,
    fingerprint: Optional[str] = None,
) -> dict:
    """Write k instruction samples drawn from the training split as JSON lines
    plus a manifest recording every knob that shaped them.

    Retrieval for each sampled query runs against the training split only and
    sees nothing at or after the query's own time step.
    """
    train_kg = dataset.train
    queries = queries_from_split(dataset, "train")
    indices = sample_fewshot(len(queries), k, seed)

    over_budget = 0
    out_dir = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for index in indices:
            history = retrieve(train_kg, bank, queries[index], retrieval_cfg)
            sample = make_instruction_sample(history, prompt_cfg, train_kg)
            if len(sample.instruction) + len(sample.input) + len(sample.output) > prompt_cfg.char_budget:
                over_budget += 1
            fh.write(
                json.dumps(
                    {
                        "instruction": sample.instruction,
                        "input": sample.input,
                        "output": sample.output,
                    }
                )
                + "\n"
            )

    manifest = {
        "k": k,
        "seed": seed,
        "n_samples": len(indices),
        "retrieval": retrieval_cfg.as_dict(),
        "prompt": prompt_cfg.as_dict(),
        "mining_params": bank.params.as_dict(),
        "dataset_stats": dataset.stats().as_dict(),
        "over_char_budget": over_budget,
        "output": os.path.basename(out_path),
    }
    if fingerprint is not None:
        manifest["fingerprint"] = fingerprint
    manifest_path = out_path + ".manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest
