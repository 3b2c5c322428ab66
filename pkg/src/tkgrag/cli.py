"""Command-line pipeline driver.

Every subcommand maps to one module entry point and records a manifest with
the config fingerprint next to its artifacts. Exit codes: 0 ok, 1 validation
failure, 2 runtime failure, 3 transport failure.
"""
from __future__ import annotations

import functools
import json
import os
import sys
from datetime import datetime, timezone

import click

from .client import (
    ClientError,
    TransportError,
    generate_batch,
    parse_predictions,
    resolve_endpoint,
)
from .config import ConfigError, RunConfig, build_run_config, load_config_file
from .evaluation import (
    LLMPredictor,
    OraclePredictor,
    ablation_run,
    ablation_summary,
    build_filter_index,
    run_eval,
)
from .kg import Dataset, DatasetFormatError, DatasetSpec, load_dataset
from .prompts import Prompt, build_prompt, export_finetune_set
from .retrieval import (
    history_from_dict,
    history_to_dict,
    query_to_dict,
    queries_from_split,
    retrieve_batch,
)
from .rules import RuleBank, learn_rules
from .synthetic import SyntheticSpec, write_synthetic_dataset


def _abort(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, DatasetFormatError) as exc:
            _abort(1, str(exc))
        except ValueError as exc:
            _abort(1, str(exc))
        except TransportError as exc:
            _abort(3, str(exc))
        except ClientError as exc:
            _abort(2, str(exc))
        except OSError as exc:
            _abort(2, str(exc))

    return wrapper


def _dataset_options(fn):
    fn = click.option("--dataset-dir", default=None, help="Dataset directory.")(fn)
    fn = click.option(
        "--dataset", "dataset_name", default=None,
        help="Dataset name resolved under --data-root.",
    )(fn)
    fn = click.option("--data-root", default="data", show_default=True)(fn)
    fn = click.option("--time-gap", type=int, default=None)(fn)
    fn = click.option("--inverse/--no-inverse", default=None)(fn)
    return fn


def _retrieval_options(fn):
    fn = click.option("--window", type=int, default=None)(fn)
    fn = click.option("--top-rules", type=int, default=None)(fn)
    fn = click.option("--history-len", type=int, default=None)(fn)
    fn = click.option("--stepwise/--no-stepwise", default=None)(fn)
    return fn


def _prompt_options(fn):
    fn = click.option("--format", "fmt", type=click.Choice(["index", "lexical"]), default=None)(fn)
    fn = click.option(
        "--order",
        type=click.Choice(["ascending", "descending", "random", "timestamps-removed"]),
        default=None,
    )(fn)
    fn = click.option("--order-seed", type=int, default=None)(fn)
    fn = click.option("--max-facts", type=int, default=None)(fn)
    fn = click.option("--instruction", default=None)(fn)
    fn = click.option("--char-budget", type=int, default=None)(fn)
    return fn


def _generation_options(fn):
    fn = click.option("--max-new-tokens", type=int, default=None)(fn)
    fn = click.option("--num-sequences", type=int, default=None)(fn)
    fn = click.option("--temperature", type=float, default=None)(fn)
    fn = click.option("--timeout", type=float, default=None)(fn)
    fn = click.option("--retries", type=int, default=None)(fn)
    fn = click.option("--backoff", type=float, default=None)(fn)
    fn = click.option("--in-flight", type=int, default=None)(fn)
    return fn


def _resolve_dir(dataset_dir, dataset_name, data_root):
    if dataset_dir:
        return dataset_dir
    if dataset_name:
        return os.path.join(data_root, dataset_name)
    return None


def _config(
    config_path,
    dataset_dir=None,
    dataset_name=None,
    data_root="data",
    time_gap=None,
    inverse=None,
    mining=None,
    retrieval=None,
    prompt=None,
    generation=None,
    endpoint=None,
    seed=None,
) -> RunConfig:
    payload = load_config_file(config_path) if config_path else {}
    overrides = {
        "dataset": {
            "dir": _resolve_dir(dataset_dir, dataset_name, data_root),
            "time_gap": time_gap,
            "inverse": inverse,
        },
        "mining": mining or {},
        "retrieval": retrieval or {},
        "prompt": prompt or {},
        "generation": generation or {},
        "endpoint": endpoint,
        "seed": seed,
    }
    return build_run_config(payload, overrides)


def _load_data(config: RunConfig) -> Dataset:
    if not config.dataset.dir:
        raise ConfigError("dataset.dir: no dataset directory given")
    spec = DatasetSpec(time_gap=config.dataset.time_gap, inverse=config.dataset.inverse)
    return load_dataset(config.dataset.dir, spec)


def _write_manifest(path: str, command: str, config: RunConfig, extra: dict | None = None):
    payload = {
        "command": command,
        "fingerprint": config.fingerprint,
        "config": config.as_dict(),
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    payload.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


@click.group()
def main():
    """Temporal knowledge graph forecasting pipeline."""


@main.command()
@click.option("--out", required=True, help="Directory to create the dataset in.")
@click.option("--entities", type=int, default=None)
@click.option("--noise-relations", type=int, default=None)
@click.option("--body-events", type=int, default=None)
@click.option("--noise-events", type=int, default=None)
@click.option("--follow-prob", type=float, default=None)
@click.option("--t-span", type=int, default=None)
@click.option("--planted-entities", type=int, default=None)
@click.option("--seed", type=int, default=None)
@guarded
def synth(out, entities, noise_relations, body_events, noise_events, follow_prob,
          t_span, planted_entities, seed):
    """Generate a synthetic dataset with one planted temporal implication."""
    kwargs = {
        "n_entities": entities,
        "n_noise_relations": noise_relations,
        "n_body_events": body_events,
        "n_noise_events": noise_events,
        "follow_prob": follow_prob,
        "t_span": t_span,
        "planted_entities": planted_entities,
        "seed": seed,
    }
    spec = SyntheticSpec(**{k: v for k, v in kwargs.items() if v is not None})
    truth = write_synthetic_dataset(out, spec)
    click.echo(
        f"wrote {truth['n_events']} events to {out} "
        f"(splits {truth['split_sizes']})"
    )


@main.command()
@click.option("--config", "config_path", default=None)
@_dataset_options
@click.option("--walks", type=int, default=None)
@click.option("--min-body-support", type=int, default=None)
@click.option("--grounding-cap", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--mine-splits", default="train", show_default=True,
              help="Comma-separated splits the mining graph merges.")
@click.option("--out", default="rules.json", show_default=True)
@guarded
def mine(config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
         walks, min_body_support, grounding_cap, seed, workers, mine_splits, out):
    """Mine temporal rules from the training split."""
    config = _config(
        config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
        mining={
            "num_walks": walks,
            "min_body_support": min_body_support,
            "grounding_cap": grounding_cap,
            "seed": seed,
        },
    )
    dataset = _load_data(config)
    kg = dataset.union_kg(tuple(s.strip() for s in mine_splits.split(",")))
    bank = learn_rules(kg, config.mining, workers=workers)
    _ensure_parent(out)
    bank.save(out)
    _write_manifest(out + ".manifest.json", "mine", config, {"n_rules": len(bank)})
    click.echo(f"mined {len(bank)} rules -> {out}")


@main.command()
@click.option("--config", "config_path", default=None)
@_dataset_options
@click.option("--rules", "rules_path", required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--retrieval-splits", default="train,valid,test", show_default=True,
              help="Comma-separated splits the retrieval graph merges.")
@_retrieval_options
@click.option("--out", default="histories.jsonl", show_default=True)
@guarded
def retrieve(config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
             rules_path, split, retrieval_splits, window, top_rules, history_len,
             stepwise, out):
    """Retrieve rule-guided histories for a split's queries."""
    config = _config(
        config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
        retrieval={
            "window": window,
            "top_rules": top_rules,
            "max_history": history_len,
            "stepwise": stepwise,
        },
    )
    dataset = _load_data(config)
    bank = RuleBank.load(rules_path)
    kg = dataset.union_kg(tuple(s.strip() for s in retrieval_splits.split(",")))
    queries = queries_from_split(dataset, split)
    histories = retrieve_batch(kg, bank, queries, config.retrieval)
    _ensure_parent(out)
    with open(out, "w", encoding="utf-8") as fh:
        for history in histories:
            fh.write(json.dumps(history_to_dict(history)) + "\n")
    _write_manifest(out + ".manifest.json", "retrieve", config,
                    {"split": split, "n_queries": len(queries)})
    click.echo(f"retrieved {len(histories)} histories -> {out}")


@main.command(name="prompt")
@click.option("--config", "config_path", default=None)
@_dataset_options
@click.option("--histories", "histories_path", required=True)
@_prompt_options
@click.option("--out", default="prompts.jsonl", show_default=True)
@guarded
def prompt_cmd(config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
               histories_path, fmt, order, order_seed, max_facts, instruction,
               char_budget, out):
    """Render retrieved histories into prompts."""
    config = _config(
        config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
        prompt={
            "format": fmt,
            "order": order,
            "order_seed": order_seed,
            "max_facts": max_facts,
            "instruction": instruction,
            "char_budget": char_budget,
        },
    )
    dataset = _load_data(config)
    kg = dataset.train
    _ensure_parent(out)
    count = 0
    with open(histories_path, encoding="utf-8") as src, open(out, "w", encoding="utf-8") as dst:
        for line in src:
            if not line.strip():
                continue
            history = history_from_dict(json.loads(line))
            rendered = build_prompt(history, config.prompt, kg)
            dst.write(
                json.dumps(
                    {
                        "query": query_to_dict(history.query),
                        "text": rendered.text,
                        "index_map": {str(k): v for k, v in rendered.index_map.items()},
                        "query_prefix": rendered.query_prefix,
                        "format": rendered.format,
                    }
                )
                + "\n"
            )
            count += 1
    _write_manifest(out + ".manifest.json", "prompt", config, {"n_prompts": count})
    click.echo(f"rendered {count} prompts -> {out}")


@main.command()
@click.option("--config", "config_path", default=None)
@_dataset_options
@click.option("--rules", "rules_path", required=True)
@click.option("--k", type=int, required=True, help="Number of samples to export.")
@click.option("--seed", type=int, default=None)
@_retrieval_options
@_prompt_options
@click.option("--out", default="finetune.jsonl", show_default=True)
@guarded
def export(config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
           rules_path, k, seed, window, top_rules, history_len, stepwise,
           fmt, order, order_seed, max_facts, instruction, char_budget, out):
    """Export an instruction-tuning dataset sampled from the training split."""
    config = _config(
        config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
        retrieval={
            "window": window,
            "top_rules": top_rules,
            "max_history": history_len,
            "stepwise": stepwise,
        },
        prompt={
            "format": fmt,
            "order": order,
            "order_seed": order_seed,
            "max_facts": max_facts,
            "instruction": instruction,
            "char_budget": char_budget,
        },
        seed=seed,
    )
    dataset = _load_data(config)
    bank = RuleBank.load(rules_path)
    _ensure_parent(out)
    manifest = export_finetune_set(
        dataset, bank, k, config.retrieval, config.prompt, config.seed, out,
        fingerprint=config.fingerprint,
    )
    click.echo(f"exported {manifest['n_samples']} samples -> {out}")


@main.command()
@click.option("--config", "config_path", default=None)
@_dataset_options
@click.option("--prompts", "prompts_path", required=True)
@click.option("--endpoint", default=None, help="Completion endpoint URL (or TKGRAG_ENDPOINT).")
@_generation_options
@click.option("--out", default="predictions.jsonl", show_default=True)
@guarded
def infer(config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
          prompts_path, endpoint, max_new_tokens, num_sequences, temperature,
          timeout, retries, backoff, in_flight, out):
    """Send rendered prompts to the completion endpoint and parse predictions."""
    config = _config(
        config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
        generation={
            "max_new_tokens": max_new_tokens,
            "num_sequences": num_sequences,
            "temperature": temperature,
            "timeout": timeout,
            "retries": retries,
            "backoff": backoff,
            "in_flight": in_flight,
        },
        endpoint=endpoint,
    )
    dataset = _load_data(config)
    kg = dataset.train
    url = resolve_endpoint(config.endpoint)

    rows = []
    with open(prompts_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    prompts = [
        Prompt(
            text=row["text"],
            index_map={int(k): v for k, v in row.get("index_map", {}).items()},
            query_prefix=row.get("query_prefix", ""),
            format=row.get("format", "index"),
        )
        for row in rows
    ]
    completions = generate_batch(prompts, config.generation, url)
    _ensure_parent(out)
    with open(out, "w", encoding="utf-8") as fh:
        for row, prompt, seqs in zip(rows, prompts, completions):
            parsed = parse_predictions(seqs, prompt, kg)
            fh.write(
                json.dumps(
                    {
                        "query": row.get("query"),
                        "ranked": list(parsed.ranked),
                        "raw": list(parsed.raw_texts),
                        "n_skipped": parsed.n_skipped,
                    }
                )
                + "\n"
            )
    _write_manifest(out + ".manifest.json", "infer", config, {"n_prompts": len(prompts)})
    click.echo(f"parsed predictions for {len(prompts)} prompts -> {out}")


@main.command(name="eval")
@click.option("--config", "config_path", default=None)
@_dataset_options
@click.option("--rules", "rules_path", required=True)
@click.option("--predictor", type=click.Choice(["oracle", "llm"]), default="oracle",
              show_default=True)
@click.option("--split", default="test", show_default=True)
@click.option("--retrieval-splits", default="train,valid,test", show_default=True)
@click.option("--filter-splits", default="train,valid,test", show_default=True)
@click.option("--endpoint", default=None)
@click.option("--seeds", default=None,
              help="Comma-separated run seeds; multiple seeds report the "
                   "mean and half-range across runs.")
@_retrieval_options
@_prompt_options
@_generation_options
@click.option("--out-dir", default="runs/eval", show_default=True)
@guarded
def eval_cmd(config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
             rules_path, predictor, split, retrieval_splits, filter_splits, endpoint,
             seeds, window, top_rules, history_len, stepwise,
             fmt, order, order_seed, max_facts, instruction, char_budget,
             max_new_tokens, num_sequences, temperature, timeout, retries, backoff,
             in_flight, out_dir):
    """Run time-aware filtered Hits@1/3/10 evaluation on a split."""
    seed_list = [int(s) for s in seeds.split(",")] if seeds else [None]
    reports = []
    config = None
    for run_seed in seed_list:
        config = _config(
            config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
            retrieval={
                "window": window,
                "top_rules": top_rules,
                "max_history": history_len,
                "stepwise": stepwise,
            },
            prompt={
                "format": fmt,
                "order": order,
                "order_seed": order_seed,
                "max_facts": max_facts,
                "instruction": instruction,
                "char_budget": char_budget,
            },
            generation={
                "max_new_tokens": max_new_tokens,
                "num_sequences": num_sequences,
                "temperature": temperature,
                "timeout": timeout,
                "retries": retries,
                "backoff": backoff,
                "in_flight": in_flight,
            },
            endpoint=endpoint,
            seed=run_seed,
        )
        dataset = _load_data(config)
        bank = RuleBank.load(rules_path)
        kg = dataset.union_kg(tuple(s.strip() for s in retrieval_splits.split(",")))
        queries = queries_from_split(dataset, split)
        filter_index = build_filter_index(
            dataset, tuple(s.strip() for s in filter_splits.split(","))
        )
        if predictor == "oracle":
            engine = OraclePredictor(bank)
        else:
            engine = LLMPredictor(kg, resolve_endpoint(config.endpoint),
                                  config.generation)
        run_dir = out_dir if len(seed_list) == 1 else os.path.join(
            out_dir, f"seed-{config.seed}"
        )
        os.makedirs(run_dir, exist_ok=True)
        report, _records = run_eval(
            kg, bank, queries, engine, config.retrieval, config.prompt, filter_index,
            out_dir=run_dir, fingerprint=config.fingerprint,
        )
        _write_manifest(os.path.join(run_dir, "manifest.json"), "eval", config,
                        {"split": split, "predictor": predictor})
        reports.append(report)

    for k, values in (("1", [r.hits1 for r in reports]),
                      ("3", [r.hits3 for r in reports]),
                      ("10", [r.hits10 for r in reports])):
        mean = sum(values) / len(values)
        if len(values) == 1:
            click.echo(f"hits@{k}\t{mean:.4f}")
        else:
            half_range = (max(values) - min(values)) / 2
            click.echo(f"hits@{k}\t{mean:.4f} ± {half_range:.4f}")
    click.echo(f"n_queries\t{reports[0].n_queries}\n"
               f"n_unparsed\t{reports[0].n_unparsed}")
    if len(reports) > 1:
        summary = {
            "seeds": [int(s) for s in seed_list],
            "hits": {
                k: {
                    "mean": sum(v) / len(v),
                    "half_range": (max(v) - min(v)) / 2,
                    "per_seed": v,
                }
                for k, v in (("1", [r.hits1 for r in reports]),
                             ("3", [r.hits3 for r in reports]),
                             ("10", [r.hits10 for r in reports]))
            },
        }
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")


@main.command()
@click.option("--config", "config_path", default=None)
@_dataset_options
@click.option("--rules", "rules_path", required=True)
@click.option("--predictor", type=click.Choice(["oracle", "llm"]), default="oracle",
              show_default=True)
@click.option("--split", default="test", show_default=True)
@click.option("--retrieval-splits", default="train,valid,test", show_default=True)
@click.option("--filter-splits", default="train,valid,test", show_default=True)
@click.option("--endpoint", default=None)
@click.option("--orders", default="ascending", show_default=True)
@click.option("--lengths", default="50", show_default=True)
@click.option("--formats", default="index", show_default=True)
@_retrieval_options
@_generation_options
@click.option("--out-dir", default="runs/ablation", show_default=True)
@guarded
def ablate(config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
           rules_path, predictor, split, retrieval_splits, filter_splits, endpoint,
           orders, lengths, formats, window, top_rules, history_len, stepwise,
           max_new_tokens, num_sequences, temperature, timeout, retries, backoff,
           in_flight, out_dir):
    """Evaluate a grid of prompt order, history length, and format configs."""
    config = _config(
        config_path, dataset_dir, dataset_name, data_root, time_gap, inverse,
        retrieval={
            "window": window,
            "top_rules": top_rules,
            "max_history": history_len,
            "stepwise": stepwise,
        },
        generation={
            "max_new_tokens": max_new_tokens,
            "num_sequences": num_sequences,
            "temperature": temperature,
            "timeout": timeout,
            "retries": retries,
            "backoff": backoff,
            "in_flight": in_flight,
        },
        endpoint=endpoint,
    )
    dataset = _load_data(config)
    bank = RuleBank.load(rules_path)
    kg = dataset.union_kg(tuple(s.strip() for s in retrieval_splits.split(",")))
    queries = queries_from_split(dataset, split)
    filter_index = build_filter_index(
        dataset, tuple(s.strip() for s in filter_splits.split(","))
    )
    if predictor == "oracle":
        engine = OraclePredictor(bank)
    else:
        engine = LLMPredictor(kg, resolve_endpoint(config.endpoint), config.generation)
    cells = ablation_run(
        kg, bank, queries,
        orders=[o.strip() for o in orders.split(",")],
        history_lengths=[int(n) for n in lengths.split(",")],
        formats=[f.strip() for f in formats.split(",")],
        predictor=engine,
        retrieval_cfg=config.retrieval,
        filter_index=filter_index,
        base_prompt_cfg=config.prompt,
        fingerprint=config.fingerprint,
    )
    os.makedirs(out_dir, exist_ok=True)
    summary = ablation_summary(cells)
    with open(os.path.join(out_dir, "summary.tsv"), "w", encoding="utf-8") as fh:
        fh.write(summary)
    with open(os.path.join(out_dir, "reports.json"), "w", encoding="utf-8") as fh:
        json.dump(
            [
                {
                    "order": c.order,
                    "history_length": c.history_length,
                    "format": c.format,
                    "report": c.report.as_dict(),
                }
                for c in cells
            ],
            fh,
            indent=2,
        )
        fh.write("\n")
    _write_manifest(os.path.join(out_dir, "manifest.json"), "ablate", config,
                    {"split": split, "predictor": predictor, "n_cells": len(cells)})
    click.echo(summary, nl=False)


if __name__ == "__main__":
    main()
