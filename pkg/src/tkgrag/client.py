"""Completion-endpoint client, generation parsing, and the rule-score oracle.

Wire contract: POST JSON {"prompt", "max_new_tokens", "num_sequences",
"temperature"} to the endpoint; it answers {"sequences": [...]} in rank order
or {"error": "..."}. Transport failures (connection errors, timeouts) are
retried with exponential backoff up to the retry budget; endpoint-reported
errors and malformed responses are surfaced immediately as distinct
exceptions.
"""
from __future__ import annotations

import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import requests

from .kg import TemporalKG
from .prompts import Prompt
from .retrieval import Query, RetrievedHistory
from .rules import RuleBank

ENDPOINT_ENV = "TKGRAG_ENDPOINT"
MAX_RANKED = 10


class ClientError(Exception):
    """Base class for completion-client failures."""


class TransportError(ClientError):
    """Network-level failure that persisted through the retry budget."""


class MalformedResponseError(ClientError):
    """The endpoint answered, but not with the documented response shape."""


class EndpointError(ClientError):
    """The endpoint reported an error payload or a failure status."""


@dataclass(frozen=True)
class GenParams:
    max_new_tokens: int = 128
    num_sequences: int = 10
    temperature: float = 0.0
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.25
    in_flight: int = 8

    def __post_init__(self):
        if self.num_sequences < 1:
            raise ValueError("num_sequences must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.in_flight < 1:
            raise ValueError("in_flight must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def as_dict(self) -> dict:
        return {
            "max_new_tokens": self.max_new_tokens,
            "num_sequences": self.num_sequences,
            "temperature": self.temperature,
            "timeout": self.timeout,
            "retries": self.retries,
            "backoff": self.backoff,
            "in_flight": self.in_flight,
        }


@dataclass(frozen=True)
class PredictionList:
    """Distinct entity ids, best first, capped at 10."""

    ranked: tuple[int, ...]
    raw_texts: tuple[str, ...] = ()
    n_skipped: int = 0


def resolve_endpoint(explicit: Optional[str] = None) -> str:
    endpoint = explicit or os.environ.get(ENDPOINT_ENV)
    if not endpoint:
        raise ValueError(
            f"no endpoint given and {ENDPOINT_ENV} is not set"
        )
    return endpoint


def generate(
    prompt: Prompt | str, params: GenParams, endpoint: str, session=None
) -> list[str]:
    """Request up to params.num_sequences completions, preserving the
    endpoint's rank order. Performs at most 1 + params.retries attempts."""
    text = prompt.text if isinstance(prompt, Prompt) else prompt
    payload = {
        "prompt": text,
        "max_new_tokens": params.max_new_tokens,
        "num_sequences": params.num_sequences,
        "temperature": params.temperature,
    }
    post = (session or requests).post
    last_exc: Optional[Exception] = None
    for attempt in range(1 + params.retries):
        if attempt:
            time.sleep(params.backoff * (2 ** (attempt - 1)))
        try:
            response = post(endpoint, json=payload, timeout=params.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_exc = exc
            continue
        if response.status_code != 200:
            body = _try_json(response)
            if isinstance(body, dict) and "error" in body:
                raise EndpointError(str(body["error"]))
            raise EndpointError(f"endpoint returned HTTP {response.status_code}")
        body = _try_json(response)
        if body is None:
            raise MalformedResponseError("response body is not valid JSON")
        if isinstance(body, dict) and "error" in body:
            raise EndpointError(str(body["error"]))
        if (
            not isinstance(body, dict)
            or not isinstance(body.get("sequences"), list)
            or not all(isinstance(s, str) for s in body["sequences"])
        ):
            raise MalformedResponseError('response lacks a "sequences" string list')
        return body["sequences"][: params.num_sequences]
    raise TransportError(
        f"request failed after {1 + params.retries} attempts: {last_exc}"
    )


def _try_json(response):
    try:
        return response.json()
    except ValueError:
        return None


def generate_batch(
    prompts: Sequence[Prompt | str], params: GenParams, endpoint: str
) -> list[list[str]]:
    """Dispatch requests with at most params.in_flight concurrently; results
    come back in prompt order regardless of completion order."""
    if not prompts:
        return []
    with ThreadPoolExecutor(max_workers=params.in_flight) as pool:
        return list(pool.map(lambda p: generate(p, params, endpoint), prompts))


_INDEXED_RE = re.compile(r"(\d+)\.(.+)", re.DOTALL)
_BARE_INDEX_RE = re.compile(r"(\d+)\.?")


def _clip(completion: str) -> str:
    head = completion.split("\n", 1)[0]
    bracket = head.find("]")
    if bracket >= 0:
        head = head[:bracket]
    return head.strip()


def parse_predictions(
    completions: Sequence[str], prompt: Prompt, kg: TemporalKG
) -> PredictionList:
    """Resolve completion strings to a ranked entity list.

    Each completion is clipped at the first "]" or newline and matched as
    "n.name" (index looked up in the prompt's map, name cross-checked),
    a bare index, or a bare entity name; names compare after space/underscore
    normalization. Unresolvable completions are skipped and counted.
    """
    reverse_map = {index: entity for entity, index in prompt.index_map.items()}
    by_name = kg.normalized_entity_ids()
    ranked: list[int] = []
    skipped = 0
    for completion in completions:
        entity = _resolve(_clip(completion), reverse_map, by_name, kg)
        if entity is None:
            skipped += 1
        elif entity not in ranked:
            ranked.append(entity)
    return PredictionList(
        ranked=tuple(ranked[:MAX_RANKED]),
        raw_texts=tuple(completions),
        n_skipped=skipped,
    )


def _resolve(
    clipped: str,
    reverse_map: dict[int, int],
    by_name: dict[str, int],
    kg: TemporalKG,
) -> Optional[int]:
    if not clipped:
        return None
    match = _INDEXED_RE.fullmatch(clipped)
    if match:
        index, name = int(match.group(1)), match.group(2).strip()
        normalized = name.replace(" ", "_")
        if index in reverse_map:
            entity = reverse_map[index]
            if kg.entity_name(entity).replace(" ", "_") == normalized:
                return entity
        # fresh or mismatched index: the explicit name decides
        return by_name.get(normalized)
    match = _BARE_INDEX_RE.fullmatch(clipped)
    if match:
        return reverse_map.get(int(match.group(1)))
    return by_name.get(clipped.replace(" ", "_"))


def rule_score_predict(
    history: RetrievedHistory, bank: RuleBank, query: Query
) -> PredictionList:
    """Deterministic endpoint-free predictor used as the evaluation oracle.

    Each history fact about an object contributes the confidence of the rule
    linking its relation to the query relation, plus 1.0 when it carries the
    query relation itself. Ties break toward the candidate with the most
    recent supporting fact, then the lower entity id.
    """
    confidence_by_body = {
        rule.body_relation: rule.confidence for rule in bank.rules_for(query.relation)
    }
    scores: dict[int, float] = {}
    last_support: dict[int, int] = {}
    for fact in history.facts:
        weight = confidence_by_body.get(fact.relation, 0.0)
        if fact.relation == query.relation:
            weight += 1.0
        if weight <= 0.0:
            continue
        scores[fact.object] = scores.get(fact.object, 0.0) + weight
        last_support[fact.object] = max(last_support.get(fact.object, -1), fact.t)
    ranked = sorted(
        scores, key=lambda obj: (-scores[obj], -last_support[obj], obj)
    )[:MAX_RANKED]
    return PredictionList(ranked=tuple(ranked))
