"""Collect independent completions per (language, model) cell.

Every request is a fresh, stateless call. Responses are appended to a JSONL
store keyed by (cell, sequence index), so an interrupted collection resumes
where it stopped and a finished one is a no-op.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import numpy as np
import requests

from .study_config import SamplingParams, StudyConfig

__all__ = [
    "ResponseRecord",
    "Completion",
    "Provider",
    "ProviderError",
    "TransientProviderError",
    "ResponseStore",
    "MockProvider",
    "OpenAICompletionsProvider",
    "mock_provider",
    "collect_cell",
    "collect_study",
    "record_id_for",
    "read_responses",
    "MOCK_POSITIVE_TEXT",
    "MOCK_NEGATIVE_TEXT",
    "API_KEY_ENV",
]

log = logging.getLogger(__name__)

API_KEY_ENV = "BIASLENS_API_KEY"
BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0

MOCK_POSITIVE_TEXT = "[mock] completion in the positive class"
MOCK_NEGATIVE_TEXT = "[mock] completion outside the positive class"


class ProviderError(RuntimeError):
    """A request failed for good (retries exhausted or a non-retryable error)."""


class TransientProviderError(Exception):
    """Retryable failure: rate limit, server error, timeout."""


@dataclass(frozen=True)
class Completion:
    text: str
    meta: dict[str, Any] = field(default_factory=dict)


class Provider(Protocol):
    """One ``complete`` call is one independent session; no state carries over."""

    def complete(self, prompt: str, model_id: str, params: SamplingParams) -> str | Completion:
        ...


@dataclass(frozen=True)
class ResponseRecord:
    record_id: str
    study_id: str
    language_code: str
    model_id: str
    prompt_text: str
    completion_text: str
    created_at: str
    attempt: int
    provider_meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.attempt < 1:
            raise ValueError("attempt must be >= 1")
        if self.completion_text == "" and not self.provider_meta.get("refusal"):
            raise ValueError(f"record {self.record_id}: empty completion not flagged as refusal")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=False)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> ResponseRecord:
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__})

    @property
    def cell(self) -> tuple[str, str]:
        return (self.language_code, self.model_id)

    @property
    def sequence_index(self) -> int:
        return int(self.record_id.rsplit(":", 1)[1])


def record_id_for(study_id: str, language: str, model: str, index: int) -> str:
    return f"{study_id}:{language}:{model}:{index:06d}"


class ResponseStore:
    """Append-only JSONL file of :class:`ResponseRecord` objects.

    A torn final line left by a crash is discarded on open.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, ResponseRecord] = {}
        if self.path.exists():
            self._load()

    @classmethod
    def for_study(cls, directory, study_id: str) -> ResponseStore:
        return cls(Path(directory) / f"{study_id}.responses.jsonl")

    def _load(self):
        raw = self.path.read_bytes()
        if raw and not raw.endswith(b"\n"):
            cut = raw.rfind(b"\n") + 1
            log.warning("discarding torn final line in %s", self.path)
            with open(self.path, "r+b") as fh:
                fh.truncate(cut)
            raw = raw[:cut]
        for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            rec = ResponseRecord.from_dict(json.loads(line))
            if rec.record_id in self._records:
                raise ValueError(f"{self.path}:{lineno}: duplicate record {rec.record_id}")
            self._records[rec.record_id] = rec

    def __len__(self):
        return len(self._records)

    def __contains__(self, record_id):
        return record_id in self._records

    def records(self) -> list[ResponseRecord]:
        with self._lock:
            return list(self._records.values())

    def cell_records(self, study_id, language, model) -> list[ResponseRecord]:
        with self._lock:
            return [r for r in self._records.values()
                    if (r.study_id, r.language_code, r.model_id) == (study_id, language, model)]

    def append(self, record: ResponseRecord) -> bool:
        """Write ``record`` unless its id is already stored. Returns True if written."""
        line = record.to_json() + "\n"
        with self._lock:
            if record.record_id in self._records:
                return False
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
            self._records[record.record_id] = record
            return True


def read_responses(path) -> list[ResponseRecord]:
    return ResponseStore(path).records()


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

def _cell_hash(language: str, model: str) -> int:
    h = hashlib.blake2b(f"{language}\x1f{model}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


class MockProvider:
    """Deterministic stand-in that emits a canned positive or negative completion.

    The ``k``-th call for a cell draws from a stream keyed by ``(seed, cell, k)``,
    so a cell's sequence never depends on how calls to other cells interleave.
    """

    def __init__(self, seed: int, cell_probs: Mapping[tuple[str, str], float],
                 prompts: Mapping[str, str] | None = None):
        for key, p in cell_probs.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"cell {key} probability {p} outside [0, 1]")
        self.seed = seed
        self.cell_probs = dict(cell_probs)
        self._lang_of_prompt = ({v: k for k, v in prompts.items()} if prompts
                                else {lang: lang for lang, _ in self.cell_probs})
        self._counts: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()
        self.calls = 0

    def complete(self, prompt: str, model_id: str, params: SamplingParams) -> str:
        lang = self._lang_of_prompt.get(prompt)
        cell = (lang, model_id)
        if cell not in self.cell_probs:
            raise KeyError(f"mock provider has no probability for cell {cell}")
        with self._lock:
            k = self._counts.get(cell, 0)
            self._counts[cell] = k + 1
            self.calls += 1
        ss = np.random.SeedSequence(self.seed, spawn_key=(_cell_hash(*cell), k))
        u = np.random.Generator(np.random.PCG64(ss)).random()
        return MOCK_POSITIVE_TEXT if u < self.cell_probs[cell] else MOCK_NEGATIVE_TEXT


def mock_provider(seed: int, cell_probs, prompts=None) -> MockProvider:
    return MockProvider(seed, cell_probs, prompts)


class OpenAICompletionsProvider:
    """POSTs the prompt verbatim to an OpenAI-compatible ``/completions`` endpoint.

    No system preamble is added and no HTTP session is reused between calls.
    """

    def __init__(self, endpoint: str, api_key: str | None = None,
                 post: Callable[..., requests.Response] = requests.post):
        self.url = endpoint if endpoint.rstrip("/").endswith("/completions") \
            else endpoint.rstrip("/") + "/completions"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._post = post

    def complete(self, prompt: str, model_id: str, params: SamplingParams) -> Completion:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": model_id, "prompt": prompt, "max_tokens": params.max_tokens,
                   "temperature": params.temperature, "n": 1}
        try:
            resp = self._post(self.url, json=payload, headers=headers,
                              timeout=params.request_timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientProviderError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientProviderError(f"HTTP {resp.status_code} from {self.url}")
        if resp.status_code >= 400:
            raise ProviderError(f"HTTP {resp.status_code} from {self.url}: {resp.text[:200]}")
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice.get("text")
            if text is None:
                text = (choice.get("message") or {}).get("content") or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion response: {exc}") from exc
        meta = {"finish_reason": choice.get("finish_reason")}
        if data.get("id"):
            meta["response_id"] = data["id"]
        if data.get("model"):
            meta["served_model"] = data["model"]
        if choice.get("finish_reason") == "content_filter":
            meta["refusal"] = True
        return Completion(text=text, meta=meta)


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------

def _request_with_retry(provider, prompt, model_id, params, sleep, jitter):
    for attempt in range(1, params.max_retries + 2):
        try:
            out = provider.complete(prompt, model_id, params)
        except TransientProviderError as exc:
            if attempt > params.max_retries:
                raise ProviderError(
                    f"gave up after {attempt} attempts: {exc}") from exc
            delay = BACKOFF_BASE * BACKOFF_FACTOR ** (attempt - 1)
            sleep(delay * (1.0 + jitter()))
            continue
        except ProviderError:
            raise
        except Exception as exc:
            raise ProviderError(f"{type(exc).__name__}: {exc}") from exc
        if isinstance(out, Completion):
            return out.text, dict(out.meta), attempt
        return out, {}, attempt
    raise AssertionError("unreachable")


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


def collect_cell(provider: Provider, config: StudyConfig, language_code: str, model_id: str,
                 store: ResponseStore, *, sleep: Callable[[float], None] = time.sleep,
                 jitter: Callable[[], float] = random.random,
                 clock: Callable[[], str] = _utc_now) -> int:
    """Fill the cell up to ``config.samples_per_cell`` records.

    Records already in the store count towards the target. Up to
    ``config.sampling.parallelism`` requests are in flight at once. If a
    request fails for good, completed records stay in the store and
    :class:`ProviderError` is raised.

    Returns
    -------
    int
        Number of records added.
    """
    if language_code not in config.language_codes or model_id not in config.models:
        raise KeyError(f"cell ({language_code}, {model_id}) not in study {config.study_id!r}")
    prompt = config.prompt(language_code)
    params = config.sampling
    target = config.samples_per_cell
    present = {r.sequence_index
               for r in store.cell_records(config.study_id, language_code, model_id)}
    missing = [i for i in range(target) if i not in present]
    if not missing:
        return 0

    def task(index):
        text, meta, attempt = _request_with_retry(provider, prompt, model_id, params,
                                                  sleep, jitter)
        if text == "":
            meta["refusal"] = True
        rec = ResponseRecord(
            record_id=record_id_for(config.study_id, language_code, model_id, index),
            study_id=config.study_id, language_code=language_code, model_id=model_id,
            prompt_text=prompt, completion_text=text, created_at=clock(),
            attempt=attempt, provider_meta=meta)
        return store.append(rec)

    added = 0
    workers = min(params.parallelism, len(missing))
    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        # submit in windows so a failure stops new requests quickly
        pending = set()
        queue = iter(missing)
        error = None
        while True:
            while error is None and len(pending) < 2 * workers:
                index = next(queue, None)
                if index is None:
                    break
                pending.add(pool.submit(task, index))
            if not pending:
                break
            done, pending = wait(pending, return_when=FIRST_EXCEPTION)
            for fut in done:
                exc = fut.exception()
                if exc is not None:
                    error = error or exc
                else:
                    added += bool(fut.result())
        if error is not None:
            if isinstance(error, ProviderError):
                raise error
            raise ProviderError(f"store write failed: {error}") from error
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
    log.info("cell (%s, %s): %d new records", language_code, model_id, added)
    return added


def collect_study(provider: Provider, config: StudyConfig, store: ResponseStore,
                  **kwargs) -> dict[tuple[str, str], int]:
    """Run :func:`collect_cell` over every cell in config order."""
    counts = {}
    for lang, model in config.cells():
        counts[(lang, model)] = collect_cell(provider, config, lang, model, store, **kwargs)
    return counts
