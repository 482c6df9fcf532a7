"""OpenAI-compatible completion client plus record/replay traces.

Every generation goes through a *source*: an object with a
``generate(call) -> list[GeneratedSequence]`` method and an ``identity``
string. ``LiveSource`` talks HTTP, ``ReplaySource`` reads a trace file,
``RecordingSource`` wraps another source and appends what it returns to a
trace, and :class:`icluq.simulator.SimulatorSource` synthesizes answers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Literal

import httpx
import yaml

from .answer_extraction import GeneratedSequence, TokenScore
from .errors import (
    EndpointUnreachable,
    LogprobsUnsupported,
    StorageFailure,
    TraceMiss,
    TraceSchemaError,
    TruncatedResponse,
    UpstreamError,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
DEFAULT_NUM_SEQUENCES = 10
DEFAULT_MAX_NEW_TOKENS = 16


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    num_sequences: int = DEFAULT_NUM_SEQUENCES
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    decode_params: dict = field(default_factory=dict)
    logprob_top_k: int = 5

    def __post_init__(self):
        if self.num_sequences < 1 or self.max_new_tokens < 1:
            raise ValueError("num_sequences and max_new_tokens must be >= 1")

    @property
    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "prompt": self.prompt,
                "decode_params": self.decode_params,
                "num_sequences": self.num_sequences,
                "max_new_tokens": self.max_new_tokens,
            },
            sort_keys=True,
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    @property
    def decode_mode(self) -> str:
        return "beam" if self.decode_params.get("use_beam_search") else "sample"


def beam_search_params(width: int = 10) -> dict:
    """Decode parameters requesting true beam search from vLLM-style servers."""
    return {"use_beam_search": True, "best_of": width, "temperature": 0.0}


@dataclass(frozen=True)
class GenerationCall:
    """One (test instance, demo set) generation with the context sources may need."""

    request: GenerationRequest
    instance_id: str
    demo_set_id: int
    instance_index: int = 0
    true_label: int | None = None
    label_map: tuple[int, ...] | None = None
    condition: str = "in_domain"


def sort_sequences(seqs: Iterable[GeneratedSequence]) -> list[GeneratedSequence]:
    # sorted() is stable, so ties keep endpoint order
    return sorted(seqs, key=lambda s: -s.sequence_logprob)


# --- endpoint -------------------------------------------------------------


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str
    api_key: str | None = None
    chat: bool = False
    timeout: float = 60.0
    max_in_flight: int = 4

    @classmethod
    def from_env(cls, path=None, **overrides) -> "EndpointConfig":
        """Build from an optional YAML file, then ``ICLUQ_*`` variables, then overrides."""
        values: dict = {}
        if path is not None:
            with open(path, encoding="utf-8") as f:
                values.update(yaml.safe_load(f) or {})
        for key, var in (("url", "ICLUQ_ENDPOINT"), ("api_key", "ICLUQ_API_KEY"), ("model", "ICLUQ_MODEL")):
            if os.environ.get(var):
                values[key] = os.environ[var]
        values.update({k: v for k, v in overrides.items() if v is not None})
        missing = [k for k in ("url", "model") if not values.get(k)]
        if missing:
            raise ValueError(f"endpoint config missing {missing}; set ICLUQ_ENDPOINT / ICLUQ_MODEL")
        return cls(**{k: values[k] for k in cls.__dataclass_fields__ if k in values})


def _clamp(lp) -> float:
    # servers occasionally report +1e-7 for certain tokens
    return min(float(lp), 0.0)


def _parse_completion_choice(choice: dict) -> GeneratedSequence:
    lp = choice.get("logprobs")
    if not lp or lp.get("token_logprobs") is None or lp.get("tokens") is None:
        raise LogprobsUnsupported("completion choice carries no token logprobs")
    toks, lps = lp["tokens"], lp["token_logprobs"]
    tops = lp.get("top_logprobs") or [None] * len(toks)
    if not (len(toks) == len(lps) == len(tops)):
        raise TruncatedResponse("token, logprob and top_logprobs lists differ in length")
    if any(v is None for v in lps):
        raise LogprobsUnsupported("completion choice has missing token logprobs")
    tokens = []
    for tok, val, alt in zip(toks, lps, tops):
        alts = sorted(((t, _clamp(v)) for t, v in (alt or {}).items()), key=lambda a: -a[1])
        tokens.append(TokenScore(tok, _clamp(val), tuple(alts)))
    return GeneratedSequence(choice.get("text", "".join(toks)), tuple(tokens))


def _parse_chat_choice(choice: dict) -> GeneratedSequence:
    lp = choice.get("logprobs")
    if not lp or lp.get("content") is None:
        raise LogprobsUnsupported("chat choice carries no token logprobs")
    tokens = []
    for entry in lp["content"]:
        if entry.get("logprob") is None:
            raise LogprobsUnsupported("chat choice has missing token logprobs")
        alts = sorted(((a["token"], _clamp(a["logprob"])) for a in entry.get("top_logprobs") or ()),
                      key=lambda a: -a[1])
        tokens.append(TokenScore(entry["token"], _clamp(entry["logprob"]), tuple(alts)))
    text = (choice.get("message") or {}).get("content")
    return GeneratedSequence(text if text is not None else "".join(t.token for t in tokens), tuple(tokens))


class CompletionsClient:
    """Minimal client for ``/completions`` or ``/chat/completions`` with logprobs."""

    def __init__(self, config: EndpointConfig, *, transport: httpx.BaseTransport | None = None,
                 attempts: int = 3, backoff: float = 0.5, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
        self._http = httpx.Client(base_url=config.url.rstrip("/") + "/", headers=headers,
                                  timeout=config.timeout, transport=transport)
        self.calls = 0
        self._calls_lock = threading.Lock()

    @property
    def identity(self) -> str:
        return f"{self.config.url}#{self.config.model}"

    def close(self):
        self._http.close()

    def _payload(self, req: GenerationRequest) -> tuple[str, dict]:
        if self.config.chat:
            return "chat/completions", {
                "model": self.config.model,
                "messages": [{"role": "user", "content": req.prompt}],
                "n": req.num_sequences,
                "max_tokens": req.max_new_tokens,
                "logprobs": True,
                "top_logprobs": req.logprob_top_k,
                **req.decode_params,
            }
        return "completions", {
            "model": self.config.model,
            "prompt": req.prompt,
            "n": req.num_sequences,
            "max_tokens": req.max_new_tokens,
            "logprobs": req.logprob_top_k,
            **req.decode_params,
        }

    def _post(self, path: str, payload: dict) -> dict:
        last = None
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._calls_lock:
                    self.calls += 1
                resp = self._http.post(path, json=payload)
            except httpx.TransportError as e:
                last = e
                log.warning("attempt %d to %s failed: %s", attempt + 1, path, e)
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = f"HTTP {resp.status_code}"
                log.warning("attempt %d to %s got %s", attempt + 1, path, last)
                continue
            if resp.status_code >= 400:
                raise UpstreamError(f"endpoint rejected request: HTTP {resp.status_code} {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError:
                raise TruncatedResponse("endpoint returned a body that is not JSON") from None
        raise EndpointUnreachable(f"{self.identity} unreachable after {self.attempts} attempts: {last}")

    def generate(self, req: GenerationRequest) -> list[GeneratedSequence]:
        """M decoded sequences with token logprobs, most likely first."""
        path, payload = self._payload(req)
        body = self._post(path, payload)
        choices = sorted(body.get("choices") or [], key=lambda c: c.get("index", 0))
        if len(choices) < req.num_sequences:
            raise TruncatedResponse(f"asked for {req.num_sequences} sequences, got {len(choices)}")
        parse = _parse_chat_choice if self.config.chat else _parse_completion_choice
        return sort_sequences(parse(c) for c in choices[: req.num_sequences])

    def generate_many(self, reqs: Iterable[GenerationRequest]) -> dict[str, list[GeneratedSequence]]:
        """Run requests with bounded parallelism; results keyed by fingerprint."""
        unique = {r.fingerprint: r for r in reqs}
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            futures = {fp: pool.submit(self.generate, r) for fp, r in unique.items()}
            return {fp: fut.result() for fp, fut in futures.items()}


# --- traces ---------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    instance_id: str
    demo_set_id: int
    fingerprint: str
    endpoint: str
    timestamp: str
    sequences: tuple[GeneratedSequence, ...]
    decode_mode: str = "sample"
    schema_version: str = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": self.schema_version,
                "instance_id": self.instance_id,
                "demo_set_id": self.demo_set_id,
                "fingerprint": self.fingerprint,
                "endpoint": self.endpoint,
                "timestamp": self.timestamp,
                "decode_mode": self.decode_mode,
                "sequences": [s.to_dict() for s in self.sequences],
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "TraceRecord":
        d = json.loads(line)
        version = str(d.get("schema_version", ""))
        if version.split(".")[0] != SCHEMA_VERSION.split(".")[0]:
            raise TraceSchemaError(f"unsupported trace schema version {version!r}")
        return cls(
            instance_id=d["instance_id"],
            demo_set_id=int(d["demo_set_id"]),
            fingerprint=d["fingerprint"],
            endpoint=d["endpoint"],
            timestamp=d["timestamp"],
            sequences=tuple(GeneratedSequence.from_dict(s) for s in d["sequences"]),
            decode_mode=d.get("decode_mode", "sample"),
            schema_version=version,
        )


def now_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class TraceWriter:
    """Single-writer, append-only JSONL trace; safe to share between threads."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._n = sum(1 for _ in open(self.path, "rb")) if self.path.exists() else 0
        except OSError as e:
            raise StorageFailure(f"cannot open trace {self.path}: {e}") from e

    def append(self, record: TraceRecord) -> int:
        line = record.to_json() + "\n"
        with self._lock:
            try:
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(line)
                    f.flush()
                    os.fsync(f.fileno())
            except OSError as e:
                raise StorageFailure(f"cannot append to {self.path}: {e}") from e
            pos = self._n
            self._n += 1
        return pos


def record(trace_path, rec: TraceRecord) -> int:
    """Append ``rec`` to the trace; returns its zero-based line position."""
    return TraceWriter(trace_path).append(rec)


def read_trace(trace_path) -> list[TraceRecord]:
    with open(trace_path, encoding="utf-8") as f:
        return [TraceRecord.from_json(line) for line in f if line.strip()]


class TraceStore:
    """Read-only fingerprint index over a trace file."""

    def __init__(self, path):
        self.path = Path(path)
        self._index: dict[str, TraceRecord] = {}
        if self.path.exists():
            for rec in read_trace(self.path):
                self._index.setdefault(rec.fingerprint, rec)

    def __contains__(self, fingerprint):
        return fingerprint in self._index

    def __len__(self):
        return len(self._index)

    def get(self, fingerprint: str) -> TraceRecord:
        try:
            return self._index[fingerprint]
        except KeyError:
            raise TraceMiss(fingerprint) from None

    def add(self, rec: TraceRecord):
        self._index.setdefault(rec.fingerprint, rec)


def replay(trace_path, fingerprint: str) -> list[GeneratedSequence]:
    if not Path(trace_path).exists():
        raise TraceMiss(fingerprint)
    return list(TraceStore(trace_path).get(fingerprint).sequences)


# --- sources --------------------------------------------------------------


class LiveSource:
    def __init__(self, client: CompletionsClient):
        self.client = client

    @property
    def identity(self) -> str:
        return self.client.identity

    def generate(self, call: GenerationCall) -> list[GeneratedSequence]:
        return self.client.generate(call.request)


class RecordingSource:
    """Pass calls through to ``inner`` and append every result to a trace."""

    def __init__(self, inner, trace_path):
        self.inner = inner
        self.writer = TraceWriter(trace_path)

    @property
    def identity(self) -> str:
        return self.inner.identity

    def generate(self, call: GenerationCall) -> list[GeneratedSequence]:
        seqs = self.inner.generate(call)
        self.writer.append(TraceRecord(
            instance_id=call.instance_id,
            demo_set_id=call.demo_set_id,
            fingerprint=call.request.fingerprint,
            endpoint=self.inner.identity,
            timestamp=now_timestamp(),
            sequences=tuple(seqs),
            decode_mode=call.request.decode_mode,
        ))
        return seqs


class ReplaySource:
    """Serve generations from a trace.

    In ``"strict"`` mode a missing fingerprint raises :class:`TraceMiss`. In
    ``"record_on_miss"`` mode the call is forwarded to ``fallback`` and the
    result appended to the trace.
    """

    def __init__(self, trace_path, mode: Literal["strict", "record_on_miss"] = "strict", fallback=None):
        if mode == "record_on_miss" and fallback is None:
            raise ValueError("record_on_miss needs a fallback source")
        self.store = TraceStore(trace_path)
        self.mode = mode
        self.fallback = RecordingSource(fallback, trace_path) if fallback is not None else None
        self._lock = threading.Lock()

    @property
    def identity(self) -> str:
        return f"replay:{self.store.path.name}"

    def generate(self, call: GenerationCall) -> list[GeneratedSequence]:
        fp = call.request.fingerprint
        if fp in self.store:
            return list(self.store.get(fp).sequences)
        if self.mode == "strict":
            raise TraceMiss(fp)
        seqs = self.fallback.generate(call)
        with self._lock:
            self.store.add(TraceRecord(call.instance_id, call.demo_set_id, fp, self.fallback.identity,
                                       now_timestamp(), tuple(seqs), call.request.decode_mode))
        return seqs
