"""Model endpoints: an OpenAI-compatible HTTP client, a scripted mock, and deadline-bounded parallel dispatch."""

from __future__ import annotations

import abc
import asyncio
import fnmatch
import json
import logging
import os
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Coroutine, Sequence, TypeVar

import httpx

from .core import InvalidInput, OutputSchema, check_value

log = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_DEADLINE_MS = 30_000
ADAPTIVE_FLOOR_MS = 5_000
STATUSES = ("completed", "timed_out", "transport_failed")


class BackendError(RuntimeError):
    """Backend misconfiguration (missing credentials, unreadable mock script, ...)."""


@dataclass(frozen=True)
class ChatRequest:
    messages: list[dict[str, str]]
    response_format: dict[str, Any] | None = None
    want_logprobs: bool = False
    temperature: float = 0.0
    model_name: str = ""
    # routing label, e.g. the template id; the mock keys its script on it
    tag: str = ""
    strict_schema: bool = True
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].get("role") not in ("system", "user"):
            raise ValueError("first message must have role 'system' or 'user'")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def prompt_text(self) -> str:
        return "\n".join(m.get("content", "") for m in self.messages)


@dataclass(frozen=True)
class ChatOutcome:
    status: str
    content: str | None = None
    structured_payload: Any = None
    token_logprobs: tuple[float, ...] | None = None
    latency_ms: int = 0
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "completed"


def run_sync(coro: Coroutine[Any, Any, T]) -> T:
    """Run a coroutine to completion from synchronous code, even inside a running loop."""
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return asyncio.run(coro)
    with ThreadPoolExecutor(max_workers=1) as pool:
        return pool.submit(asyncio.run, coro).result()


def _validate_payload(payload: Any, schema: dict[str, Any]) -> list[str]:
    resolver = None
    if isinstance(schema.get("properties"), dict) and schema["properties"]:
        try:
            resolver = OutputSchema.from_dict(schema)
        except InvalidInput:
            resolver = None
    return check_value(payload, schema, "$", resolver)


class ChatBackend(abc.ABC):
    """One model endpoint. Safe to call from concurrent tasks."""

    @abc.abstractmethod
    async def _request(self, request: ChatRequest) -> ChatOutcome:
        """Perform the call; return an outcome with raw ``content`` (no payload handling)."""

    async def acomplete(self, request: ChatRequest) -> ChatOutcome:
        try:
            outcome = await self._request(request)
        except asyncio.CancelledError:
            raise
        except Exception as exc:  # backend bugs must not take down a batch
            log.debug("backend call failed", exc_info=True)
            return ChatOutcome("transport_failed", error=f"{type(exc).__name__}: {exc}")
        if outcome.status != "completed" or request.response_format is None:
            return outcome
        return self._attach_payload(request, outcome)

    @staticmethod
    def _attach_payload(request: ChatRequest, outcome: ChatOutcome) -> ChatOutcome:
        if outcome.structured_payload is not None:
            payload = outcome.structured_payload
        else:
            try:
                payload = json.loads(outcome.content or "")
            except json.JSONDecodeError as err:
                return ChatOutcome("transport_failed", content=outcome.content, latency_ms=outcome.latency_ms,
                                   error=f"schema violation: reply is not JSON ({err})")
        problems = _validate_payload(payload, request.response_format or {})
        if problems:
            return ChatOutcome("transport_failed", content=outcome.content, latency_ms=outcome.latency_ms,
                               error="schema violation: " + "; ".join(problems[:5]))
        return ChatOutcome("completed", content=outcome.content, structured_payload=payload,
                           token_logprobs=outcome.token_logprobs, latency_ms=outcome.latency_ms)

    def complete(self, request: ChatRequest) -> ChatOutcome:
        return run_sync(self.acomplete(request))

    async def adispatch(
        self, requests: Sequence[ChatRequest], deadline_ms: int, adaptive: bool = False
    ) -> list[ChatOutcome]:
        """Start every request at once; anything unfinished at the deadline is timed out.

        With ``adaptive`` the deadline shrinks to twice the median latency of
        calls already completed in this batch (never below 5 s, never above
        ``deadline_ms``).
        """
        if deadline_ms <= 0:
            raise ValueError("deadline_ms must be positive")
        loop = asyncio.get_running_loop()
        start = loop.time()
        tasks = [asyncio.ensure_future(self.acomplete(r)) for r in requests]
        pending = set(tasks)
        finished_after: list[float] = []
        limit = deadline_ms / 1000
        while pending:
            if adaptive and finished_after:
                limit = min(deadline_ms / 1000, max(ADAPTIVE_FLOOR_MS / 1000, 2 * statistics.median(finished_after)))
            remaining = start + limit - loop.time()
            if remaining <= 0:
                break
            done, pending = await asyncio.wait(pending, timeout=remaining, return_when=asyncio.FIRST_COMPLETED)
            now = loop.time() - start
            finished_after.extend(now for t in done if not t.cancelled() and t.exception() is None and t.result().ok)
        for t in pending:
            t.cancel()
        if pending:
            await asyncio.gather(*pending, return_exceptions=True)
        elapsed_ms = int((loop.time() - start) * 1000)

        outcomes = []
        for t in tasks:
            if t in pending or t.cancelled():
                outcomes.append(ChatOutcome("timed_out", latency_ms=elapsed_ms, error="deadline exceeded"))
            elif t.exception() is not None:
                outcomes.append(ChatOutcome("transport_failed", error=str(t.exception())))
            else:
                outcomes.append(t.result())
        return outcomes

    def dispatch_parallel(
        self, requests: Sequence[ChatRequest], deadline_ms: int = DEFAULT_DEADLINE_MS, adaptive: bool = False
    ) -> list[ChatOutcome]:
        return run_sync(self.adispatch(requests, deadline_ms, adaptive))


def dispatch_parallel(
    backend: ChatBackend, requests: Sequence[ChatRequest], deadline_ms: int = DEFAULT_DEADLINE_MS, adaptive: bool = False
) -> list[ChatOutcome]:
    return backend.dispatch_parallel(requests, deadline_ms, adaptive)


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP backend
# ---------------------------------------------------------------------------


class OpenAIBackend(ChatBackend):
    """Chat-completions client for any OpenAI-compatible endpoint."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str = "gpt-4.1-mini",
        timeout_s: float = 120.0,
        extra_body: dict[str, Any] | None = None,
        transport: httpx.AsyncBaseTransport | None = None,
    ):
        self.base_url = (base_url or os.environ.get("CONSTRUCT_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("CONSTRUCT_API_KEY")
        if not self.api_key:
            raise BackendError("no API key: set CONSTRUCT_API_KEY")
        self.model = model
        self.timeout_s = timeout_s
        self.extra_body = dict(extra_body or {})
        self._transport = transport

    def build_body(self, request: ChatRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": request.model_name or self.model,
            "messages": request.messages,
            "temperature": request.temperature,
        }
        if request.response_format is not None:
            body["response_format"] = {
                "type": "json_schema",
                "json_schema": {
                    "name": (request.tag or "response").replace(":", "_")[:64],
                    "schema": request.response_format,
                    "strict": request.strict_schema,
                },
            }
        if request.want_logprobs:
            body["logprobs"] = True
        if request.max_tokens is not None:
            body["max_tokens"] = request.max_tokens
        body.update(self.extra_body)
        return body

    async def _request(self, request: ChatRequest) -> ChatOutcome:
        headers = {"Authorization": f"Bearer {self.api_key}"}
        t0 = time.perf_counter()
        try:
            async with httpx.AsyncClient(timeout=self.timeout_s, transport=self._transport) as client:
                resp = await client.post(f"{self.base_url}/chat/completions", json=self.build_body(request), headers=headers)
        except httpx.HTTPError as exc:
            return ChatOutcome("transport_failed", error=f"{type(exc).__name__}: {exc}")
        latency = int((time.perf_counter() - t0) * 1000)
        if resp.status_code in (401, 403):
            return ChatOutcome("transport_failed", latency_ms=latency, error=f"authentication failed (HTTP {resp.status_code})")
        if resp.status_code >= 400:
            return ChatOutcome("transport_failed", latency_ms=latency, error=f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            choice = data["choices"][0]
            content = choice["message"]["content"]
            if content is not None and not isinstance(content, str):
                raise TypeError("message content is not text")
            logprobs = None
            lp = choice.get("logprobs")
            if lp and lp.get("content"):
                logprobs = tuple(float(tok["logprob"]) for tok in lp["content"])
        except (ValueError, KeyError, IndexError, TypeError, AttributeError) as exc:
            return ChatOutcome("transport_failed", latency_ms=latency, error=f"malformed response body: {exc}")
        if content is None:
            return ChatOutcome("transport_failed", latency_ms=latency, error="malformed response body: empty content")
        return ChatOutcome("completed", content=content, token_logprobs=logprobs, latency_ms=latency)


# ---------------------------------------------------------------------------
# Scripted mock
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptEntry:
    """One scripted reply.

    ``tag`` is a glob matched against the request tag; ``match``, when set,
    must occur in the request's message text. The first matching entry wins.
    """

    tag: str = "*"
    match: str | None = None
    reply_text: str | None = None
    reply_payload: Any = None
    latency_ms: int = 0
    status: str = "completed"
    logprobs: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.status not in ("completed", "transport_failed"):
            raise BackendError(f"unsupported scripted status: {self.status!r}")
        if self.status == "completed" and self.reply_text is None and self.reply_payload is None:
            raise BackendError("completed script entries need reply_text or reply_payload")
        if self.latency_ms < 0:
            raise BackendError("latency_ms must be >= 0")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScriptEntry:
        known = {"tag", "match", "reply_text", "reply_payload", "latency_ms", "scripted_latency_ms",
                 "status", "scripted_status", "logprobs"}
        unknown = set(data) - known
        if unknown:
            raise BackendError(f"unknown script keys: {sorted(unknown)}")
        lps = data.get("logprobs")
        return cls(
            tag=data.get("tag", "*"),
            match=data.get("match"),
            reply_text=data.get("reply_text"),
            reply_payload=data.get("reply_payload"),
            latency_ms=int(data.get("latency_ms", data.get("scripted_latency_ms", 0))),
            status=data.get("status", data.get("scripted_status", "completed")),
            logprobs=tuple(lps) if lps is not None else None,
        )


class MockBackend(ChatBackend):
    """Deterministic backend replaying a script; sleeps for each entry's latency."""

    def __init__(self, entries: Sequence[ScriptEntry | dict[str, Any]]):
        self.entries = [e if isinstance(e, ScriptEntry) else ScriptEntry.from_dict(e) for e in entries]
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> MockBackend:
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise BackendError(f"cannot read mock script {path}: {exc}") from None
        if isinstance(data, dict):
            data = data.get("replies", [])
        if not isinstance(data, list):
            raise BackendError("mock script must be a list of entries")
        return cls(data)

    def lookup(self, request: ChatRequest) -> ScriptEntry | None:
        text = request.prompt_text
        for entry in self.entries:
            if fnmatch.fnmatchcase(request.tag, entry.tag) and (entry.match is None or entry.match in text):
                return entry
        return None

    async def _request(self, request: ChatRequest) -> ChatOutcome:
        with self._lock:
            self.requests.append(request)
        entry = self.lookup(request)
        if entry is None:
            return ChatOutcome("transport_failed", error=f"no scripted reply for tag {request.tag!r}")
        if entry.latency_ms:
            await asyncio.sleep(entry.latency_ms / 1000)
        if entry.status != "completed":
            return ChatOutcome(entry.status, latency_ms=entry.latency_ms, error="scripted failure")
        if entry.reply_text is not None:
            content = entry.reply_text
        else:
            content = json.dumps(entry.reply_payload, ensure_ascii=False)
        logprobs = entry.logprobs if request.want_logprobs else None
        return ChatOutcome("completed", content=content, token_logprobs=logprobs, latency_ms=entry.latency_ms)
