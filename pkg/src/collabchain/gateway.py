"""Chat-completion access with retries, token counting and cost accounting.

Two backends are provided: :class:`HttpBackend` speaks the common
``/chat/completions`` wire format, :class:`ScriptedBackend` replays a JSONL
fixture keyed by request fingerprint. Every call goes through a
:class:`Gateway`, which keeps the usage ledger.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Protocol

import httpx

log = logging.getLogger(__name__)

API_KEY_ENV = "COCHAIN_API_KEY"
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class BackendError(RuntimeError):
    """A backend could not produce a response."""


class ScriptMiss(BackendError):
    def __init__(self, fingerprint: str, model_id: str = ""):
        super().__init__(f"no scripted response for fingerprint {fingerprint} (model {model_id!r})")
        self.fingerprint = fingerprint


class BackendUnavailable(BackendError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class BudgetExceeded(RuntimeError):
    pass


def count_tokens(text: str) -> int:
    """Local tokenizer rule: whitespace-split token count."""
    return len(text.split())


def fingerprint(model_id: str, system_text: str, user_text: str) -> str:
    # temperature is deliberately excluded so fixtures survive knob changes
    payload = json.dumps([model_id, system_text, user_text], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatRequest:
    user_text: str
    model_id: str
    system_text: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 512

    def __post_init__(self):
        if not self.user_text or not self.user_text.strip():
            raise ValueError("user_text must be non-empty")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must be in [0, 1]")

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.model_id, self.system_text, self.user_text)

    def estimated_input_tokens(self) -> int:
        return count_tokens(self.system_text) + count_tokens(self.user_text)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    input_tokens: int
    output_tokens: int
    latency_ms: int = 0


class Backend(Protocol):
    def send(self, request: ChatRequest) -> ChatResponse: ...


class ScriptedBackend:
    """Replays responses from a fixture. Read-only after construction."""

    def __init__(self, entries: Mapping[str, Mapping] | None = None):
        self._entries = dict(entries or {})

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ScriptedBackend":
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                try:
                    entries[obj["fingerprint"]] = obj
                except KeyError:
                    raise ValueError(f"{path}:{lineno}: entry has no fingerprint") from None
        return cls(entries)

    def __len__(self) -> int:
        return len(self._entries)

    def send(self, request: ChatRequest) -> ChatResponse:
        entry = self._entries.get(request.fingerprint)
        if entry is None:
            raise ScriptMiss(request.fingerprint, request.model_id)
        text = entry["text"]
        return ChatResponse(
            text=text,
            input_tokens=int(entry.get("input_tokens", request.estimated_input_tokens())),
            output_tokens=int(entry.get("output_tokens", count_tokens(text))),
            latency_ms=int(entry.get("latency_ms", 0)),
        )


def script_entry(request: ChatRequest, text: str, **extra) -> dict:
    """Build one fixture line for ``request`` answered by ``text``."""
    entry = {
        "fingerprint": request.fingerprint,
        "text": text,
        "input_tokens": request.estimated_input_tokens(),
        "output_tokens": count_tokens(text),
    }
    entry.update(extra)
    return entry


def write_script(path: str | Path, entries) -> None:
    lines = sorted({json.dumps(e, sort_keys=True, ensure_ascii=False) for e in entries})
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


class HttpBackend:
    """Client for a ``POST {base_url}/chat/completions`` endpoint.

    Transport errors and HTTP 429/5xx are retried up to ``retry_limit`` times
    with exponential backoff; other HTTP errors fail immediately.
    """

    def __init__(
        self,
        base_url: str,
        *,
        retry_limit: int = 2,
        backoff_s: float = 0.5,
        timeout_s: float = 60.0,
        api_key: str | None = None,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.retry_limit = retry_limit
        self.backoff_s = backoff_s
        self._api_key = api_key
        self._client = client or httpx.Client(timeout=timeout_s)
        self._sleep = sleep
        self.attempts = 0

    def _headers(self) -> dict[str, str]:
        key = self._api_key if self._api_key is not None else os.environ.get(API_KEY_ENV, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def send(self, request: ChatRequest) -> ChatResponse:
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": request.user_text})
        body = {
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        last_error = "no attempt made"
        for attempt in range(self.retry_limit + 1):
            if attempt:
                self._sleep(self.backoff_s * 2 ** (attempt - 1))
            self.attempts += 1
            started = time.perf_counter()
            try:
                resp = self._client.post(self.url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc!r}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.retry_limit + 1, last_error)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.retry_limit + 1, last_error)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code} from {self.url}: {resp.text[:200]}")
            latency_ms = int((time.perf_counter() - started) * 1000)
            return _parse_completion(resp.json(), request, latency_ms)
        raise BackendUnavailable(
            f"{self.url} unavailable after {self.retry_limit + 1} attempts ({last_error})",
            attempts=self.retry_limit + 1,
        )


def _parse_completion(data: dict, request: ChatRequest, latency_ms: int) -> ChatResponse:
    try:
        text = data["choices"][0]["message"]["content"] or ""
    except (KeyError, IndexError, TypeError):
        raise BackendError("malformed chat-completion response") from None
    usage = data.get("usage") or {}
    prompt_tokens = usage.get("prompt_tokens")
    completion_tokens = usage.get("completion_tokens")
    return ChatResponse(
        text=text,
        input_tokens=int(prompt_tokens) if prompt_tokens is not None else request.estimated_input_tokens(),
        output_tokens=int(completion_tokens) if completion_tokens is not None else count_tokens(text),
        latency_ms=latency_ms,
    )


@dataclass(frozen=True)
class CallRecord:
    model_id: str
    input_tokens: int
    output_tokens: int
    latency_ms: int
    cost: float


@dataclass
class UsageRecord:
    call_count: int = 0
    total_input_tokens: int = 0
    total_output_tokens: int = 0
    total_cost: float = 0.0
    total_wall_ms: int = 0

    def add(self, call: CallRecord) -> None:
        self.call_count += 1
        self.total_input_tokens += call.input_tokens
        self.total_output_tokens += call.output_tokens
        self.total_cost += call.cost
        self.total_wall_ms += call.latency_ms

    def to_dict(self) -> dict:
        return {
            "call_count": self.call_count,
            "total_input_tokens": self.total_input_tokens,
            "total_output_tokens": self.total_output_tokens,
            "total_cost": round(self.total_cost, 12),
            "total_wall_ms": self.total_wall_ms,
        }


@dataclass
class Ledger:
    calls: list[CallRecord] = field(default_factory=list)

    def usage(self) -> UsageRecord:
        record = UsageRecord()
        for call in self.calls:
            record.add(call)
        return record


_active_ledgers: contextvars.ContextVar[tuple[Ledger, ...]] = contextvars.ContextVar(
    "collabchain_ledgers", default=()
)


class Gateway:
    """Single entry point for completions; accumulates usage atomically.

    ``rates`` maps model id to ``(rate_in, rate_out)`` per token. A
    ``token_ceiling`` of None disables budget enforcement.
    """

    def __init__(
        self,
        rates: Mapping[str, tuple[float, float]] | None = None,
        token_ceiling: int | None = None,
    ):
        self.rates = dict(rates or {})
        self.token_ceiling = token_ceiling
        self._lock = threading.Lock()
        self._ledger = Ledger()
        self._reserved = 0

    def cost_of(self, model_id: str, input_tokens: int, output_tokens: int) -> float:
        rate_in, rate_out = self.rates.get(model_id, (0.0, 0.0))
        return input_tokens * rate_in + output_tokens * rate_out

    def complete(self, request: ChatRequest, backend: Backend) -> ChatResponse:
        estimate = request.estimated_input_tokens()
        with self._lock:
            if self.token_ceiling is not None:
                used = self._tokens_used() + self._reserved
                if used + estimate > self.token_ceiling:
                    raise BudgetExceeded(
                        f"call needs ~{estimate} tokens; {used} of {self.token_ceiling} already used"
                    )
            self._reserved += estimate
        try:
            response = backend.send(request)
        finally:
            with self._lock:
                self._reserved -= estimate
        call = CallRecord(
            model_id=request.model_id,
            input_tokens=response.input_tokens,
            output_tokens=response.output_tokens,
            latency_ms=response.latency_ms,
            cost=self.cost_of(request.model_id, response.input_tokens, response.output_tokens),
        )
        with self._lock:
            self._ledger.calls.append(call)
            for ledger in _active_ledgers.get():
                ledger.calls.append(call)
        return response

    def _tokens_used(self) -> int:
        return sum(c.input_tokens + c.output_tokens for c in self._ledger.calls)

    @contextlib.contextmanager
    def track(self) -> Iterator[Ledger]:
        """Collect the calls made inside the block (in this context only)."""
        ledger = Ledger()
        token = _active_ledgers.set(_active_ledgers.get() + (ledger,))
        try:
            yield ledger
        finally:
            _active_ledgers.reset(token)

    @property
    def calls(self) -> list[CallRecord]:
        with self._lock:
            return list(self._ledger.calls)

    def usage_report(self) -> UsageRecord:
        with self._lock:
            return self._ledger.usage()


def usage_report(gateway: Gateway) -> UsageRecord:
    return gateway.usage_report()


@dataclass
class BackendHandle:
    """A role bound to a backend and a model id (an agent, the extractor, ...)."""

    gateway: Gateway
    backend: Backend
    model_id: str
    temperature: float = 0.0
    max_output_tokens: int = 512

    def call(self, user_text: str, system_text: str = "") -> ChatResponse:
        request = ChatRequest(
            user_text=user_text,
            model_id=self.model_id,
            system_text=system_text,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
        )
        return self.gateway.complete(request, self.backend)

    def ask(self, user_text: str, system_text: str = "") -> str:
        return self.call(user_text, system_text).text
