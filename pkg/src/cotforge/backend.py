"""Pluggable chat-completion backends.

One production HTTP client speaking the OpenAI-compatible chat-completions
wire shape, plus a deterministic scripted mock for tests. Both expose a
single ``complete`` method; everything upstream is backend-agnostic.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Protocol

import httpx

from .errors import (
    BackendTimeout,
    HttpStatusError,
    MalformedResponseError,
    ScriptExhaustedError,
    TransportFailure,
    UnmatchedRequestError,
    ValidationError,
)

Role = Literal["system", "user", "assistant"]


@dataclass(frozen=True)
class Message:
    role: Role
    content: str


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[Message, ...]
    temperature: float = 0.2
    max_tokens: int = 4096
    n_samples: int = 1
    seed: int | None = None
    stop: tuple[str, ...] | None = None

    def validate(self) -> None:
        if not self.messages:
            raise ValidationError("request_messages_nonempty")
        if self.messages[0].role not in ("system", "user"):
            raise ValidationError("request_first_role", f"got {self.messages[0].role!r}")
        for m in self.messages:
            if m.role not in ("system", "user", "assistant"):
                raise ValidationError("request_role", f"unknown role {m.role!r}")
        if self.temperature < 0:
            raise ValidationError("request_temperature_nonneg")
        if self.n_samples < 1:
            raise ValidationError("request_n_samples")
        if self.max_tokens < 1:
            raise ValidationError("request_max_tokens")


@dataclass(frozen=True)
class CompletionResponse:
    samples: tuple[str, ...]
    usage: dict[str, int]
    backend_id: str
    truncated_flags: tuple[bool, ...]
    attempts: int = 1


@dataclass(frozen=True)
class BackendPolicy:
    max_concurrency: int = 4
    retry_limit: int = 3
    retry_backoff: tuple[float, ...] = (0.5, 1.0, 2.0)
    request_timeout: float = 60.0

    def validate(self) -> None:
        if self.max_concurrency < 1:
            raise ValidationError("policy_concurrency")
        if self.retry_limit < 1:
            raise ValidationError("policy_retry_limit")


class Backend(Protocol):
    backend_id: str

    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


def fingerprint_request(request: CompletionRequest) -> str:
    """Stable script key: hash of ordered message contents, temperature, n_samples."""
    payload = json.dumps(
        [[m.content for m in request.messages], request.temperature, request.n_samples],
        ensure_ascii=False,
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def user_message(content: str) -> Message:
    return Message("user", content)


def system_message(content: str) -> Message:
    return Message("system", content)


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------

_RETRYABLE_STATUS = {429}


class HttpBackend:
    """OpenAI-compatible chat-completions client with retry and admission control.

    Retried requests reuse the originally serialized body, so every attempt
    is byte-identical. At most ``policy.max_concurrency`` requests are in
    flight at once.
    """

    def __init__(
        self,
        backend_id: str,
        base_url: str,
        model: str,
        policy: BackendPolicy | None = None,
        api_key: str | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.backend_id = backend_id
        self.model = model
        self.policy = policy or BackendPolicy()
        self.policy.validate()
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"),
            headers=headers,
            timeout=self.policy.request_timeout,
            transport=transport,
        )
        self._gate = threading.BoundedSemaphore(self.policy.max_concurrency)
        self._sleep = time.sleep

    def _payload(self, request: CompletionRequest) -> bytes:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "n": request.n_samples,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        if request.stop:
            body["stop"] = list(request.stop)
        return json.dumps(body, ensure_ascii=False).encode("utf-8")

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        request.validate()
        body = self._payload(request)
        delays = self.policy.retry_backoff or (1.0,)
        last_error: Exception | None = None
        for attempt in range(1, self.policy.retry_limit + 1):
            try:
                with self._gate:
                    response = self._client.post("/chat/completions", content=body)
            except httpx.TimeoutException as exc:
                last_error = BackendTimeout(str(exc))
            except httpx.TransportError as exc:
                last_error = TransportFailure(str(exc))
            else:
                if response.status_code // 100 == 2:
                    return self._parse(response, request, attempt)
                error = HttpStatusError(response.status_code, response.text)
                if response.status_code >= 500 or response.status_code in _RETRYABLE_STATUS:
                    last_error = error
                else:
                    raise error
            if attempt < self.policy.retry_limit:
                self._sleep(delays[min(attempt - 1, len(delays) - 1)])
        assert last_error is not None
        raise last_error

    def _parse(self, response: httpx.Response, request: CompletionRequest, attempts: int) -> CompletionResponse:
        try:
            data = response.json()
            choices = data["choices"]
            samples = tuple(c["message"]["content"] for c in choices)
            truncated = tuple(c.get("finish_reason") == "length" for c in choices)
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponseError(f"bad completion body: {exc}") from exc
        if len(samples) != request.n_samples:
            raise MalformedResponseError(
                f"expected {request.n_samples} choices, got {len(samples)}"
            )
        usage = data.get("usage") or {}
        return CompletionResponse(
            samples=samples,
            usage={
                "prompt_tokens": int(usage.get("prompt_tokens", 0)),
                "completion_tokens": int(usage.get("completion_tokens", 0)),
            },
            backend_id=self.backend_id,
            truncated_flags=truncated,
            attempts=attempts,
        )

    def close(self) -> None:
        self._client.close()


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------


@dataclass
class _PatternScript:
    pattern: re.Pattern
    replies: list[str]
    consumed: int = 0


class MockBackend:
    """Deterministic scripted backend.

    Exact scripts are keyed by request fingerprint and consumed FIFO;
    exhaustion is an explicit error, never silent reuse. Pattern scripts
    (regex over the concatenated message contents) serve as a fallback for
    workflow tests where reconstructing exact prompts is impractical.
    """

    def __init__(self, backend_id: str = "mock"):
        self.backend_id = backend_id
        self._exact: dict[str, _PatternScript] = {}
        self._patterns: list[_PatternScript] = []
        self._lock = threading.Lock()
        self.requests: list[CompletionRequest] = []

    def script(self, key: str | CompletionRequest, replies: list[str]) -> None:
        """Register replies for an exact request fingerprint (FIFO)."""
        if isinstance(key, CompletionRequest):
            key = fingerprint_request(key)
        with self._lock:
            slot = self._exact.setdefault(key, _PatternScript(re.compile(""), []))
            slot.replies.extend(replies)

    def script_pattern(self, pattern: str, replies: list[str]) -> None:
        """Register replies for requests whose message text matches ``pattern``."""
        with self._lock:
            self._patterns.append(_PatternScript(re.compile(pattern, re.DOTALL), list(replies)))

    def load_scripts_jsonl(self, path: str | Path) -> int:
        """Load scripts from a JSONL fixture: {"fingerprint"|"pattern", "replies"}."""
        count = 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            if "fingerprint" in record:
                self.script(record["fingerprint"], list(record["replies"]))
            elif "pattern" in record:
                self.script_pattern(record["pattern"], list(record["replies"]))
            else:
                raise ValidationError("mock_script_key", f"no fingerprint/pattern in {record}")
            count += 1
        return count

    def _take(self, slot: _PatternScript, n: int, key: str) -> list[str]:
        if len(slot.replies) < n:
            raise ScriptExhaustedError(key, slot.consumed)
        out = slot.replies[:n]
        del slot.replies[:n]
        slot.consumed += n
        return out

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        request.validate()
        fp = fingerprint_request(request)
        with self._lock:
            self.requests.append(request)
            slot = self._exact.get(fp)
            if slot is not None:
                samples = self._take(slot, request.n_samples, fp)
            else:
                text = "\n".join(m.content for m in request.messages)
                for pat in self._patterns:
                    if pat.pattern.search(text):
                        samples = self._take(pat, request.n_samples, pat.pattern.pattern)
                        break
                else:
                    nearest = difflib.get_close_matches(fp, self._exact.keys(), n=3, cutoff=0.0)
                    raise UnmatchedRequestError(fp, nearest)
        completion_tokens = sum(len(s.split()) for s in samples)
        prompt_tokens = sum(len(m.content.split()) for m in request.messages)
        return CompletionResponse(
            samples=tuple(samples),
            usage={"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
            backend_id=self.backend_id,
            truncated_flags=tuple(False for _ in samples),
        )
