"""Text-completion backends.

One small abstraction (`Backend.complete`) with three implementations:

* `HttpBackend` talks to a completions-style HTTP endpoint (JSON POST,
  bearer-token auth, retry with exponential backoff, token-bucket rate
  limiting).
* `ScriptedBackend` replays a programmed queue of responses, for tests.
* `ReplayBackend` replays a recorded fixture, matching each incoming prompt
  by its SHA-256 hash so an entire pipeline run is reproducible offline.

`RecordingBackend` wraps any backend and captures a fixture as it runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import requests

log = logging.getLogger(__name__)

FINISH_REASONS = ("stop", "length", "other")


class BackendError(Exception):
    """Base class for completion-backend failures."""


class AuthError(BackendError):
    """Authentication rejected; never retried."""


class RetriesExhaustedError(BackendError):
    """Transient failures persisted past the configured retry budget."""


class MalformedResponseError(BackendError):
    """The endpoint returned a body we cannot interpret."""


class ScriptExhaustedError(BackendError):
    """A scripted backend ran out of programmed responses."""


class ReplayMismatchError(BackendError):
    """An incoming prompt does not hash to any remaining recorded entry."""


class FixtureError(BackendError):
    """A fixture file is missing, truncated, or malformed."""


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class DecodingParams:
    """Decoding mode and limits for one completion call.

    mode "greedy" is fully deterministic given the served model; "nucleus"
    samples from the top-p token mass (default p = 0.99).
    """

    mode: str = "nucleus"
    top_p: float = 0.99
    max_tokens: int = 512
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.mode not in ("nucleus", "greedy"):
            raise ValueError(f"unknown decoding mode {self.mode!r}")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))

    @classmethod
    def nucleus(cls, top_p: float = 0.99, max_tokens: int = 512,
                stop_sequences: Sequence[str] = ()) -> "DecodingParams":
        return cls("nucleus", top_p, max_tokens, tuple(stop_sequences))

    @classmethod
    def greedy(cls, max_tokens: int = 256,
               stop_sequences: Sequence[str] = ()) -> "DecodingParams":
        return cls("greedy", 1.0, max_tokens, tuple(stop_sequences))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "stop_sequences": list(self.stop_sequences),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecodingParams":
        return cls(
            mode=d.get("mode", "nucleus"),
            top_p=d.get("top_p", 0.99),
            max_tokens=d.get("max_tokens", 512),
            stop_sequences=tuple(d.get("stop_sequences", ())),
        )


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    total_tokens: int = 0

    def to_dict(self) -> dict:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_tokens": self.total_tokens,
        }


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    params: DecodingParams

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


@dataclass(frozen=True)
class CompletionResult:
    """A completion; text never includes the prompt."""

    text: str
    finish_reason: str = "stop"
    usage: TokenUsage = field(default_factory=TokenUsage)

    def __post_init__(self) -> None:
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"finish_reason must be one of {FINISH_REASONS}")


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for the HTTP backend.

    The auth token is read from the environment variable named by
    `auth_token_env_var`; it is never stored in config files. Durations are
    seconds.
    """

    endpoint_url: str = ""
    model_name: str = "text-davinci-002"
    auth_token_env_var: str = "INSTRUCTGEN_API_TOKEN"
    request_timeout: float = 60.0
    max_retries: int = 3
    min_retry_backoff: float = 1.0
    requests_per_minute: float = 60.0

    def to_dict(self) -> dict:
        return {
            "endpoint_url": self.endpoint_url,
            "model_name": self.model_name,
            "auth_token_env_var": self.auth_token_env_var,
            "request_timeout": self.request_timeout,
            "max_retries": self.max_retries,
            "min_retry_backoff": self.min_retry_backoff,
            "requests_per_minute": self.requests_per_minute,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


class Backend:
    """Interface: one completion per call, thread-safe.

    `supports_parallel` tells orchestrators whether issuing calls from
    multiple threads is useful; the offline backends answer instantly and
    resolve serially so that replay order always equals issue order.
    """

    supports_parallel = False

    def complete(self, request: CompletionRequest) -> CompletionResult:
        raise NotImplementedError


class TokenBucket:
    """Blocking requests-per-minute limiter shared across threads."""

    def __init__(self, rate_per_minute: float,
                 time_fn: Callable[[], float] = time.monotonic,
                 sleep_fn: Callable[[float], None] = time.sleep) -> None:
        self.rate_per_second = rate_per_minute / 60.0 if rate_per_minute > 0 else 0.0
        self.capacity = max(1.0, rate_per_minute / 60.0)
        self._tokens = self.capacity
        self._time_fn = time_fn
        self._sleep_fn = sleep_fn
        self._last = time_fn()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate_per_second <= 0:
            return
        while True:
            with self._lock:
                now = self._time_fn()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate_per_second)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate_per_second
            self._sleep_fn(wait)


class HttpBackend(Backend):
    """Client for a completions-style endpoint.

    Sends POST {model, prompt, top_p or temperature, max_tokens, stop} and
    reads choices[0].text / finish_reason from the JSON response. Transient
    transport errors, 429 and 5xx responses are retried with exponential
    backoff; retries re-send byte-identical request bodies.
    """

    supports_parallel = True

    def __init__(self, config: BackendConfig, *,
                 session: requests.Session | None = None,
                 rate_limiter: TokenBucket | None = None,
                 sleep_fn: Callable[[float], None] = time.sleep) -> None:
        if not config.endpoint_url:
            raise ValueError("BackendConfig.endpoint_url is required for the HTTP backend")
        self.config = config
        self._session = session or requests.Session()
        self._rate_limiter = rate_limiter or TokenBucket(config.requests_per_minute)
        self._sleep = sleep_fn

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.auth_token_env_var, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _body(self, request: CompletionRequest) -> bytes:
        params = request.params
        body: dict = {
            "model": self.config.model_name,
            "prompt": request.prompt,
            "max_tokens": params.max_tokens,
        }
        if params.mode == "greedy":
            body["temperature"] = 0.0
        else:
            body["top_p"] = params.top_p
        if params.stop_sequences:
            body["stop"] = list(params.stop_sequences)
        return json.dumps(body, ensure_ascii=False).encode("utf-8")

    def complete(self, request: CompletionRequest) -> CompletionResult:
        body = self._body(request)
        headers = self._headers()
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt > 0:
                backoff = self.config.min_retry_backoff * (2 ** (attempt - 1))
                log.warning("retrying completion call (attempt %d) after %.1fs", attempt + 1, backoff)
                self._sleep(backoff)
            self._rate_limiter.acquire()
            try:
                resp = self._session.post(
                    self.config.endpoint_url,
                    data=body,
                    headers=headers,
                    timeout=self.config.request_timeout,
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"authentication failed ({resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = BackendError(f"transient HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            return self._parse_response(resp)
        raise RetriesExhaustedError(
            f"gave up after {self.config.max_retries + 1} attempts: {last_error}"
        )

    @staticmethod
    def _parse_response(resp: requests.Response) -> CompletionResult:
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            text = choice["text"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"cannot parse completion response: {exc}") from exc
        reason = choice.get("finish_reason", "stop")
        if reason not in FINISH_REASONS:
            reason = "other"
        usage_raw = payload.get("usage", {})
        usage = TokenUsage(
            prompt_tokens=int(usage_raw.get("prompt_tokens", 0)),
            completion_tokens=int(usage_raw.get("completion_tokens", 0)),
            total_tokens=int(usage_raw.get("total_tokens", 0)),
        )
        return CompletionResult(text=text, finish_reason=reason, usage=usage)


class ScriptedBackend(Backend):
    """Serves a programmed queue of responses in order.

    Each queue item may be a plain string, a (text, finish_reason) pair, or a
    full CompletionResult. Issued calls are kept for assertions.
    """

    def __init__(self, responses: Iterable[object] = ()) -> None:
        self._queue: deque[CompletionResult] = deque()
        self.calls: list[CompletionRequest] = []
        self._lock = threading.Lock()
        for item in responses:
            self.push(item)

    def push(self, item: object) -> None:
        if isinstance(item, CompletionResult):
            result = item
        elif isinstance(item, tuple):
            result = CompletionResult(text=item[0], finish_reason=item[1])
        else:
            result = CompletionResult(text=str(item))
        with self._lock:
            self._queue.append(result)

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def remaining(self) -> int:
        return len(self._queue)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            self.calls.append(request)
            if not self._queue:
                raise ScriptExhaustedError(
                    f"script exhausted after {len(self.calls) - 1} responses"
                )
            return self._queue.popleft()


@dataclass(frozen=True)
class FixtureEntry:
    prompt_sha256: str
    params: DecodingParams
    response_text: str
    finish_reason: str
    usage: TokenUsage

    def to_dict(self) -> dict:
        return {
            "prompt_sha256": self.prompt_sha256,
            "params": self.params.to_dict(),
            "response_text": self.response_text,
            "finish_reason": self.finish_reason,
            "usage": self.usage.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureEntry":
        usage_raw = d.get("usage", {})
        return cls(
            prompt_sha256=d["prompt_sha256"],
            params=DecodingParams.from_dict(d.get("params", {})),
            response_text=d["response_text"],
            finish_reason=d.get("finish_reason", "stop"),
            usage=TokenUsage(
                prompt_tokens=int(usage_raw.get("prompt_tokens", 0)),
                completion_tokens=int(usage_raw.get("completion_tokens", 0)),
                total_tokens=int(usage_raw.get("total_tokens", 0)),
            ),
        )


class RecordingBackend(Backend):
    """Wraps another backend and captures every call as a fixture entry.

    Recording forces serial issue so fixture order equals call order.
    """

    def __init__(self, inner: Backend) -> None:
        self._inner = inner
        self.entries: list[FixtureEntry] = []
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            result = self._inner.complete(request)
            self.entries.append(
                FixtureEntry(
                    prompt_sha256=prompt_sha256(request.prompt),
                    params=request.params,
                    response_text=result.text,
                    finish_reason=result.finish_reason,
                    usage=result.usage,
                )
            )
            return result

    def write_fixture(self, path: str | Path) -> None:
        write_fixture(path, self.entries)


class ReplayBackend(Backend):
    """Replays a recorded fixture, matching prompts by SHA-256 hash.

    Entries sharing a prompt hash are served first-in first-out, so a run
    that issues calls in record order reproduces every result byte for byte.
    A prompt with no remaining recorded entry raises ReplayMismatchError,
    which signals pipeline nondeterminism (or an exhausted fixture).
    """

    def __init__(self, entries: Sequence[FixtureEntry]) -> None:
        self.entries = list(entries)
        self._queues: dict[str, deque[FixtureEntry]] = {}
        for entry in self.entries:
            self._queues.setdefault(entry.prompt_sha256, deque()).append(entry)
        self._consumed = 0
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        digest = prompt_sha256(request.prompt)
        with self._lock:
            queue = self._queues.get(digest)
            if not queue:
                raise ReplayMismatchError(
                    f"prompt hash {digest[:12]}… has no remaining recorded completion "
                    f"({self._consumed}/{len(self.entries)} entries consumed)"
                )
            entry = queue.popleft()
            self._consumed += 1
        return CompletionResult(
            text=entry.response_text,
            finish_reason=entry.finish_reason,
            usage=entry.usage,
        )

    def unused_entries(self) -> int:
        with self._lock:
            return len(self.entries) - self._consumed

    def warn_if_unused(self) -> int:
        unused = self.unused_entries()
        if unused:
            log.warning("replay fixture has %d unused entries", unused)
        return unused


def write_fixture(path: str | Path, entries: Sequence[FixtureEntry]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")


def read_fixture(path: str | Path) -> list[FixtureEntry]:
    path = Path(path)
    if not path.exists():
        raise FixtureError(f"fixture not found: {path}")
    entries = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entries.append(FixtureEntry.from_dict(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise FixtureError(f"{path}:{lineno}: bad fixture record: {exc}") from exc
    return entries


def replay_session(path: str | Path) -> ReplayBackend:
    """Load a fixture file into a replay backend."""
    return ReplayBackend(read_fixture(path))


def record_session(config: BackendConfig, requests_: Iterable[CompletionRequest],
                   path: str | Path) -> list[CompletionResult]:
    """Run the given requests against the HTTP backend, writing a fixture."""
    recorder = RecordingBackend(HttpBackend(config))
    results = [recorder.complete(r) for r in requests_]
    recorder.write_fixture(path)
    return results
