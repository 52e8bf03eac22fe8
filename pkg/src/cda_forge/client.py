"""Chat-completion client for any OpenAI-compatible endpoint, plus a
deterministic in-process mock with the same surface for tests.

Requests carry a single user message; all instruction text lives in the
rendered prompt templates.
"""

from __future__ import annotations

import logging
import math
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Any, Callable, Protocol, Sequence

import requests

from .errors import (
    ClientError,
    EmptyChoiceError,
    NoRuleMatchesError,
    ProtocolError,
    TransportError,
)

logger = logging.getLogger(__name__)

ROLE_TEACHER = "teacher"
ROLE_STUDENT = "student"

# Decoding defaults when the config leaves temperature unset: deterministic
# student evaluation, diverse teacher generation.
_DEFAULT_TEMPERATURE = {ROLE_TEACHER: 0.7, ROLE_STUDENT: 0.0}


@dataclass(frozen=True)
class EndpointConfig:
    """Connection and decoding settings for one served model."""

    base_url: str
    model_id: str
    role: str = ROLE_STUDENT
    api_key_env: str | None = None
    temperature: float | None = None
    max_tokens: int = 64
    timeout_ms: int = 30_000
    max_retries: int = 3
    max_in_flight: int = 8
    backoff_base_s: float = 0.25

    def __post_init__(self) -> None:
        if self.role not in (ROLE_TEACHER, ROLE_STUDENT):
            raise ValueError(f"role must be teacher or student, got {self.role!r}")
        if self.temperature is None:
            object.__setattr__(self, "temperature", _DEFAULT_TEMPERATURE[self.role])
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "base_url": self.base_url,
            "model_id": self.model_id,
            "role": self.role,
            "api_key_env": self.api_key_env,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "timeout_ms": self.timeout_ms,
            "max_retries": self.max_retries,
            "max_in_flight": self.max_in_flight,
            "backoff_base_s": self.backoff_base_s,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EndpointConfig":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Completion:
    """One model answer, tied back to its request position in a batch."""

    text: str
    finish_reason: str = "stop"
    request_index: int = 0


def _batch(complete_fn: Callable[[str], Completion], prompts: Sequence[str],
           max_in_flight: int) -> list[Completion | ClientError]:
    """Run completions with at most max_in_flight outstanding.

    The result list is aligned to the prompt indices regardless of completion
    order; per-item failures are returned in their slot, not raised.
    """
    results: list[Completion | ClientError] = [None] * len(prompts)  # type: ignore[list-item]
    if max_in_flight <= 1:
        for i, prompt in enumerate(prompts):
            try:
                c = complete_fn(prompt)
                results[i] = Completion(c.text, c.finish_reason, i)
            except ClientError as e:
                results[i] = e
        return results
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        futures = {pool.submit(complete_fn, p): i for i, p in enumerate(prompts)}
        for future in as_completed(futures):
            i = futures[future]
            try:
                c = future.result()
                results[i] = Completion(c.text, c.finish_reason, i)
            except ClientError as e:
                results[i] = e
    return results


class HttpChatClient:
    """Client for a chat-completions endpoint described by an EndpointConfig.

    Retryable failures (timeouts, connection errors, HTTP 429/5xx) back off
    exponentially with jitter up to max_retries; everything else raises
    ProtocolError immediately.
    """

    def __init__(self, config: EndpointConfig, session: requests.Session | None = None):
        self.config = config
        self._session = session or requests.Session()
        self._lock = threading.Lock()
        self.request_count = 0

    @property
    def max_in_flight(self) -> int:
        return self.config.max_in_flight

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, prompt: str) -> Completion:
        cfg = self.config
        url = cfg.base_url.rstrip("/") + "/chat/completions"
        body = {
            "model": cfg.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        with self._lock:
            self.request_count += 1
        last_error: TransportError | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt > 0:
                delay = min(cfg.backoff_base_s * (2 ** (attempt - 1)), 30.0)
                time.sleep(delay * (1.0 + random.random() * 0.25))
            try:
                response = self._session.post(
                    url, json=body, headers=self._headers(),
                    timeout=cfg.timeout_ms / 1000.0)
            except (requests.Timeout, requests.ConnectionError) as e:
                last_error = TransportError(f"{type(e).__name__}: {e}")
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last_error = TransportError(f"HTTP {response.status_code}")
                continue
            if response.status_code != 200:
                raise ProtocolError(response.status_code, response.text[:200])
            return self._parse(response)
        assert last_error is not None
        raise last_error

    def _parse(self, response: requests.Response) -> Completion:
        try:
            data = response.json()
        except ValueError as e:
            raise ProtocolError(response.status_code, response.text[:200]) from e
        choices = data.get("choices") or []
        if not choices:
            raise EmptyChoiceError("response contained no choices")
        message = choices[0].get("message") or {}
        content = message.get("content")
        if content is None:
            raise EmptyChoiceError("first choice has no message content")
        return Completion(text=content, finish_reason=choices[0].get("finish_reason", ""))

    def complete_many(self, prompts: Sequence[str]) -> list[Completion | ClientError]:
        if not prompts:
            raise ValueError("prompts must be non-empty")
        return _batch(self.complete, prompts, self.max_in_flight)


# --- mock model ---

MockResponse = str | Sequence[str] | Callable[[str], str] | Exception


@dataclass
class MockRule:
    """Matcher plus canned response.

    A rule with no matcher fields set is a default. Responses may be fixed
    text, a scripted sequence (consumed per call, last entry repeating), a
    callable on the prompt, or an exception instance to raise.
    """

    response: MockResponse
    contains: str | None = None
    exact: str | None = None
    predicate: Callable[[str], bool] | None = None

    def matches(self, prompt: str) -> bool:
        if self.contains is not None and self.contains not in prompt:
            return False
        if self.exact is not None and self.exact != prompt:
            return False
        if self.predicate is not None and not self.predicate(prompt):
            return False
        return True


@dataclass
class MockInvocation:
    prompt: str
    response: str | None
    error: str | None = None


class MockModel:
    """Deterministic endpoint-stand-in satisfying the same operation contracts.

    Rules are evaluated in order; the first match wins. The invocation log
    records every prompt and what was answered.
    """

    def __init__(self, rules: Sequence[MockRule], max_in_flight: int = 1,
                 latency: Callable[[str], float] | None = None):
        self.rules = list(rules)
        self.max_in_flight = max_in_flight
        self._latency = latency
        self._lock = threading.Lock()
        self._sequence_cursor: dict[int, int] = {}
        self.invocations: list[MockInvocation] = []

    @classmethod
    def constant(cls, text: str) -> "MockModel":
        return cls([MockRule(response=text)])

    def _resolve(self, prompt: str) -> str:
        for index, rule in enumerate(self.rules):
            if not rule.matches(prompt):
                continue
            response = rule.response
            if isinstance(response, Exception):
                raise response
            if callable(response):
                return response(prompt)
            if isinstance(response, str):
                return response
            cursor = self._sequence_cursor.get(index, 0)
            self._sequence_cursor[index] = cursor + 1
            return response[min(cursor, len(response) - 1)]
        raise NoRuleMatchesError(f"no rule matches prompt: {prompt[:80]!r}")

    def complete(self, prompt: str) -> Completion:
        if self._latency is not None:
            time.sleep(self._latency(prompt))
        with self._lock:
            try:
                text = self._resolve(prompt)
            except Exception as e:
                self.invocations.append(MockInvocation(prompt, None, repr(e)))
                raise
            self.invocations.append(MockInvocation(prompt, text))
        return Completion(text=text)

    def complete_many(self, prompts: Sequence[str]) -> list[Completion | ClientError]:
        if not prompts:
            raise ValueError("prompts must be non-empty")
        return _batch(self.complete, prompts, self.max_in_flight)

    @property
    def request_count(self) -> int:
        return len(self.invocations)


class ModelLike(Protocol):
    """Anything that can answer prompts: HTTP clients, mocks, scheduled students."""

    def complete(self, prompt: str) -> Completion: ...

    def complete_many(self, prompts: Sequence[str]) -> list[Completion | ClientError]: ...


def as_model(endpoint: EndpointConfig | ModelLike) -> ModelLike:
    """Accept either a config (wrapped in an HTTP client) or a ready handle."""
    if isinstance(endpoint, EndpointConfig):
        return HttpChatClient(endpoint)
    return endpoint


def complete(endpoint: EndpointConfig | ModelLike, prompt: str) -> Completion:
    return as_model(endpoint).complete(prompt)


def complete_many(endpoint: EndpointConfig | ModelLike,
                  prompts: Sequence[str]) -> list[Completion | ClientError]:
    return as_model(endpoint).complete_many(prompts)


def mock_model(rules: Sequence[MockRule], **kwargs: Any) -> MockModel:
    """Build a deterministic mock endpoint from a rule table."""
    return MockModel(rules, **kwargs)


def rules_for_instances(prompts_to_answers: dict[str, str],
                        default: str | None = None) -> list[MockRule]:
    """Exact-prompt rules, one per rendered prompt, plus an optional default."""
    rules = [MockRule(response=answer, exact=prompt)
             for prompt, answer in prompts_to_answers.items()]
    if default is not None:
        rules.append(MockRule(response=default))
    return rules
