"""Minimal chat-completions client with retries and bounded concurrency.

Speaks the de-facto JSON wire format (messages array in, choices out), so
episodes and failure harvesting can run against any compatible inference
server. Auth tokens are read from the environment at request time and never
stored on the config, logged, or serialized.
"""

from __future__ import annotations

import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import requests

VALID_ROLES = ("system", "user", "assistant")


class TransportError(RuntimeError):
    """Request kept failing after the configured retries."""


class ProtocolError(RuntimeError):
    """Endpoint answered, but not in the expected shape."""


class AuthError(RuntimeError):
    """401/403 from the endpoint; never retried."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in VALID_ROLES:
            raise ValueError(f"bad role {self.role!r}")
        if not isinstance(self.content, str):
            raise ValueError("content must be a string")


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    auth_env: str = "LLM_API_TOKEN"
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.25
    max_in_flight: int = 4

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


@dataclass(frozen=True)
class SamplingOptions:
    temperature: float = 0.0
    max_tokens: int = 512
    seed: Optional[int] = None


def _as_message_dicts(messages: Sequence[Union[ChatMessage, dict]]) -> list[dict]:
    out = []
    for m in messages:
        if isinstance(m, ChatMessage):
            out.append({"role": m.role, "content": m.content})
        else:
            ChatMessage(m["role"], m["content"])  # validation only
            out.append({"role": m["role"], "content": m["content"]})
    return out


_RETRYABLE_STATUSES = {429, 500, 502, 503, 504}


class LlmClient:
    """Thread-safe handle; the in-flight bound is global per client."""

    def __init__(self, cfg: EndpointConfig, session: Optional[requests.Session] = None):
        self.cfg = cfg
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(cfg.max_in_flight)
        self._jitter = random.Random(0x5EED)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.cfg.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def chat(self, messages: Sequence[Union[ChatMessage, dict]], sampling: SamplingOptions = SamplingOptions()) -> str:
        """One completion; retries transient failures with backoff + jitter."""
        if not messages:
            raise ValueError("messages must be nonempty")
        body = {
            "model": self.cfg.model,
            "messages": _as_message_dicts(messages),
            "temperature": sampling.temperature,
            "max_tokens": sampling.max_tokens,
        }
        if sampling.seed is not None:
            body["seed"] = sampling.seed
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        last_error: Optional[Exception] = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt > 0:
                delay = self.cfg.backoff_base * (2 ** (attempt - 1))
                time.sleep(delay * (1.0 + 0.1 * self._jitter.random()))
            try:
                with self._gate:
                    response = self._session.post(
                        url, json=body, headers=self._headers(), timeout=self.cfg.timeout
                    )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code in (401, 403):
                raise AuthError(f"endpoint returned {response.status_code}")
            if response.status_code in _RETRYABLE_STATUSES:
                last_error = TransportError(f"status {response.status_code}")
                continue
            if response.status_code != 200:
                raise ProtocolError(f"status {response.status_code}: {response.text[:200]}")
            try:
                payload = response.json()
                content = payload["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(f"malformed response body: {exc}") from exc
            if not isinstance(content, str):
                raise ProtocolError("message content is not a string")
            return content
        raise TransportError(f"gave up after {self.cfg.max_retries} retries: {last_error}")

    def chat_many(
        self,
        jobs: Sequence[Sequence[Union[ChatMessage, dict]]],
        sampling: SamplingOptions = SamplingOptions(),
    ) -> list[Union[str, Exception]]:
        """All jobs with bounded concurrency; errors captured in place."""
        if not jobs:
            return []

        def run(job):
            try:
                return self.chat(job, sampling)
            except Exception as exc:
                return exc

        with ThreadPoolExecutor(max_workers=self.cfg.max_in_flight) as pool:
            return list(pool.map(run, jobs))


def chat(cfg: EndpointConfig, messages, sampling: SamplingOptions = SamplingOptions()) -> str:
    return LlmClient(cfg).chat(messages, sampling)


def chat_many(cfg: EndpointConfig, jobs, sampling: SamplingOptions = SamplingOptions()):
    return LlmClient(cfg).chat_many(jobs, sampling)


class RemoteGenerator:
    """Generator over a remote endpoint; no token ids, so not trainable."""

    supports_token_ids = False

    def __init__(self, client: LlmClient, name: Optional[str] = None):
        self.client = client
        self.name = name or f"remote:{client.cfg.model}"

    def complete(self, messages, *, temperature: float, max_new_tokens: int, seed: int):
        from .episode import Completion, GeneratorError

        sampling = SamplingOptions(temperature=temperature, max_tokens=max_new_tokens, seed=seed)
        try:
            text = self.client.chat(messages, sampling)
        except (TransportError, ProtocolError, AuthError) as exc:
            raise GeneratorError(str(exc), transcript=list(messages)) from exc
        return Completion(text=text)
