"""Chat-completion client for hosted models (OpenAI-compatible wire format)."""
from __future__ import annotations

import logging
import os
import random
import threading
import time

import httpx

from ..errors import BackendError
from .backends import AgentBackend, BackendInfo, BackendKind, Completion, Usage

logger = logging.getLogger(__name__)

_RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class RemoteBackend(AgentBackend):
    """Calls ``{api_base}/chat/completions`` at temperature 0.

    Transport failures and retryable statuses are retried ``max_retries``
    times with jittered exponential backoff, then surface as BackendError.
    """

    def __init__(self, model: str | None = None, api_base: str | None = None, api_key: str | None = None, *,
                 timeout: float = 120.0, max_retries: int = 2, backoff_seconds: float = 1.0,
                 max_in_flight: int = 4, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep, rng: random.Random | None = None):
        self.model = model or os.environ.get("MAPIS_MODEL")
        self.api_base = (api_base or os.environ.get("MAPIS_API_BASE") or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key or os.environ.get("MAPIS_API_KEY")
        if not self.model:
            raise BackendError("no model configured (set MAPIS_MODEL)")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self.transport = transport
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.info = BackendInfo(f"remote:{self.model}", BackendKind.REMOTE, self.model)

    def _payload(self, prompt) -> dict:
        return {
            "model": self.model,
            "temperature": 0,
            "top_p": 1,
            "messages": [{"role": "user", "content": prompt.render()}],
        }

    def complete(self, prompt) -> Completion:
        if not self.api_key:
            raise BackendError("no API key configured (set MAPIS_API_KEY)")
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                delay = self.backoff_seconds * (2 ** (attempt - 1)) * (0.5 + self._rng.random())
                self._sleep(delay)
            start = time.perf_counter()
            try:
                with self._slots, httpx.Client(timeout=self.timeout, transport=self.transport) as client:
                    resp = client.post(f"{self.api_base}/chat/completions", headers=headers,
                                       json=self._payload(prompt))
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                logger.warning("%s (attempt %d)", last_error, attempt + 1)
                continue
            elapsed = time.perf_counter() - start
            if resp.status_code in _RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("%s from %s (attempt %d)", last_error, self.api_base, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
                usage = body.get("usage") or {}
            except (ValueError, KeyError, IndexError, TypeError):
                raise BackendError("malformed chat-completion response") from None
            if not isinstance(text, str):
                raise BackendError("chat-completion content is not text")
            return Completion(text, Usage(int(usage.get("prompt_tokens", 0)),
                                          int(usage.get("completion_tokens", 0)), elapsed))
        raise BackendError(f"remote backend failed after {self.max_retries + 1} attempts: {last_error}")
