"""Uniform access to chat-completion backends.

Two backends: ``http_chat`` speaks the standard chat-completion JSON wire
format with retries and a sliding-window rate limit; ``scripted`` replays
replies from a file, matched by request tag, which makes every pipeline run
offline and byte-reproducible.  ``run_bounded_loop`` is the shared cap on
all LLM-driven loops.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .errors import IssuePatchError, UsageError

logger = logging.getLogger(__name__)

#: Cap applied to every internal LLM-driven loop unless configured otherwise.
DEFAULT_LOOP_CAP = 10

#: Sampling defaults: deterministic for extraction/correction, warmer for
#: generating diverse candidate pairs.
EXTRACT_TEMPERATURE = 0.0
GENERATE_TEMPERATURE = 0.7
DEFAULT_MAX_TOKENS = 2048


class GatewayError(IssuePatchError):
    """Transport failed after retries, or the backend is misconfigured."""


class ScriptExhaustedError(GatewayError):
    """The scripted backend has no reply left for a tag."""


class LoopAborted(IssuePatchError):
    """A bounded-loop step raised; ``iterations`` counts completed calls."""

    def __init__(self, iterations: int, cause: BaseException):
        super().__init__(f"loop step failed at iteration {iterations}: {cause}")
        self.iterations = iterations


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    temperature: float = EXTRACT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    tag: str = ""

    def __post_init__(self) -> None:
        if self.max_tokens <= 0:
            raise UsageError(f"max_tokens must be > 0, got {self.max_tokens}")
        if self.temperature < 0:
            raise UsageError(f"temperature must be >= 0, got {self.temperature}")


@dataclass
class BackendConfig:
    """Backend selection plus transport knobs.

    ``kind`` is ``http_chat`` (needs ``endpoint``/``model_name``) or
    ``scripted`` (needs ``script_path`` or an inline ``script``).
    """

    kind: str = "scripted"
    endpoint: str = ""
    model_name: str = ""
    api_key_env: str = ""
    max_retries: int = 3
    requests_per_minute: int = 0
    retry_base_delay: float = 0.5
    script_path: str = ""
    script: list[dict] | None = None

    def __post_init__(self) -> None:
        if self.kind == "http_chat":
            if not self.endpoint or not self.model_name:
                raise UsageError("http_chat backend needs endpoint and model_name")
        elif self.kind == "scripted":
            if not self.script_path and self.script is None:
                raise UsageError("scripted backend needs script_path or inline script")
        else:
            raise UsageError(f"unknown backend kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class CallRecord:
    """One completed gateway call, for logs and ablation checks."""

    tag: str
    prompt: str
    reply: str
    latency: float
    retries: int = 0
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class _ScriptedBackend:
    """Replays a JSON script of ``{tag, reply}`` entries.

    A request consumes the first unconsumed entry with the same tag, falling
    back to the next unconsumed untagged entry (ordinal matching).  Matching
    is serialized to keep concurrent runs deterministic.
    """

    def __init__(self, cfg: BackendConfig):
        if cfg.script is not None:
            entries = cfg.script
        else:
            entries = json.loads(Path(cfg.script_path).read_text(encoding="utf-8"))
        self._entries = [
            {"tag": e.get("tag", ""), "reply": str(e["reply"])} for e in entries
        ]
        self._used = [False] * len(self._entries)
        self._lock = threading.Lock()

    def complete(self, req: CompletionRequest) -> str:
        with self._lock:
            for i, entry in enumerate(self._entries):
                if not self._used[i] and entry["tag"] == req.tag:
                    self._used[i] = True
                    return entry["reply"]
            for i, entry in enumerate(self._entries):
                if not self._used[i] and not entry["tag"]:
                    self._used[i] = True
                    return entry["reply"]
        raise ScriptExhaustedError(f"no scripted reply for tag {req.tag!r}")


class _HttpChatBackend:
    """Chat-completion HTTP backend with retry and rate limiting."""

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        self._lock = threading.Lock()
        self._recent: deque[float] = deque()

    def _admit(self) -> None:
        rpm = self.cfg.requests_per_minute
        if rpm <= 0:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                while self._recent and now - self._recent[0] >= 60.0:
                    self._recent.popleft()
                if len(self._recent) < rpm:
                    self._recent.append(now)
                    return
                wait = 60.0 - (now - self._recent[0])
            time.sleep(max(wait, 0.01))

    def complete(self, req: CompletionRequest) -> tuple[str, int, dict]:
        import requests as _requests

        headers = {"Content-Type": "application/json"}
        if self.cfg.api_key_env:
            key = os.environ.get(self.cfg.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        last_error: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            self._admit()
            try:
                resp = _requests.post(
                    self.cfg.endpoint, json=payload, headers=headers, timeout=120
                )
                if resp.status_code == 429 or resp.status_code >= 500:
                    # retryable; other 4xx fail fast below
                    last_error = GatewayError(f"HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    body = resp.json()
                    text = body["choices"][0]["message"]["content"]
                    return text, attempt, body.get("usage", {})
            except GatewayError:
                raise
            except Exception as e:  # transport error or bad payload
                last_error = e
            if attempt < self.cfg.max_retries:
                delay = self.cfg.retry_base_delay * (2**attempt)
                logger.warning(
                    "gateway retry %d/%d (tag=%s): %s",
                    attempt + 1,
                    self.cfg.max_retries,
                    req.tag,
                    last_error,
                )
                time.sleep(delay)
        raise GatewayError(
            f"request failed after {self.cfg.max_retries} retries: {last_error}"
        )


@dataclass
class Gateway:
    """Thread-safe front door to a configured backend; records every call."""

    config: BackendConfig
    calls: list[CallRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.config.kind == "scripted":
            self._backend = _ScriptedBackend(self.config)
        else:
            self._backend = _HttpChatBackend(self.config)
        self._log_lock = threading.Lock()

    def complete(self, req: CompletionRequest) -> str:
        start = time.perf_counter()
        retries = 0
        usage: dict = {}
        if self.config.kind == "scripted":
            reply = self._backend.complete(req)
        else:
            reply, retries, usage = self._backend.complete(req)
        record = CallRecord(
            tag=req.tag,
            prompt=req.prompt,
            reply=reply,
            latency=time.perf_counter() - start,
            retries=retries,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
        )
        with self._log_lock:
            self.calls.append(record)
        logger.debug(
            "gateway call tag=%s latency=%.3fs retries=%d", req.tag, record.latency, retries
        )
        return reply

    def ask(
        self,
        prompt: str,
        tag: str,
        temperature: float = EXTRACT_TEMPERATURE,
        max_tokens: int = DEFAULT_MAX_TOKENS,
    ) -> str:
        return self.complete(
            CompletionRequest(
                prompt=prompt, temperature=temperature, max_tokens=max_tokens, tag=tag
            )
        )


def run_bounded_loop(step: Callable[[], bool], cap: int = DEFAULT_LOOP_CAP) -> tuple[int, bool]:
    """Invoke ``step`` until it returns True (done) or ``cap`` is reached.

    Returns ``(iterations, completed)``.  A raising step aborts the loop with
    :class:`LoopAborted`, which carries the iteration count.
    """
    if cap < 1:
        raise UsageError(f"loop cap must be >= 1, got {cap}")
    iterations = 0
    while iterations < cap:
        iterations += 1
        try:
            done = step()
        except Exception as e:
            raise LoopAborted(iterations, e) from e
        if done:
            return iterations, True
    return iterations, False
