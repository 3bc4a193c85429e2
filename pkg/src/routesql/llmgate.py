"""LLM gateway: one ``complete`` entry point over live, scripted and replay backends.

Every LLM call site in the pipeline goes through :func:`complete`, so swapping
the live endpoint for a scripted fixture table or a record/replay cache makes
the whole run deterministic.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import httpx

log = logging.getLogger(__name__)

DEFAULT_TOKEN_BUDGET = 12000


class LlmError(Exception):
    """Base class for gateway failures."""


class FixtureMissError(LlmError):
    pass


class CacheMissError(LlmError):
    pass


class RetriesExhaustedError(LlmError):
    pass


@dataclass(frozen=True)
class LlmRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    tag: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("LlmRequest needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def from_prompt(cls, prompt: str, tag: str, **kw) -> "LlmRequest":
        return cls(messages=(("user", prompt),), tag=tag, **kw)

    def with_suffix(self, text: str) -> "LlmRequest":
        """Same request with one more user turn appended (used for reparse retries)."""
        return LlmRequest(self.messages + (("user", text),), self.temperature, self.max_tokens, self.tag)

    @property
    def digest(self) -> str:
        return messages_digest(self.messages)

    def payload_messages(self) -> list[dict]:
        return [{"role": r, "content": c} for r, c in self.messages]


@dataclass
class LlmResponse:
    text: str
    backend_id: str
    token_counts: dict = field(default_factory=dict)
    latency: float = 0.0
    cache_hit: bool = False


def messages_digest(messages: Iterable[tuple[str, str]]) -> str:
    blob = json.dumps([[r, c] for r, c in messages], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def estimate_tokens(text: str) -> int:
    # ~4 characters per token for English prose and SQL
    return (len(text) + 3) // 4


class Backend:
    backend_id = "abstract"
    token_budget = DEFAULT_TOKEN_BUDGET

    def _complete(self, request: LlmRequest) -> LlmResponse:
        raise NotImplementedError


class ScriptedBackend(Backend):
    """Deterministic fixture table keyed by ``(tag, messages digest)``."""

    backend_id = "scripted"

    def __init__(self, table: dict[tuple[str, str], str] | None = None, token_budget: int = DEFAULT_TOKEN_BUDGET):
        self.table = dict(table or {})
        self.token_budget = token_budget

    def add(self, request: LlmRequest, text: str) -> None:
        self.table[(request.tag, request.digest)] = text

    def add_prompt(self, tag: str, prompt: str, text: str) -> None:
        self.add(LlmRequest.from_prompt(prompt, tag), text)

    def _complete(self, request):
        key = (request.tag, request.digest)
        if key not in self.table:
            raise FixtureMissError(f"no scripted reply for tag={request.tag!r} digest={request.digest[:12]}")
        return LlmResponse(self.table[key], self.backend_id, cache_hit=False)

    @classmethod
    def load(cls, path: str | Path, **kw) -> "ScriptedBackend":
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls({(e["tag"], e["digest"]): e["text"] for e in entries}, **kw)

    def save(self, path: str | Path) -> None:
        entries = [{"tag": t, "digest": d, "text": x} for (t, d), x in sorted(self.table.items())]
        Path(path).write_text(json.dumps(entries, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


class CallableBackend(Backend):
    """Wraps a plain function ``(request) -> text``; handy for authoring fixtures."""

    backend_id = "callable"

    def __init__(self, fn: Callable[[LlmRequest], str], token_budget: int = DEFAULT_TOKEN_BUDGET):
        self.fn = fn
        self.token_budget = token_budget

    def _complete(self, request):
        return LlmResponse(self.fn(request), self.backend_id)


class RecordingBackend(Backend):
    """Passes calls to ``inner`` and remembers every reply in a scripted table."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.token_budget = inner.token_budget
        self.recorded = ScriptedBackend(token_budget=inner.token_budget)

    def _complete(self, request):
        resp = self.inner._complete(request)
        self.recorded.add(request, resp.text)
        return resp


class LiveBackend(Backend):
    """Chat-completions style HTTP endpoint."""

    backend_id = "live"
    transient_status = {408, 409, 429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "ROUTESQL_API_KEY",
        timeout: float = 60.0,
        attempts: int = 3,
        backoff: float = 1.0,
        token_budget: int = DEFAULT_TOKEN_BUDGET,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.attempts = attempts
        self.backoff = backoff
        self.token_budget = token_budget
        self.backend_id = f"live:{model}"
        self._client = client or httpx.Client(timeout=timeout)

    def _complete(self, request):
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.model,
            "messages": request.payload_messages(),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        last = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            t0 = time.perf_counter()
            try:
                r = self._client.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
            except httpx.TransportError as exc:
                last = exc
                log.warning("transport error on attempt %d: %s", attempt + 1, exc)
                continue
            if r.status_code in self.transient_status:
                last = LlmError(f"HTTP {r.status_code}")
                log.warning("transient HTTP %d on attempt %d", r.status_code, attempt + 1)
                continue
            r.raise_for_status()
            data = r.json()
            return LlmResponse(
                text=data["choices"][0]["message"]["content"] or "",
                backend_id=self.backend_id,
                token_counts=dict(data.get("usage") or {}),
                latency=time.perf_counter() - t0,
            )
        raise RetriesExhaustedError(f"{self.attempts} attempts failed: {last}")


class ReplayBackend(Backend):
    """Content-addressed JSON-lines cache in front of another backend.

    ``mode="strict"`` never calls through; ``mode="record"`` calls ``inner`` on a
    miss and appends the reply to the cache file.
    """

    def __init__(self, path: str | Path, mode: str = "strict", inner: Backend | None = None):
        if mode not in ("strict", "record"):
            raise ValueError(f"unknown replay mode {mode!r}")
        if mode == "record" and inner is None:
            raise ValueError("record mode needs an inner backend")
        self.path = Path(path)
        self.mode = mode
        self.inner = inner
        self.backend_id = f"replay:{inner.backend_id}" if inner else "replay"
        self.token_budget = inner.token_budget if inner else DEFAULT_TOKEN_BUDGET
        self._lock = threading.Lock()
        self._cache: dict[str, str] = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._cache[rec["key"]] = rec["text"]

    @staticmethod
    def key(request: LlmRequest) -> str:
        return f"{request.tag}:{request.digest}"

    def _complete(self, request):
        k = self.key(request)
        with self._lock:
            if k in self._cache:
                return LlmResponse(self._cache[k], self.backend_id, cache_hit=True)
        if self.mode == "strict":
            raise CacheMissError(f"replay cache miss for {k[:40]}")
        resp = self.inner._complete(request)
        line = json.dumps({"key": k, "tag": request.tag, "text": resp.text}, ensure_ascii=False) + "\n"
        with self._lock:
            if k not in self._cache:
                self._cache[k] = resp.text
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
        resp.cache_hit = False
        return resp


_inflight = threading.BoundedSemaphore(8)


def set_concurrency_cap(n: int) -> None:
    global _inflight
    _inflight = threading.BoundedSemaphore(max(1, n))


def complete(request: LlmRequest, backend: Backend) -> LlmResponse:
    with _inflight:
        return backend._complete(request)
