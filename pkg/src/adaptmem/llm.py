"""Model gateway: prompt rendering, JSON-contract calls, embeddings.

Two kinds of backend plug in here:

* :class:`OpenAICompatibleBackend` talks the chat-completions and
  embeddings REST protocol over HTTP.
* :class:`ScriptedBackend` replays canned completions for tests and demos,
  with :class:`HashEmbedder` supplying deterministic embeddings.

Token accounting is collected per call into whichever ``track_usage``
block is active in the current context, so concurrent sessions never mix
their ledgers.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import logging
import math
import os
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Protocol, Sequence

import httpx
import numpy as np

from . import contracts
from .errors import BackendUnavailable, ContractViolation, EmptyInput, ScriptExhausted
from .prompts import PromptSet, render_prompt

logger = logging.getLogger(__name__)

REPAIR_SUFFIX = (
    "\n\nYour previous reply did not satisfy the required output format "
    "({error}). Return exactly one valid JSON object and nothing else."
)


@dataclass(frozen=True)
class ChatRequest:
    prompt: str
    temperature: float = 0.0
    max_retries: int = 2
    tag: str = ""

    def __post_init__(self):
        if not (self.temperature >= 0):
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding values must be finite")

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class CallUsage:
    agent: str
    prompt_tokens: int
    completion_tokens: int

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


def whitespace_tokens(text: str) -> int:
    return len(text.split())


class ChatBackend(Protocol):
    def complete(self, request: ChatRequest) -> Completion: ...


class EmbeddingBackend(Protocol):
    model_tag: str

    def embed(self, text: str) -> Sequence[float]: ...


# --- embeddings ---------------------------------------------------------------


class HashEmbedder:
    """Deterministic stand-in for a text encoder.

    ``mode="text"`` seeds a Gaussian from the SHA-256 of the whole string,
    so distinct texts are near-orthogonal. ``mode="tokens"`` sums one such
    vector per lowercase token, which gives word-overlap similarity and
    makes demos behave sensibly. Either way the output is L2-normalized.
    """

    def __init__(self, dim: int = 64, mode: str = "text"):
        if dim < 1:
            raise ValueError("dim must be positive")
        if mode not in ("text", "tokens"):
            raise ValueError("mode must be 'text' or 'tokens'")
        self.dim = dim
        self.mode = mode
        self.model_tag = f"hash-{mode}-{dim}"

    def _gaussian(self, text: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
        return np.random.default_rng(seed).standard_normal(self.dim)

    def embed(self, text: str) -> list[float]:
        if self.mode == "text":
            v = self._gaussian(text)
        else:
            tokens = [t.strip(".,!?;:'\"()[]{}").lower() for t in text.split()]
            tokens = [t for t in tokens if t]
            v = np.zeros(self.dim)
            for t in tokens or [text]:
                v += self._gaussian(t)
        n = np.linalg.norm(v)
        if n == 0:  # pragma: no cover - probability zero
            v = self._gaussian(text + "\0")
            n = np.linalg.norm(v)
        return (v / n).tolist()


# --- scripted mock ------------------------------------------------------------


Step = str | Callable[[ChatRequest], str]


class ScriptedBackend:
    """Replays canned completions in order and records every request.

    ``steps`` is the shared queue. ``by_tag`` holds per-contract queues
    (keys are contract ids such as ``"verdict"`` or ``"response"``); a call
    whose tag has its own queue never touches the shared one. A step is
    either literal text or a callable receiving the request.

    Embedding calls pop from ``embeddings`` first and fall back to
    ``embedder`` (a :class:`HashEmbedder` by default).
    """

    def __init__(
        self,
        steps: Sequence[Step] = (),
        *,
        by_tag: Mapping[str, Sequence[Step]] | None = None,
        embeddings: Sequence[Sequence[float]] = (),
        embedder: EmbeddingBackend | None = None,
        dim: int = 64,
    ):
        self._steps: deque[Step] = deque(steps)
        self._by_tag = {k: deque(v) for k, v in (by_tag or {}).items()}
        self._embeddings = deque(embeddings)
        self.embedder = embedder or HashEmbedder(dim)
        self.model_tag = getattr(self.embedder, "model_tag", "scripted")
        self.requests: list[ChatRequest] = []
        self.embed_requests: list[str] = []
        self._lock = threading.Lock()

    def push(self, *steps: Step, tag: str | None = None) -> None:
        with self._lock:
            if tag is None:
                self._steps.extend(steps)
            else:
                self._by_tag.setdefault(tag, deque()).extend(steps)

    def remaining(self, tag: str | None = None) -> int:
        if tag is None:
            return len(self._steps)
        return len(self._by_tag.get(tag, ()))

    def complete(self, request: ChatRequest) -> Completion:
        with self._lock:
            self.requests.append(request)
            queue = self._by_tag.get(request.tag, self._steps)
            if not queue:
                raise ScriptExhausted(
                    f"script exhausted at call {len(self.requests)} (tag={request.tag!r})"
                )
            step = queue.popleft()
        text = step(request) if callable(step) else step
        return Completion(text, whitespace_tokens(request.prompt), whitespace_tokens(text))

    def embed(self, text: str) -> list[float]:
        with self._lock:
            self.embed_requests.append(text)
            if self._embeddings:
                return list(self._embeddings.popleft())
        return list(self.embedder.embed(text))

    def calls(self, tag: str) -> list[ChatRequest]:
        return [r for r in self.requests if r.tag == tag]


def script_mock(steps: Sequence[Step] = (), **kwargs) -> ScriptedBackend:
    return ScriptedBackend(steps, **kwargs)


# --- HTTP backend -------------------------------------------------------------


class OpenAICompatibleBackend:
    """Chat completions and embeddings over an OpenAI-style REST API."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        chat_model: str = "gpt-4o-mini",
        embedding_model: str = "text-embedding-3-large",
        dimensions: int | None = None,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.base_url = (base_url or os.environ.get("ADAPTMEM_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("ADAPTMEM_API_KEY", os.environ.get("OPENAI_API_KEY", ""))
        self.chat_model = chat_model
        self.embedding_model = embedding_model
        self.dimensions = dimensions
        self.model_tag = embedding_model
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        self._client = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout, transport=transport)

    def _post(self, path: str, payload: dict) -> dict:
        try:
            resp = self._client.post(path, json=payload)
        except httpx.HTTPError as exc:
            raise BackendUnavailable(f"POST {path} failed: {exc}") from exc
        if resp.status_code >= 400:
            raise BackendUnavailable(f"POST {path} returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise BackendUnavailable(f"POST {path} returned non-JSON body") from exc

    def complete(self, request: ChatRequest) -> Completion:
        body = self._post(
            "/chat/completions",
            {
                "model": self.chat_model,
                "messages": [{"role": "user", "content": request.prompt}],
                "temperature": request.temperature,
            },
        )
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable("malformed chat-completions response") from exc
        usage = body.get("usage") or {}
        return Completion(
            text,
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
        )

    def embed(self, text: str) -> list[float]:
        payload = {"model": self.embedding_model, "input": text}
        if self.dimensions:
            payload["dimensions"] = self.dimensions
        body = self._post("/embeddings", payload)
        try:
            return [float(x) for x in body["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendUnavailable("malformed embeddings response") from exc

    def close(self) -> None:
        self._client.close()


# --- gateway ------------------------------------------------------------------


_usage_sink: contextvars.ContextVar[list | None] = contextvars.ContextVar("adaptmem_usage", default=None)


class Gateway:
    """Single entry point for every model interaction."""

    def __init__(
        self,
        chat: ChatBackend,
        embedder: EmbeddingBackend | None = None,
        *,
        dim: int,
        prompts: PromptSet | None = None,
        temperature: float = 0.0,
        max_retries: int = 2,
    ):
        self.chat = chat
        self.embedder = embedder if embedder is not None else chat
        self.dim = dim
        self.prompts = prompts or PromptSet.default()
        self.temperature = temperature
        self.max_retries = max_retries

    @contextlib.contextmanager
    def track_usage(self) -> Iterator[list[CallUsage]]:
        calls: list[CallUsage] = []
        token = _usage_sink.set(calls)
        try:
            yield calls
        finally:
            _usage_sink.reset(token)

    def _complete_once(self, request: ChatRequest) -> str:
        try:
            completion = self.chat.complete(request)
        except (httpx.HTTPError, OSError) as exc:
            raise BackendUnavailable(str(exc)) from exc
        sink = _usage_sink.get()
        if sink is not None:
            sink.append(CallUsage(request.tag, completion.prompt_tokens, completion.completion_tokens))
        return completion.text

    def request(self, prompt: str, tag: str = "") -> ChatRequest:
        return ChatRequest(prompt, self.temperature, self.max_retries, tag)

    def complete_text(self, req: ChatRequest) -> str:
        return self._complete_once(req)

    def complete_json(
        self,
        req: ChatRequest,
        schema: str,
        check: Callable[[dict], None] | None = None,
    ) -> dict:
        """Call the model until its output satisfies ``schema``.

        ``check`` may add context-dependent rules (e.g. ids must belong to
        the candidate set); it signals failure by raising
        :class:`ContractViolation`. Each retry re-sends the prompt with a
        short repair note naming the previous error.
        """
        if schema not in contracts.SCHEMAS:
            raise ValueError(f"unknown contract {schema!r}")
        if not req.tag:
            req = ChatRequest(req.prompt, req.temperature, req.max_retries, schema)
        prompt = req.prompt
        raw = None
        error = None
        for attempt in range(req.max_retries + 1):
            attempt_req = ChatRequest(prompt, req.temperature, req.max_retries, req.tag)
            raw = self._complete_once(attempt_req)
            try:
                return contracts.first_valid(raw, schema, check)
            except ContractViolation as exc:
                error = str(exc)
                logger.debug("contract %s attempt %d failed: %s", schema, attempt + 1, error)
                prompt = req.prompt + REPAIR_SUFFIX.format(error=error[:200])
        raise ContractViolation(
            f"{schema}: no valid output after {req.max_retries + 1} attempt(s): {error}",
            raw=raw,
            schema=schema,
        )

    def call(self, template: str, bindings: Mapping[str, str], schema: str, check=None) -> dict:
        """Render ``template`` with ``bindings`` and run it under ``schema``."""
        prompt = render_prompt(template, bindings)
        return self.complete_json(self.request(prompt, schema), schema, check)

    def embed_text(self, text: str) -> EmbeddingVector:
        if not isinstance(text, str) or not text.strip():
            raise EmptyInput("cannot embed empty text")
        try:
            values = self.embedder.embed(text)
        except (httpx.HTTPError, OSError) as exc:
            raise BackendUnavailable(str(exc)) from exc
        if len(values) != self.dim:
            raise BackendUnavailable(f"embedding backend returned {len(values)} dims, expected {self.dim}")
        try:
            return EmbeddingVector(tuple(values), getattr(self.embedder, "model_tag", ""))
        except ValueError as exc:
            raise BackendUnavailable(str(exc)) from exc


def total_usage(calls: Sequence[CallUsage]) -> dict:
    return {
        "prompt_tokens": sum(c.prompt_tokens for c in calls),
        "completion_tokens": sum(c.completion_tokens for c in calls),
    }
