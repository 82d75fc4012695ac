"""Language-model gateway: one interface, a deterministic mock and a live HTTP backend.

All model traffic in the package flows through :class:`LlmGateway` so that
token accounting, concurrency limits, and budget enforcement live in exactly
one place. The mock backend is fully deterministic: embeddings are hash-seeded
projections of character trigrams and chat responses come from either a
prompt-hash fixture map or rule-based handlers keyed on the section headers of
the shipped prompt templates.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BudgetExceeded, MalformedResponse, NetworkError, ZeroVector
from .text import word_tokens

CREDENTIAL_ENV_VAR = "STRATARAG_API_KEY"

_FORMATS = ("free_text", "json_object")


@dataclass(frozen=True)
class TokenUsage:
    """Prompt/completion token counts for one call or a whole run."""

    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class ChatRequest:
    """A single chat call. Validated on construction."""

    prompt_text: str
    max_output_tokens: int = 1024
    temperature: float = 0.0
    response_format: str = "free_text"

    def __post_init__(self):
        if not self.prompt_text:
            raise ValueError("prompt_text must be non-empty")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.response_format not in _FORMATS:
            raise ValueError(f"response_format must be one of {_FORMATS}")


@dataclass(frozen=True)
class ChatResult:
    text: str
    usage: TokenUsage


@dataclass(frozen=True)
class EmbeddingVector:
    """A unit-normalized embedding. `values` is a float32 array."""

    values: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.values))
        if not math.isfinite(norm) or abs(norm - 1.0) > 1e-4:
            raise ValueError(f"embedding is not unit-normalized (|v| = {norm})")

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_raw(cls, raw: Sequence[float]) -> "EmbeddingVector":
        arr = np.asarray(raw, dtype=np.float32)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0 or not math.isfinite(norm):
            raise ZeroVector("cannot normalize a zero or non-finite vector")
        return cls((arr / norm).astype(np.float32))


def fixture_key(prompt_text: str) -> str:
    """Stable key for the mock fixture map: first 16 hex chars of sha256."""
    return hashlib.sha256(prompt_text.encode("utf-8")).hexdigest()[:16]


def _approx_tokens(text: str) -> int:
    """The mock's usage estimate: one token per four characters, rounded up."""
    return math.ceil(len(text) / 4)


class LlmGateway(ABC):
    """Shared accounting, budget, and concurrency layer for all backends.

    `token_budget` caps the cumulative total across the run; the call that
    crosses the cap raises :class:`BudgetExceeded`. `concurrency` bounds the
    number of in-flight calls.
    """

    def __init__(self, concurrency: int = 10, token_budget: int | None = None):
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        self._semaphore = threading.Semaphore(concurrency)
        self._lock = threading.Lock()
        self._usage = TokenUsage()
        self._budget = token_budget
        self.call_log: list[tuple[str, str]] = []
        self.network_ops = 0

    @property
    def usage_total(self) -> TokenUsage:
        with self._lock:
            return self._usage

    @property
    def call_count(self) -> int:
        with self._lock:
            return len(self.call_log)

    def _account(self, kind: str, key: str, usage: TokenUsage):
        with self._lock:
            self._usage = self._usage + usage
            self.call_log.append((kind, key))
            if self._budget is not None and self._usage.total > self._budget:
                raise BudgetExceeded(
                    f"token budget {self._budget} exceeded "
                    f"({self._usage.total} tokens used)"
                )

    def chat(self, request: ChatRequest) -> ChatResult:
        with self._semaphore:
            result = self._chat(request)
        self._account("chat", fixture_key(request.prompt_text), result.usage)
        return result

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if len(texts) == 0:
            return []
        with self._semaphore:
            vectors, usage = self._embed(list(texts))
        self._account("embed", fixture_key("\x1f".join(texts)), usage)
        return vectors

    @abstractmethod
    def _chat(self, request: ChatRequest) -> ChatResult: ...

    @abstractmethod
    def _embed(self, texts: list[str]) -> tuple[list[EmbeddingVector], TokenUsage]: ...


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

# Capitalized word runs; single-word common sentence openers are dropped after.
_ENTITY_RE = re.compile(r"[A-Z][A-Za-z0-9]*(?:\s+[A-Z][A-Za-z0-9]*)*")
_ENTITY_STOPWORDS = {
    "The", "A", "An", "It", "In", "On", "At", "By", "Its", "This", "These",
    "Their", "They", "He", "She", "We", "I", "As", "After", "Before", "But",
}
_PASSIVE_RE = re.compile(r"(\w+(?:ed|en))\s+by$")
_REPORT_LINE_RE = re.compile(r"^\d+\. \(layer \d+, score [0-9.]+\) (.+)$")


class MockGateway(LlmGateway):
    """Deterministic offline backend.

    Chat responses are resolved in order: exact prompt-hash fixture, then a
    rule-based handler chosen by the template's section headers, then a
    generic echo. Embeddings are seeded projections of character trigrams, so
    identical texts map to identical unit vectors and texts sharing wording
    land near each other.
    """

    def __init__(
        self,
        fixtures: dict[str, str] | None = None,
        seed: int = 0,
        embed_dim: int = 64,
        concurrency: int = 10,
        token_budget: int | None = None,
    ):
        super().__init__(concurrency=concurrency, token_budget=token_budget)
        if embed_dim < 4:
            raise ValueError("embed_dim must be >= 4")
        self.fixtures = dict(fixtures or {})
        self.seed = seed
        self.embed_dim = embed_dim
        self._ngram_cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_fixture_file(cls, path, **kwargs) -> "MockGateway":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(fixtures=json.load(fh), **kwargs)

    # -- chat ---------------------------------------------------------------

    def _chat(self, request: ChatRequest) -> ChatResult:
        prompt = request.prompt_text
        key = fixture_key(prompt)
        if key in self.fixtures:
            text = self.fixtures[key]
        elif "# Passage" in prompt:
            text = self._handle_extract(prompt)
        elif "# Members" in prompt:
            text = self._handle_summarize(prompt)
        elif "# Descriptions" in prompt:
            text = self._handle_consolidate(prompt)
        elif "# Data records" in prompt:
            text = self._handle_filter(prompt)
        elif "# Analyst Reports" in prompt:
            text = self._handle_merge(prompt)
        elif request.response_format == "json_object":
            text = "{}"
        else:
            text = f"mock:{key[:8]}"
        if request.response_format == "json_object":
            try:
                json.loads(text)
            except json.JSONDecodeError as exc:
                raise MalformedResponse(
                    f"mock response for prompt {key} is not valid JSON"
                ) from exc
        usage = TokenUsage(_approx_tokens(prompt), _approx_tokens(text))
        return ChatResult(text=text, usage=usage)

    @staticmethod
    def _section(prompt: str, header: str) -> str:
        """Text between the `header` line and the next '# ' line (or the end).
        The header must fill a whole line; a mid-sentence mention is not a
        section start."""
        lines = prompt.split("\n")
        try:
            start = lines.index(header)
        except ValueError:
            return ""
        body = []
        for line in lines[start + 1 :]:
            if line.startswith("# "):
                break
            body.append(line)
        return "\n".join(body).strip()

    def _handle_extract(self, prompt: str) -> str:
        passage = self._section(prompt, "# Passage")
        entities: dict[str, str] = {}
        relations = []
        # Sentence split on ., !, ? boundaries.
        for sentence in re.split(r"(?<=[.!?])\s+", passage):
            found = []
            for m in _ENTITY_RE.finditer(sentence):
                name = m.group(0)
                if name in _ENTITY_STOPWORDS:
                    continue
                found.append((name, m.start(), m.end()))
                entities.setdefault(name, sentence.strip())
            for (a, _, a_end), (b, b_start, _) in zip(found, found[1:]):
                connector = sentence[a_end:b_start].strip(" ,;:").strip()
                if not connector or len(connector.split()) > 8:
                    continue
                passive = _PASSIVE_RE.search(connector)
                if passive:
                    relations.append(
                        {"head": b, "tail": a, "description": passive.group(1)}
                    )
                else:
                    relations.append({"head": a, "tail": b, "description": connector})
        payload = {
            "entities": [
                {"name": name, "description": desc} for name, desc in entities.items()
            ],
            "relations": relations,
        }
        return json.dumps(payload)

    def _handle_summarize(self, prompt: str) -> str:
        members = self._section(prompt, "# Members")
        details = self._section(prompt, "# Details")
        names = [n.strip() for n in members.split(",") if n.strip()]
        if len(names) == 1:
            for line in details.splitlines():
                line = line.strip()
                if line.startswith("- ") and ":" in line:
                    desc = line[2:].split(":", 1)[1].strip()
                    if desc:
                        return desc
            return names[0]
        return "Summary of: " + ", ".join(sorted(names))

    def _handle_consolidate(self, prompt: str) -> str:
        body = self._section(prompt, "# Descriptions")
        parts = [
            line[2:].strip()
            for line in body.splitlines()
            if line.strip().startswith("- ")
        ]
        return " | ".join(parts)

    def _handle_filter(self, prompt: str) -> str:
        context = self._section(prompt, "# Data records")
        question = self._section(prompt, "# User question")
        q_tokens = set(word_tokens(question))
        points = []
        if q_tokens:
            for line in context.splitlines():
                line = line.strip()
                if not line:
                    continue
                overlap = len(q_tokens & set(word_tokens(line)))
                if overlap == 0:
                    continue
                score = round(100.0 * overlap / len(q_tokens), 1)
                points.append({"description": line, "score": score})
        points.sort(key=lambda p: -p["score"])
        return json.dumps({"points": points})

    def _handle_merge(self, prompt: str) -> str:
        reports = self._section(prompt, "# Analyst Reports")
        question = self._section(prompt, "# User question")
        descriptions = []
        for line in reports.splitlines():
            m = _REPORT_LINE_RE.match(line.strip())
            if m:
                descriptions.append(m.group(1))
        if not descriptions:
            return (
                "No analyst reports were provided; from general knowledge there "
                f"is no grounded answer to: {question}"
            )
        return "; ".join(descriptions[:3])

    # -- embeddings -----------------------------------------------------------

    def _ngram_vector(self, gram: str) -> np.ndarray:
        vec = self._ngram_cache.get(gram)
        if vec is None:
            digest = hashlib.blake2b(
                f"{self.seed}|{gram}".encode("utf-8"), digest_size=8
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.embed_dim).astype(np.float64)
            self._ngram_cache[gram] = vec
        return vec

    def _embed_one(self, text: str) -> EmbeddingVector:
        padded = f"^{text}$"
        acc = np.zeros(self.embed_dim, dtype=np.float64)
        for i in range(max(len(padded) - 2, 1)):
            acc += self._ngram_vector(padded[i : i + 3])
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:  # unreachable in practice; keep the contract total
            acc[0] = 1.0
            norm = 1.0
        return EmbeddingVector((acc / norm).astype(np.float32))

    def _embed(self, texts: list[str]) -> tuple[list[EmbeddingVector], TokenUsage]:
        vectors = [self._embed_one(t) for t in texts]
        usage = TokenUsage(sum(_approx_tokens(t) for t in texts), 0)
        return vectors, usage


# ---------------------------------------------------------------------------
# Live backend (OpenAI-compatible JSON over HTTP)
# ---------------------------------------------------------------------------


class HttpGateway(LlmGateway):
    """Chat-completions + embeddings client for OpenAI-compatible endpoints.

    Transport failures and retryable statuses are retried `retries` times with
    exponential backoff (base * 2**attempt seconds) before NetworkError. A
    json_object completion that stays unparsable through the retry budget
    raises MalformedResponse.
    """

    RETRYABLE_STATUSES = (408, 409, 429, 500, 502, 503, 504)

    def __init__(
        self,
        endpoint: str,
        chat_model: str,
        embed_model: str,
        api_key: str | None = None,
        retries: int = 3,
        backoff_base: float = 1.0,
        timeout: float = 60.0,
        concurrency: int = 10,
        token_budget: int | None = None,
    ):
        super().__init__(concurrency=concurrency, token_budget=token_budget)
        self.endpoint = endpoint.rstrip("/")
        self.chat_model = chat_model
        self.embed_model = embed_model
        self.api_key = api_key if api_key is not None else os.environ.get(CREDENTIAL_ENV_VAR)
        self.retries = retries
        self.backoff_base = backoff_base
        self._client = httpx_client(timeout)

    def close(self):
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post_with_retries(self, path: str, payload: dict, parse):
        last_error: Exception | None = None
        for attempt in range(self.retries):
            try:
                with self._lock:
                    self.network_ops += 1
                response = self._client.post(
                    f"{self.endpoint}{path}", json=payload, headers=self._headers()
                )
            except Exception as exc:  # httpx transport errors
                last_error = exc
            else:
                if response.status_code in self.RETRYABLE_STATUSES:
                    last_error = NetworkError(
                        f"{path} returned status {response.status_code}"
                    )
                elif response.status_code != 200:
                    raise NetworkError(
                        f"{path} failed with status {response.status_code}: "
                        f"{response.text[:200]}"
                    )
                else:
                    try:
                        return parse(response.json())
                    except MalformedResponse as exc:
                        last_error = exc
                    except (KeyError, IndexError, TypeError, ValueError) as exc:
                        last_error = MalformedResponse(
                            f"unexpected {path} response shape: {exc}"
                        )
            if attempt + 1 < self.retries:
                time.sleep(self.backoff_base * (2**attempt))
        if isinstance(last_error, MalformedResponse):
            raise last_error
        raise NetworkError(
            f"{path} failed after {self.retries} attempts: {last_error}"
        ) from last_error

    def _chat(self, request: ChatRequest) -> ChatResult:
        payload = {
            "model": self.chat_model,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.response_format == "json_object":
            payload["response_format"] = {"type": "json_object"}

        def parse(body: dict) -> ChatResult:
            text = body["choices"][0]["message"]["content"]
            if request.response_format == "json_object":
                try:
                    json.loads(text)
                except json.JSONDecodeError as exc:
                    raise MalformedResponse(
                        "model returned unparsable JSON for a json_object request"
                    ) from exc
            usage = body.get("usage", {})
            return ChatResult(
                text=text,
                usage=TokenUsage(
                    int(usage.get("prompt_tokens", 0)),
                    int(usage.get("completion_tokens", 0)),
                ),
            )

        return self._post_with_retries("/chat/completions", payload, parse)

    def _embed(self, texts: list[str]) -> tuple[list[EmbeddingVector], TokenUsage]:
        payload = {"model": self.embed_model, "input": texts}

        def parse(body: dict):
            rows = sorted(body["data"], key=lambda item: item["index"])
            vectors = [EmbeddingVector.from_raw(row["embedding"]) for row in rows]
            usage = body.get("usage", {})
            return vectors, TokenUsage(int(usage.get("prompt_tokens", 0)), 0)

        return self._post_with_retries("/embeddings", payload, parse)


def httpx_client(timeout: float):
    import httpx

    return httpx.Client(timeout=timeout)
