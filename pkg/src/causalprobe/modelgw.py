"""Provider gateway: chat, embedding, translation, and perplexity scoring
behind one cache / retry / rate-limit policy, plus verdict parsing and the
manual-review round trip.

Mock providers here are first-class: an all-mock run touches no network and
is a pure function of its inputs.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .layers import DialogRound
from .retrieval import Vector


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    pass


# ---------------------------------------------------------------------------
# Requests and provider protocols (duck-typed: providers expose provider_id
# plus the relevant method)


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    history: tuple[DialogRound, ...]
    question: str
    temperature: float = 0.0
    max_tokens: int = 1024
    tag: str | None = None  # caller bookkeeping (e.g. instance id); part of the cache key

    def __post_init__(self) -> None:
        if not self.question:
            raise ValueError("chat question must be non-empty")

    def to_payload(self) -> dict:
        return {
            "model_id": self.model_id,
            "history": [[r.question, r.answer] for r in self.history],
            "question": self.question,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "tag": self.tag,
        }


@dataclass(frozen=True)
class ScoredText:
    text: str
    ppl: float

    def __post_init__(self) -> None:
        if not self.ppl > 0:
            raise ValueError("perplexity must be strictly positive")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.25
    rate_per_sec: float | None = None


class _RateLimiter:
    """Token bucket; rate None means unlimited."""

    def __init__(self, rate_per_sec: float | None) -> None:
        self.rate = rate_per_sec
        self._next_free = 0.0

    def acquire(self) -> None:
        if self.rate is None:
            return
        now = time.monotonic()
        if now < self._next_free:
            time.sleep(self._next_free - now)
            now = time.monotonic()
        self._next_free = max(self._next_free, now) + 1.0 / self.rate


class ResponseCache:
    """Content-addressed on-disk cache: one JSON file per entry."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(provider_id: str, kind: str, payload: object) -> str:
        blob = json.dumps(
            {"provider": provider_id, "kind": kind, "payload": payload},
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        if not path.exists():
            self.misses += 1
            return None
        self.hits += 1
        return json.loads(path.read_text(encoding="utf-8"))["response"]

    def put(self, key: str, response: str) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps(
                {"key": key, "response": response, "timestamp": time.time()},
                ensure_ascii=False,
            ),
            encoding="utf-8",
        )
        tmp.rename(path)

    def stats(self) -> dict:
        return {"hits": self.hits, "misses": self.misses}


class Gateway:
    """Uniform front for all provider kinds; cache-first, bounded retries."""

    def __init__(
        self,
        cache: ResponseCache | None = None,
        policy: RetryPolicy = RetryPolicy(),
    ) -> None:
        self.cache = cache
        self.policy = policy
        self._limiter = _RateLimiter(policy.rate_per_sec)

    def _call(self, fn: Callable[[], str]) -> str:
        last: Exception | None = None
        for attempt in range(self.policy.max_attempts):
            self._limiter.acquire()
            try:
                return fn()
            except Exception as exc:  # noqa: BLE001 - provider errors are opaque
                last = exc
                if attempt + 1 < self.policy.max_attempts:
                    time.sleep(self.policy.backoff_base * (2**attempt))
        raise TransportError(f"provider call failed after {self.policy.max_attempts} attempts: {last}")

    def _cached(self, provider_id: str, kind: str, payload: object, fn: Callable[[], str]) -> str:
        if self.cache is None:
            return self._call(fn)
        key = ResponseCache.key(provider_id, kind, payload)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        response = self._call(fn)
        self.cache.put(key, response)
        return response

    def chat(self, provider, request: ChatRequest) -> str:
        return self._cached(
            provider.provider_id,
            "chat",
            request.to_payload(),
            lambda: provider.chat(request),
        )

    def embed(self, provider, texts: Sequence[str]) -> list[Vector]:
        if not texts:
            raise GatewayError("embed requires at least one text")
        out: list[Vector] = []
        for i, text in enumerate(texts):
            try:
                raw = self._cached(
                    provider.provider_id,
                    "embed",
                    text,
                    lambda t=text: json.dumps(list(provider.embed([t])[0].components)),
                )
            except TransportError as exc:
                raise GatewayError(f"embedding failed at text index {i}: {exc}") from exc
            out.append(Vector.of(json.loads(raw)))
        return out

    def translate(self, provider, text: str, source: str, target: str) -> str:
        supported = getattr(provider, "language_pairs", None)
        if supported is not None and (source, target) not in supported:
            raise GatewayError(f"provider {provider.provider_id} does not support {source}->{target}")
        return self._cached(
            provider.provider_id,
            "translate",
            {"text": text, "source": source, "target": target},
            lambda: provider.translate(text, source, target),
        )

    def score_ppl(self, provider, text: str) -> ScoredText:
        if not text:
            raise GatewayError("cannot score empty text")
        raw = self._cached(
            provider.provider_id, "ppl", text, lambda: repr(provider.score(text))
        )
        return ScoredText(text=text, ppl=float(raw))

    # Convenience adapters matching the callable interfaces other modules take.

    def embedder(self, provider) -> Callable[[Sequence[str]], list[Vector]]:
        return lambda texts: self.embed(provider, texts)

    def translator(self, provider) -> Callable[[str, str, str], str]:
        fn = lambda text, source, target: self.translate(provider, text, source, target)
        fn.provider_id = provider.provider_id  # type: ignore[attr-defined]
        return fn


# ---------------------------------------------------------------------------
# Providers


class HttpChatProvider:
    """Messages-array chat-completion convention over HTTPS.

    Credentials come from the environment (api_key_env), never config files.
    """

    def __init__(
        self,
        base_url: str,
        model_id: str,
        api_key_env: str = "CAUSALPROBE_API_KEY",
        timeout: float = 60.0,
        transport=None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.timeout = timeout
        self._transport = transport
        self.provider_id = f"http:{self.base_url}:{model_id}"

    def chat(self, request: ChatRequest) -> str:
        import httpx

        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise GatewayError(f"missing credential in environment variable {self.api_key_env}")
        messages: list[dict] = []
        for r in request.history:
            messages.append({"role": "user", "content": r.question})
            messages.append({"role": "assistant", "content": r.answer})
        messages.append({"role": "user", "content": request.question})
        payload = {
            "model": self.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        with httpx.Client(transport=self._transport, timeout=self.timeout) as client:
            resp = client.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {api_key}"},
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]


class ScriptedChat:
    """Deterministic chat mock: maps request tags to canned responses."""

    def __init__(self, script: dict[str, str], fallback: str = "我不知道") -> None:
        self.script = dict(script)
        self.fallback = fallback
        self.call_count = 0
        self.provider_id = "mock:scripted-chat:" + hashlib.sha256(
            json.dumps(script, sort_keys=True, ensure_ascii=False).encode("utf-8")
        ).hexdigest()[:12]

    def chat(self, request: ChatRequest) -> str:
        self.call_count += 1
        if request.tag is not None and request.tag in self.script:
            return self.script[request.tag]
        return self.fallback


class HashEmbedder:
    """Deterministic bag-of-token embedder for tests and offline runs.

    Tokens are single characters plus ASCII word runs, hashed into a fixed
    number of buckets with md5 so vectors are stable across processes.
    """

    _token_re = re.compile(r"[A-Za-z0-9]+|[^\sA-Za-z0-9]")

    def __init__(self, dim: int = 64) -> None:
        self.dim = dim
        self.call_count = 0
        self.provider_id = f"mock:hash-embedder:{dim}"

    def _bucket(self, token: str) -> int:
        return int.from_bytes(hashlib.md5(token.encode("utf-8")).digest()[:4], "big") % self.dim

    def embed(self, texts: Sequence[str]) -> list[Vector]:
        self.call_count += 1
        out = []
        for text in texts:
            counts = [0.0] * self.dim
            for token in self._token_re.findall(text):
                counts[self._bucket(token)] += 1.0
            out.append(Vector.of(counts))
        return out

    def __call__(self, texts: Sequence[str]) -> list[Vector]:
        return self.embed(texts)


class IdentityTranslator:
    def __init__(self) -> None:
        self.call_count = 0
        self.provider_id = "mock:identity-translator"

    def translate(self, text: str, source: str, target: str) -> str:
        self.call_count += 1
        return text

    def __call__(self, text: str, source: str, target: str) -> str:
        return self.translate(text, source, target)


class MarkerTranslator:
    """Wraps text in a per-hop tag; composition order stays visible."""

    def __init__(self) -> None:
        self.call_count = 0
        self.provider_id = "mock:marker-translator"

    def translate(self, text: str, source: str, target: str) -> str:
        self.call_count += 1
        return f"«{target}»{text}"

    def __call__(self, text: str, source: str, target: str) -> str:
        return self.translate(text, source, target)


class LengthPplScorer:
    """ppl = character count; handy fixed point for accounting tests."""

    def __init__(self) -> None:
        self.call_count = 0
        self.provider_id = "mock:length-ppl"

    def score(self, text: str) -> float:
        self.call_count += 1
        return float(len(text))


class ScriptedPplScorer:
    def __init__(self, score_fn: Callable[[str], float], name: str = "scripted") -> None:
        self._fn = score_fn
        self.call_count = 0
        self.provider_id = f"mock:ppl:{name}"

    def score(self, text: str) -> float:
        self.call_count += 1
        return float(self._fn(text))


# ---------------------------------------------------------------------------
# Verdict parsing


class VerdictKind(str, Enum):
    CAUSALITY_CORRECT = "correct"
    CAUSALITY_INCORRECT = "incorrect"
    UNCLEAR = "unclear"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    matched_pattern: str | None = None
    needs_review: bool = False


PATTERN_TABLE_VERSION = "v1"

# Ordered: first match in the leading clause wins.  Negations precede
# affirmations so "不正确"/"incorrect" never fall through to "正确"/"correct".
_PATTERNS: list[tuple[str, str, VerdictKind]] = [
    ("unclear-zh", r"我?不知道|无法(判断|确定|回答)|不确定", VerdictKind.UNCLEAR),
    ("unclear-en", r"i\s+don'?t\s+know|cannot\s+(determine|tell|answer)|unsure", VerdictKind.UNCLEAR),
    ("negation-zh", r"不正确|不对|不是|错误|有误|否", VerdictKind.CAUSALITY_INCORRECT),
    ("negation-en", r"\bno\b|incorrect|\bwrong\b|\bfalse\b", VerdictKind.CAUSALITY_INCORRECT),
    ("affirmation-zh", r"正确|没有?问题|对的|是", VerdictKind.CAUSALITY_CORRECT),
    ("affirmation-en", r"\byes\b|correct|\bright\b|\btrue\b", VerdictKind.CAUSALITY_CORRECT),
]
_COMPILED = [(pid, re.compile(rx, re.IGNORECASE), verdict) for pid, rx, verdict in _PATTERNS]

_CLAUSE_SPLIT = re.compile(r"[。，,.!！?？:：;；\n]")


def leading_clause(text: str) -> str:
    for part in _CLAUSE_SPLIT.split(text):
        stripped = part.strip().strip("\"'“”‘’「」 \t")
        if stripped:
            return stripped
    return ""


def parse_verdict(response: str, language: str = "zh") -> Verdict:
    """Total, deterministic classification of a model response.

    The advanced prompt instructs the model to answer first, so only the
    leading clause is authoritative; anything unmatched goes to manual review.
    """
    clause = leading_clause(response)
    for pattern_id, rx, kind in _COMPILED:
        if rx.search(clause):
            return Verdict(kind=kind, matched_pattern=pattern_id, needs_review=False)
    return Verdict(kind=VerdictKind.UNCLEAR, matched_pattern=None, needs_review=True)


# ---------------------------------------------------------------------------
# Verdict store and manual-review round trip


@dataclass(frozen=True)
class VerdictRecord:
    instance_id: str
    response: str
    verdict: Verdict

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "response": self.response,
            "verdict": self.verdict.kind.value,
            "matched_pattern": self.verdict.matched_pattern,
            "needs_review": self.verdict.needs_review,
            "pattern_table": PATTERN_TABLE_VERSION,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerdictRecord":
        return cls(
            instance_id=d["instance_id"],
            response=d["response"],
            verdict=Verdict(
                kind=VerdictKind(d["verdict"]),
                matched_pattern=d.get("matched_pattern"),
                needs_review=bool(d.get("needs_review", False)),
            ),
        )


class VerdictStore:
    """Single-writer per-run store of parsed verdicts, one JSONL file."""

    def __init__(self, records: dict[str, VerdictRecord] | None = None) -> None:
        self.records: dict[str, VerdictRecord] = dict(records or {})

    def add(self, record: VerdictRecord) -> None:
        self.records[record.instance_id] = record

    def needs_review(self) -> list[VerdictRecord]:
        return [r for r in self.records.values() if r.verdict.needs_review]

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with tmp.open("w", encoding="utf-8") as f:
            for iid in sorted(self.records):
                f.write(json.dumps(self.records[iid].to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
        tmp.rename(path)

    @classmethod
    def load(cls, path: Path) -> "VerdictStore":
        store = cls()
        with path.open(encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    store.add(VerdictRecord.from_dict(json.loads(line)))
        return store


REVIEW_HEADER = ["instance_id", "response_excerpt", "provisional_verdict", "decision"]
_REVIEW_EXCERPT_LEN = 80


def export_review(store: VerdictStore, path: Path) -> int:
    """Write flagged verdicts as editable tab-separated rows; returns the count."""
    flagged = sorted(store.needs_review(), key=lambda r: r.instance_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        f.write("\t".join(REVIEW_HEADER) + "\n")
        for r in flagged:
            excerpt = r.response.replace("\t", " ").replace("\n", " ")[:_REVIEW_EXCERPT_LEN]
            f.write(f"{r.instance_id}\t{excerpt}\t{r.verdict.kind.value}\t\n")
    return len(flagged)


def import_review(store: VerdictStore, path: Path) -> int:
    """Apply decisions from an edited review file.

    Only rows with a non-blank decision change anything; each one overwrites
    the flagged verdict and clears needs_review.  Unknown ids abort the import.
    """
    with path.open(encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    rows = [ln.split("\t") for ln in lines[1:]]
    unknown = [row[0] for row in rows if row[0] not in store.records]
    if unknown:
        raise GatewayError(f"review file references unknown instance ids: {unknown}")
    changed = 0
    for row in rows:
        decision = row[3].strip() if len(row) > 3 else ""
        if not decision:
            continue
        old = store.records[row[0]]
        store.add(
            VerdictRecord(
                instance_id=old.instance_id,
                response=old.response,
                verdict=Verdict(
                    kind=VerdictKind(decision),
                    matched_pattern="manual-review",
                    needs_review=False,
                ),
            )
        )
        changed += 1
    return changed
