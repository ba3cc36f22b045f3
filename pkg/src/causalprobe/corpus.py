"""Annotated-corpus ingestion, relation filtering, and sentence/span algebra.

All offsets count Unicode scalar values (Python string indices) into the
passage text, half-open: [start, end).  Every downstream perturbation is
span surgery on these offsets, so this module is the single owner of the
span rules.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import IO, Iterable, Iterator

FULL_STOP = "。"  # 。


class CorpusError(Exception):
    pass


class ParseError(CorpusError):
    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateIdError(CorpusError):
    def __init__(self, passage_id: str) -> None:
        super().__init__(f"duplicate passage id: {passage_id}")
        self.passage_id = passage_id


class RelationKind(str, Enum):
    CAUSATION = "causation"
    CONDITIONALITY = "conditionality"
    HIERARCHICAL = "hierarchical"


DEFAULT_POLICY = frozenset({RelationKind.CAUSATION})


@dataclass(frozen=True, order=True)
class Span:
    """Half-open character range [start, end)."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ValueError(f"empty or inverted span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def overlaps(self, other: "Span") -> bool:
        return self.start < other.end and other.start < self.end

    def contains(self, other: "Span") -> bool:
        return self.start <= other.start and other.end <= self.end

    def within(self, length: int) -> bool:
        return 0 <= self.start and self.end <= length

    def shift(self, delta: int) -> "Span":
        return Span(self.start + delta, self.end + delta)

    def slice(self, text: str) -> str:
        return text[self.start : self.end]

    def as_list(self) -> list[int]:
        return [self.start, self.end]


@dataclass(frozen=True)
class CausalRelation:
    head: Span
    tail: Span
    kind: RelationKind

    def __post_init__(self) -> None:
        if self.head.overlaps(self.tail):
            raise ValueError("head and tail spans overlap")


@dataclass(frozen=True)
class AnnotatedPassage:
    id: str
    text: str
    relations: tuple[CausalRelation, ...]


@dataclass(frozen=True)
class SentenceSpan:
    range: Span
    index: int


@dataclass(frozen=True)
class RejectedRelation:
    passage_id: str
    raw: dict
    reason: str


@dataclass(frozen=True)
class IngestReport:
    passages: int
    relations_kept: int
    rejected: tuple[RejectedRelation, ...]

    def to_dict(self) -> dict:
        return {
            "passages": self.passages,
            "relations_kept": self.relations_kept,
            "rejected": [
                {"passage_id": r.passage_id, "relation": r.raw, "reason": r.reason}
                for r in self.rejected
            ],
        }


@dataclass(frozen=True)
class Agg:
    """Sum/avg/max/min over a count column; avg is None on empty input."""

    sum: int
    avg: float | None
    max: int | None
    min: int | None

    @classmethod
    def over(cls, values: list[int]) -> "Agg":
        if not values:
            return cls(sum=0, avg=None, max=None, min=None)
        return cls(
            sum=sum(values),
            avg=sum(values) / len(values),
            max=max(values),
            min=min(values),
        )


@dataclass(frozen=True)
class CorpusStats:
    passage_count: int
    length_stats: Agg
    relations_per_passage: Agg
    per_kind_counts: dict[str, int]
    zero_relation_passages: int

    def to_dict(self) -> dict:
        return {
            "passage_count": self.passage_count,
            "length_stats": vars(self.length_stats),
            "relations_per_passage": vars(self.relations_per_passage),
            "per_kind_counts": dict(self.per_kind_counts),
            "zero_relation_passages": self.zero_relation_passages,
        }


def _parse_relation(raw: dict, text_len: int) -> CausalRelation:
    head = Span(*raw["head"])
    tail = Span(*raw["tail"])
    if not head.within(text_len) or not tail.within(text_len):
        raise ValueError("span out of passage bounds")
    return CausalRelation(head=head, tail=tail, kind=RelationKind(raw["kind"]))


def parse_corpus(stream: IO[str] | Iterable[str]) -> tuple[list[AnnotatedPassage], IngestReport]:
    """Parse a line-delimited corpus file.

    Each line is a JSON object {"id", "text", "relations": [{"head": [s, e],
    "tail": [s, e], "kind"}]}.  Relations with out-of-bounds spans or
    overlapping head/tail are dropped and counted in the returned report.
    """
    passages: list[AnnotatedPassage] = []
    seen_ids: set[str] = set()
    rejected: list[RejectedRelation] = []
    kept = 0
    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
            pid = raw["id"]
            text = raw["text"]
            raw_relations = raw.get("relations", [])
            if not isinstance(pid, str) or not isinstance(text, str):
                raise TypeError("id and text must be strings")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(line_no, str(exc)) from exc
        if pid in seen_ids:
            raise DuplicateIdError(pid)
        seen_ids.add(pid)
        relations: list[CausalRelation] = []
        for raw_rel in raw_relations:
            try:
                relations.append(_parse_relation(raw_rel, len(text)))
                kept += 1
            except (ValueError, KeyError, TypeError) as exc:
                rejected.append(RejectedRelation(pid, raw_rel, str(exc)))
        passages.append(AnnotatedPassage(id=pid, text=text, relations=tuple(relations)))
    report = IngestReport(passages=len(passages), relations_kept=kept, rejected=tuple(rejected))
    return passages, report


def passage_to_record(passage: AnnotatedPassage) -> dict:
    return {
        "id": passage.id,
        "text": passage.text,
        "relations": [
            {"head": r.head.as_list(), "tail": r.tail.as_list(), "kind": r.kind.value}
            for r in passage.relations
        ],
    }


def write_corpus(passages: Iterable[AnnotatedPassage], stream: IO[str]) -> None:
    for p in passages:
        stream.write(json.dumps(passage_to_record(p), ensure_ascii=False) + "\n")


def filter_relations(
    passage: AnnotatedPassage, policy: frozenset[RelationKind] = DEFAULT_POLICY
) -> AnnotatedPassage:
    """Keep only relations whose kind is in the policy set; text untouched."""
    if not policy:
        raise ValueError("relation policy must be non-empty")
    return replace(
        passage, relations=tuple(r for r in passage.relations if r.kind in policy)
    )


def segment_sentences(text: str) -> list[SentenceSpan]:
    """Split on the Chinese full stop, delimiter attached to the preceding span.

    Trailing text without a delimiter forms a final span.  The returned spans
    partition the text exactly.
    """
    spans: list[SentenceSpan] = []
    start = 0
    for i, ch in enumerate(text):
        if ch == FULL_STOP:
            spans.append(SentenceSpan(Span(start, i + 1), len(spans)))
            start = i + 1
    if start < len(text):
        spans.append(SentenceSpan(Span(start, len(text)), len(spans)))
    return spans


def min_window(passage: AnnotatedPassage, marked_spans: list[Span]) -> Span:
    """Smallest contiguous sentence sequence touching every marked span.

    Runs from the first sentence intersecting any mark to the last sentence
    intersecting any mark.
    """
    if not marked_spans:
        raise ValueError("marked_spans must be non-empty")
    for m in marked_spans:
        if not m.within(len(passage.text)):
            raise ValueError(f"marked span [{m.start}, {m.end}) outside passage bounds")
    sentences = segment_sentences(passage.text)
    hit = [s for s in sentences if any(s.range.overlaps(m) for m in marked_spans)]
    return Span(hit[0].range.start, hit[-1].range.end)


def corpus_stats(corpus: list[AnnotatedPassage]) -> CorpusStats:
    per_kind = {kind.value: 0 for kind in RelationKind}
    for p in corpus:
        for r in p.relations:
            per_kind[r.kind.value] += 1
    return CorpusStats(
        passage_count=len(corpus),
        length_stats=Agg.over([len(p.text) for p in corpus]),
        relations_per_passage=Agg.over([len(p.relations) for p in corpus]),
        per_kind_counts=per_kind,
        zero_relation_passages=sum(1 for p in corpus if not p.relations),
    )
