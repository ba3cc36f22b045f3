"""Negative-instance generation: three perturbation actions plus dataset assembly.

All three actions are pure span surgery over an AnnotatedPassage.  Passages
that cannot support an action raise ActionSkip (a signal, not a failure);
build_dataset tallies skips into a shortfall report.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable

from .corpus import AnnotatedPassage, CausalRelation, RelationKind, Span, min_window

DEFAULT_LENGTH_LIMIT = 200
MAX_SHUFFLE_ATTEMPTS = 64


class ActionSkip(Exception):
    """Passage/relation cannot support the action; carries the reason."""

    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


class ActionKind(str, Enum):
    LOCAL_SWAP = "act1"
    GLOBAL_SHUFFLE = "act2"
    MUTUAL_SWAP = "act3"


class Label(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class PairRef:
    """Cross-reference to the relation exchanged with (mutual swap only)."""

    passage_id: str
    tail: Span


@dataclass(frozen=True)
class PerturbationRecord:
    action: ActionKind
    source_passage_ids: tuple[str, ...]
    slots: tuple[Span, ...]  # original spans, passage coordinates
    order: tuple[int, ...] | None = None  # slot i refilled with slots[order[i]]'s text
    rng_seed: int | None = None
    paired: PairRef | None = None

    def to_dict(self) -> dict:
        return {
            "action": self.action.value,
            "source_passage_ids": list(self.source_passage_ids),
            "slots": [s.as_list() for s in self.slots],
            "order": list(self.order) if self.order is not None else None,
            "rng_seed": self.rng_seed,
            "paired": (
                {"passage_id": self.paired.passage_id, "tail": self.paired.tail.as_list()}
                if self.paired
                else None
            ),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationRecord":
        paired = d.get("paired")
        return cls(
            action=ActionKind(d["action"]),
            source_passage_ids=tuple(d["source_passage_ids"]),
            slots=tuple(Span(*s) for s in d["slots"]),
            order=tuple(d["order"]) if d.get("order") is not None else None,
            rng_seed=d.get("rng_seed"),
            paired=PairRef(paired["passage_id"], Span(*paired["tail"])) if paired else None,
        )


@dataclass(frozen=True)
class ClassificationInstance:
    id: str
    text: str
    label: Label
    action: ActionKind
    source_passage_id: str
    source_window: Span
    record: PerturbationRecord | None = None

    def __post_init__(self) -> None:
        if (self.label is Label.NEGATIVE) != (self.record is not None):
            raise ValueError("negative instances carry a record, positives do not")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "label": self.label.value,
            "action": self.action.value,
            "source_passage_id": self.source_passage_id,
            "source_window": self.source_window.as_list(),
            "record": self.record.to_dict() if self.record else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassificationInstance":
        return cls(
            id=d["id"],
            text=d["text"],
            label=Label(d["label"]),
            action=ActionKind(d["action"]),
            source_passage_id=d["source_passage_id"],
            source_window=Span(*d["source_window"]),
            record=PerturbationRecord.from_dict(d["record"]) if d.get("record") else None,
        )


def replace_spans(text: str, edits: list[tuple[Span, str]]) -> tuple[str, list[Span]]:
    """Apply non-overlapping span replacements; return new text plus the span
    each replacement now occupies (same order as the input edits)."""
    indexed = sorted(range(len(edits)), key=lambda i: edits[i][0].start)
    prev_end = 0
    pieces: list[str] = []
    new_spans: dict[int, Span] = {}
    cursor = 0
    for i in indexed:
        span, replacement = edits[i]
        if span.start < prev_end:
            raise ValueError("replacement spans overlap")
        pieces.append(text[prev_end : span.start])
        cursor += span.start - prev_end
        pieces.append(replacement)
        new_spans[i] = Span(cursor, cursor + len(replacement))
        cursor += len(replacement)
        prev_end = span.end
    pieces.append(text[prev_end:])
    return "".join(pieces), [new_spans[i] for i in range(len(edits))]


def _window_surgery(
    passage: AnnotatedPassage, window: Span, edits: list[tuple[Span, str]]
) -> str:
    """Apply passage-coordinate edits inside a window, return the new window text."""
    local = [(span.shift(-window.start), repl) for span, repl in edits]
    new_text, _ = replace_spans(window.slice(passage.text), local)
    return new_text


def _stable_seed(*parts: object) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def action1_local(
    passage: AnnotatedPassage,
    relation: CausalRelation,
    length_limit: int = DEFAULT_LENGTH_LIMIT,
) -> ClassificationInstance:
    """Exchange head and tail texts inside the minimal sentence window."""
    if len(passage.text) > length_limit:
        raise ActionSkip("passage_over_length_limit")
    head_text = relation.head.slice(passage.text)
    tail_text = relation.tail.slice(passage.text)
    if head_text == tail_text:
        raise ActionSkip("head_equals_tail")
    window = min_window(passage, [relation.head, relation.tail])
    text = _window_surgery(
        passage, window, [(relation.head, tail_text), (relation.tail, head_text)]
    )
    record = PerturbationRecord(
        action=ActionKind.LOCAL_SWAP,
        source_passage_ids=(passage.id,),
        slots=(relation.head, relation.tail),
        order=(1, 0),
    )
    return ClassificationInstance(
        id=f"{passage.id}:a1:{relation.head.start}-{relation.tail.start}",
        text=text,
        label=Label.NEGATIVE,
        action=ActionKind.LOCAL_SWAP,
        source_passage_id=passage.id,
        source_window=window,
        record=record,
    )


def entity_slots(passage: AnnotatedPassage) -> list[Span]:
    """Deduplicated, ordered head/tail spans across all relations.

    Raises ActionSkip when deduplicated slots still overlap: the shuffle is
    ill-defined on such passages.
    """
    slots = sorted({r.head for r in passage.relations} | {r.tail for r in passage.relations})
    for a, b in zip(slots, slots[1:]):
        if a.overlaps(b):
            raise ActionSkip("overlapping_entity_slots")
    return slots


def action2_global(passage: AnnotatedPassage, seed: int) -> ClassificationInstance:
    """Refill all entity slots with a seeded non-identity permutation of their texts."""
    slots = entity_slots(passage)
    if len(slots) < 2:
        raise ActionSkip("fewer_than_two_entities")
    texts = [s.slice(passage.text) for s in slots]
    if len(set(texts)) == 1:
        raise ActionSkip("all_entity_texts_identical")
    rng = random.Random(seed)
    perm: list[int] | None = None
    for _ in range(MAX_SHUFFLE_ATTEMPTS):
        candidate = list(range(len(slots)))
        rng.shuffle(candidate)
        if [texts[i] for i in candidate] != texts:
            perm = candidate
            break
    if perm is None:
        raise ActionSkip("no_non_identity_permutation_found")
    window = min_window(passage, slots)
    text = _window_surgery(
        passage, window, [(slot, texts[perm[i]]) for i, slot in enumerate(slots)]
    )
    record = PerturbationRecord(
        action=ActionKind.GLOBAL_SHUFFLE,
        source_passage_ids=(passage.id,),
        slots=tuple(slots),
        order=tuple(perm),
        rng_seed=seed,
    )
    return ClassificationInstance(
        id=f"{passage.id}:a2",
        text=text,
        label=Label.NEGATIVE,
        action=ActionKind.GLOBAL_SHUFFLE,
        source_passage_id=passage.id,
        source_window=window,
        record=record,
    )


def action3_mutual(
    a: tuple[AnnotatedPassage, CausalRelation],
    b: tuple[AnnotatedPassage, CausalRelation],
) -> tuple[ClassificationInstance, ClassificationInstance]:
    """Exchange the tail texts of two relations from distinct passages."""
    (pa, ra), (pb, rb) = a, b
    if pa.id == pb.id:
        raise ValueError("mutual swap requires two distinct passages")
    tail_a = ra.tail.slice(pa.text)
    tail_b = rb.tail.slice(pb.text)
    if tail_a == tail_b:
        raise ActionSkip("identical_tails")

    def one_side(
        passage: AnnotatedPassage,
        relation: CausalRelation,
        new_tail: str,
        other: tuple[AnnotatedPassage, CausalRelation],
    ) -> ClassificationInstance:
        window = min_window(passage, [relation.head, relation.tail])
        text = _window_surgery(passage, window, [(relation.tail, new_tail)])
        record = PerturbationRecord(
            action=ActionKind.MUTUAL_SWAP,
            source_passage_ids=(passage.id, other[0].id),
            slots=(relation.tail,),
            paired=PairRef(other[0].id, other[1].tail),
        )
        return ClassificationInstance(
            id=f"{passage.id}:a3:{relation.tail.start}",
            text=text,
            label=Label.NEGATIVE,
            action=ActionKind.MUTUAL_SWAP,
            source_passage_id=passage.id,
            source_window=window,
            record=record,
        )

    return one_side(pa, ra, tail_b, (pb, rb)), one_side(pb, rb, tail_a, (pa, ra))


@dataclass(frozen=True)
class DatasetConfig:
    actions: tuple[ActionKind, ...] = (
        ActionKind.LOCAL_SWAP,
        ActionKind.GLOBAL_SHUFFLE,
        ActionKind.MUTUAL_SWAP,
    )
    length_limit: int = DEFAULT_LENGTH_LIMIT
    balance_ratio: float = 1.0  # positives per negative
    policy: frozenset[RelationKind] = frozenset({RelationKind.CAUSATION})
    max_negatives_per_passage: int | None = None  # Action 1 cap
    max_per_action: int | None = None


@dataclass
class ShortfallReport:
    skips: dict[str, dict[str, int]] = field(default_factory=dict)
    positive_shortfall: dict[str, int] = field(default_factory=dict)

    def note_skip(self, action: ActionKind, reason: str) -> None:
        self.skips.setdefault(action.value, {})
        self.skips[action.value][reason] = self.skips[action.value].get(reason, 0) + 1

    @property
    def any_shortfall(self) -> bool:
        return any(v > 0 for v in self.positive_shortfall.values())

    def to_dict(self) -> dict:
        return {"skips": self.skips, "positive_shortfall": self.positive_shortfall}


def _positive_candidates(
    passages: list[AnnotatedPassage], action: ActionKind, config: DatasetConfig
) -> list[tuple[str, Span, str]]:
    """Un-perturbed windows, windowed by the same rule as the action's negatives."""
    seen: set[tuple[str, int, int]] = set()
    out: list[tuple[str, Span, str]] = []
    for p in passages:
        windows: list[Span] = []
        if action is ActionKind.GLOBAL_SHUFFLE:
            try:
                slots = entity_slots(p)
            except ActionSkip:
                continue
            if slots:
                windows.append(min_window(p, slots))
        else:
            if action is ActionKind.LOCAL_SWAP and len(p.text) > config.length_limit:
                continue
            for r in p.relations:
                windows.append(min_window(p, [r.head, r.tail]))
        for w in windows:
            key = (p.id, w.start, w.end)
            if key in seen:
                continue
            seen.add(key)
            out.append((p.id, w, w.slice(p.text)))
    return out


def build_dataset(
    corpus: list[AnnotatedPassage], config: DatasetConfig, seed: int
) -> tuple[list[ClassificationInstance], ShortfallReport]:
    """Emit negatives per action plus ratio-matched positives, fully deterministic.

    The output is ordered by (action, label, sequential id); the same corpus,
    config, and seed always produce byte-identical serialized datasets.
    """
    from .corpus import filter_relations

    passages = sorted(
        (filter_relations(p, config.policy) for p in corpus), key=lambda p: p.id
    )
    report = ShortfallReport()
    dataset: list[ClassificationInstance] = []

    for action in config.actions:
        negatives: list[ClassificationInstance] = []
        if action is ActionKind.LOCAL_SWAP:
            for p in passages:
                emitted = 0
                for r in p.relations:
                    cap = config.max_negatives_per_passage
                    if cap is not None and emitted >= cap:
                        break
                    try:
                        negatives.append(action1_local(p, r, config.length_limit))
                        emitted += 1
                    except ActionSkip as skip:
                        report.note_skip(action, skip.reason)
        elif action is ActionKind.GLOBAL_SHUFFLE:
            for p in passages:
                try:
                    negatives.append(action2_global(p, _stable_seed(seed, "a2", p.id)))
                except ActionSkip as skip:
                    report.note_skip(action, skip.reason)
        else:
            eligible: list[tuple[AnnotatedPassage, CausalRelation]] = []
            for p in passages:
                if p.relations:
                    eligible.append((p, p.relations[0]))
            rng = random.Random(_stable_seed(seed, "a3-pairing"))
            rng.shuffle(eligible)
            for left, right in zip(eligible[0::2], eligible[1::2]):
                try:
                    pair = action3_mutual(left, right)
                    negatives.extend(pair)
                except ActionSkip as skip:
                    report.note_skip(action, skip.reason)

        negatives.sort(key=lambda n: n.id)
        if config.max_per_action is not None:
            negatives = negatives[: config.max_per_action]

        wanted_pos = round(len(negatives) * config.balance_ratio)
        candidates = _positive_candidates(passages, action, config)
        candidates.sort(key=lambda c: (c[0], c[1].start, c[1].end))
        rng = random.Random(_stable_seed(seed, "pos", action.value))
        rng.shuffle(candidates)
        taken = candidates[:wanted_pos]
        if len(taken) < wanted_pos:
            report.positive_shortfall[action.value] = wanted_pos - len(taken)

        for i, neg in enumerate(negatives):
            dataset.append(
                ClassificationInstance(
                    id=f"{action.value}-neg-{i:04d}",
                    text=neg.text,
                    label=Label.NEGATIVE,
                    action=action,
                    source_passage_id=neg.source_passage_id,
                    source_window=neg.source_window,
                    record=neg.record,
                )
            )
        for i, (pid, window, text) in enumerate(taken):
            dataset.append(
                ClassificationInstance(
                    id=f"{action.value}-pos-{i:04d}",
                    text=text,
                    label=Label.POSITIVE,
                    action=action,
                    source_passage_id=pid,
                    source_window=window,
                )
            )
    return dataset, report


def write_dataset(instances: Iterable[ClassificationInstance], stream: IO[str]) -> None:
    for inst in instances:
        stream.write(json.dumps(inst.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_dataset(stream: IO[str] | Iterable[str]) -> list[ClassificationInstance]:
    return [
        ClassificationInstance.from_dict(json.loads(line))
        for line in stream
        if line.strip()
    ]
