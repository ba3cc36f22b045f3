"""Shortcut-layer knowledge gathering and prompt assembly.

Prompt wording lives in versioned template files shipped with the package
(templates/{language}_{version}.json), never inline, so golden tests can pin
exact bytes and no ad-hoc variation creeps in.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Callable

from .perturb import ClassificationInstance
from .retrieval import DocIndex, Embedder, KgEntry, Snippet, kg_retrieve, retrieve_evidence

# (text, source_lang, target_lang) -> translated text
Translator = Callable[[str, str, str], str]

DEFAULT_PIVOT = "en"
DEFAULT_SOURCE_LANG = "zh"


class LayerConfigError(Exception):
    pass


class ShortcutLayer(str, Enum):
    L1_NONE = "L1"
    L2_SOURCE = "L2"
    L2_5_BACKTRANSLATED = "L2.5"
    L3_KNOWLEDGE_GRAPH = "L3"


class PromptStyle(str, Enum):
    SIMPLE = "simple"
    ADVANCED = "advanced"


@dataclass(frozen=True)
class DialogRound:
    question: str
    answer: str

    def __post_init__(self) -> None:
        if not self.question or not self.answer:
            raise ValueError("dialog rounds must have non-empty question and answer")


@dataclass(frozen=True)
class KnowledgeBundle:
    layer: ShortcutLayer
    snippets: tuple[Snippet, ...]
    transform_log: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.layer is ShortcutLayer.L1_NONE and self.snippets:
            raise ValueError("L1 bundles carry no snippets")

    def to_dict(self) -> dict:
        return {
            "layer": self.layer.value,
            "snippets": [{"text": s.text, "source": s.source} for s in self.snippets],
            "transform_log": list(self.transform_log),
        }


@dataclass(frozen=True)
class PromptBundle:
    history: tuple[DialogRound, ...]
    final_question: str
    instance_id: str
    layer: ShortcutLayer
    style: PromptStyle
    language: str
    template_version: str

    def to_dict(self) -> dict:
        return {
            "history": [{"question": r.question, "answer": r.answer} for r in self.history],
            "final_question": self.final_question,
            "instance_id": self.instance_id,
            "layer": self.layer.value,
            "style": self.style.value,
            "language": self.language,
            "template_version": self.template_version,
        }


@dataclass(frozen=True)
class PromptTemplate:
    version: str
    language: str
    simple_with_knowledge: str
    simple_without_knowledge: str
    advanced_rounds: tuple[DialogRound, ...]
    advanced_knowledge_round: DialogRound
    advanced_final: str


@lru_cache(maxsize=None)
def load_template(language: str = "zh", version: str = "v1") -> PromptTemplate:
    name = f"{language}_{version}.json"
    try:
        raw = json.loads(
            resources.files("causalprobe.templates").joinpath(name).read_text("utf-8")
        )
    except FileNotFoundError as exc:
        raise LayerConfigError(f"no template {name}") from exc
    adv = raw["advanced"]
    return PromptTemplate(
        version=raw["version"],
        language=raw["language"],
        simple_with_knowledge=raw["simple"]["with_knowledge"],
        simple_without_knowledge=raw["simple"]["without_knowledge"],
        advanced_rounds=tuple(DialogRound(r["question"], r["answer"]) for r in adv["rounds"]),
        advanced_knowledge_round=DialogRound(
            adv["knowledge_round"]["question"], adv["knowledge_round"]["answer"]
        ),
        advanced_final=adv["final"],
    )


def back_translate(
    text: str,
    translator: Translator,
    pivot: str = DEFAULT_PIVOT,
    source: str = DEFAULT_SOURCE_LANG,
    cache: dict | None = None,
    log: list[str] | None = None,
) -> str:
    """Round-trip text through the pivot language; both hops are logged.

    The cache key includes the translator identity so switching providers
    never reuses stale round-trips.
    """
    provider_id = getattr(translator, "provider_id", repr(translator))
    key = (text, source, pivot, provider_id)
    if cache is not None and key in cache:
        # The intermediate is cached too, so the log reads the same whether
        # the round-trip was computed or replayed: artifacts stay
        # byte-identical across interrupted and resumed runs.
        pivoted, restored = cache[key]
    else:
        try:
            pivoted = translator(text, source, pivot)
        except Exception as exc:
            raise LayerConfigError(
                f"back-translation hop {source}->{pivot} failed: {exc}"
            ) from exc
        try:
            restored = translator(pivoted, pivot, source)
        except Exception as exc:
            raise LayerConfigError(
                f"back-translation hop {pivot}->{source} failed: {exc}"
            ) from exc
        if cache is not None:
            cache[key] = (pivoted, restored)
    if log is not None:
        log.append(f"bt:{source}->{pivot}:{pivoted}")
        log.append(f"bt:{pivot}->{source}:{restored}")
    return restored


@dataclass
class LayerDeps:
    """Providers and knobs the knowledge layers draw on."""

    passage_index: DocIndex | None = None
    kg: list[KgEntry] | None = None
    embedder: Embedder | None = None
    translator: Translator | None = None
    k: int = 2
    k_disease: int = 1
    k_chunk: int = 2
    pivot: str = DEFAULT_PIVOT
    bt_cache: dict = field(default_factory=dict)


def gather_knowledge(
    instance: ClassificationInstance, layer: ShortcutLayer, deps: LayerDeps
) -> KnowledgeBundle:
    """Fetch the shortcut knowledge for one probe at one layer."""
    if layer is ShortcutLayer.L1_NONE:
        return KnowledgeBundle(layer=layer, snippets=())

    if layer in (ShortcutLayer.L2_SOURCE, ShortcutLayer.L2_5_BACKTRANSLATED):
        if deps.passage_index is None or deps.embedder is None:
            raise LayerConfigError(f"{layer.value} needs a passage index and an embedder")
        snippets = retrieve_evidence(deps.passage_index, instance.text, deps.embedder, deps.k)
        if layer is ShortcutLayer.L2_SOURCE:
            return KnowledgeBundle(layer=layer, snippets=tuple(snippets))
        if deps.translator is None:
            raise LayerConfigError("L2.5 needs a translator")
        log: list[str] = []
        translated = tuple(
            Snippet(
                text=back_translate(
                    s.text, deps.translator, deps.pivot, cache=deps.bt_cache, log=log
                ),
                source=s.source,
            )
            for s in snippets
        )
        return KnowledgeBundle(layer=layer, snippets=translated, transform_log=tuple(log))

    if deps.kg is None or deps.embedder is None:
        raise LayerConfigError("L3 needs a knowledge graph and an embedder")
    snippets = kg_retrieve(
        deps.kg, instance.text, deps.embedder, deps.k_disease, deps.k_chunk
    )
    return KnowledgeBundle(layer=layer, snippets=tuple(snippets))


def _joined_knowledge(knowledge: KnowledgeBundle) -> str:
    return "\n".join(s.text for s in knowledge.snippets)


def assemble_simple(
    instance: ClassificationInstance,
    knowledge: KnowledgeBundle,
    language: str = "zh",
    version: str = "v1",
) -> PromptBundle:
    """Single-question prompt; knowledge (when any) is a preamble before the ask."""
    template = load_template(language, version)
    if knowledge.snippets:
        question = template.simple_with_knowledge.format(
            knowledge=_joined_knowledge(knowledge), probe=instance.text
        )
    else:
        question = template.simple_without_knowledge.format(probe=instance.text)
    return PromptBundle(
        history=(),
        final_question=question,
        instance_id=instance.id,
        layer=knowledge.layer,
        style=PromptStyle.SIMPLE,
        language=template.language,
        template_version=template.version,
    )


def assemble_advanced(
    instance: ClassificationInstance,
    knowledge: KnowledgeBundle,
    language: str = "zh",
    version: str = "v1",
) -> PromptBundle:
    """Multi-round prompt: task announcement, mistake-type warning, task
    reiteration, then a knowledge round (skipped when there is none)."""
    template = load_template(language, version)
    history = list(template.advanced_rounds)
    if knowledge.snippets:
        history.append(
            DialogRound(
                question=template.advanced_knowledge_round.question.format(
                    knowledge=_joined_knowledge(knowledge)
                ),
                answer=template.advanced_knowledge_round.answer,
            )
        )
    return PromptBundle(
        history=tuple(history),
        final_question=template.advanced_final.format(probe=instance.text),
        instance_id=instance.id,
        layer=knowledge.layer,
        style=PromptStyle.ADVANCED,
        language=template.language,
        template_version=template.version,
    )


def assemble(
    instance: ClassificationInstance,
    knowledge: KnowledgeBundle,
    style: PromptStyle,
    language: str = "zh",
    version: str = "v1",
) -> PromptBundle:
    if style is PromptStyle.SIMPLE:
        return assemble_simple(instance, knowledge, language, version)
    return assemble_advanced(instance, knowledge, language, version)
