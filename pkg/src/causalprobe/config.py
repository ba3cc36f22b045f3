"""Declarative experiment configuration: one YAML file drives the whole grid.

Credentials are never part of the config; HTTP providers name the environment
variable that holds their key.  The config digest (out_dir excluded) names the
run directory, so every artifact is traceable to the exact settings that
produced it.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import RelationKind
from .layers import PromptStyle, ShortcutLayer
from .modelgw import (
    HashEmbedder,
    HttpChatProvider,
    IdentityTranslator,
    LengthPplScorer,
    MarkerTranslator,
    ScriptedChat,
)
from .perturb import ActionKind


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    name: str
    provider: str  # "scripted" | "http"
    options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: Path
    out_dir: Path
    seed: int
    kg: Path | None = None
    language: str = "zh"
    template_version: str = "v1"
    actions: tuple[ActionKind, ...] = (
        ActionKind.LOCAL_SWAP,
        ActionKind.GLOBAL_SHUFFLE,
        ActionKind.MUTUAL_SWAP,
    )
    layers: tuple[ShortcutLayer, ...] = (
        ShortcutLayer.L1_NONE,
        ShortcutLayer.L2_SOURCE,
        ShortcutLayer.L2_5_BACKTRANSLATED,
        ShortcutLayer.L3_KNOWLEDGE_GRAPH,
    )
    styles: tuple[PromptStyle, ...] = (PromptStyle.SIMPLE, PromptStyle.ADVANCED)
    models: tuple[ModelConfig, ...] = ()
    policy: frozenset[RelationKind] = frozenset({RelationKind.CAUSATION})
    length_limit: int = 200
    balance_ratio: float = 1.0
    max_per_action: int | None = None
    chunk_size: int = 64
    chunk_overlap: int = 16
    k: int = 2
    k_disease: int = 1
    k_chunk: int = 2
    embedder: dict = field(default_factory=lambda: {"provider": "hash", "dim": 64})
    translator: dict = field(default_factory=lambda: {"provider": "identity"})
    scorer: dict = field(default_factory=lambda: {"provider": "length"})
    audit_n: int = 50

    def canonical(self) -> dict:
        """Digest material: everything that shapes artifacts except out_dir."""
        return {
            "corpus": str(self.corpus),
            "kg": str(self.kg) if self.kg else None,
            "seed": self.seed,
            "language": self.language,
            "template_version": self.template_version,
            "actions": [a.value for a in self.actions],
            "layers": [l.value for l in self.layers],
            "styles": [s.value for s in self.styles],
            "models": [
                {"name": m.name, "provider": m.provider, "options": m.options}
                for m in self.models
            ],
            "policy": sorted(k.value for k in self.policy),
            "length_limit": self.length_limit,
            "balance_ratio": self.balance_ratio,
            "max_per_action": self.max_per_action,
            "chunk": [self.chunk_size, self.chunk_overlap],
            "k": [self.k, self.k_disease, self.k_chunk],
            "embedder": self.embedder,
            "translator": self.translator,
            "scorer": self.scorer,
            "audit_n": self.audit_n,
        }

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def run_dir(self) -> Path:
        return self.out_dir / self.digest()[:12]


def load_config(path: Path, overrides: dict | None = None) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        base = Path(path).parent
        corpus = (base / raw["corpus"]).resolve()
        out_dir = (base / raw.get("out_dir", "runs")).resolve()
        seed = int(raw["seed"])
    except KeyError as exc:
        raise ConfigError(f"missing required config key: {exc}") from exc
    if not corpus.exists():
        raise ConfigError(f"corpus path does not exist: {corpus}")
    kg = None
    if raw.get("kg"):
        kg = (base / raw["kg"]).resolve()
        if not kg.exists():
            raise ConfigError(f"kg path does not exist: {kg}")
    chunk = raw.get("chunk", {})
    models = tuple(
        ModelConfig(
            name=m["name"],
            provider=m.get("provider", "http"),
            options={k: v for k, v in m.items() if k not in ("name", "provider")},
        )
        for m in raw.get("models", [])
    )
    try:
        cfg = ExperimentConfig(
            corpus=corpus,
            out_dir=out_dir,
            seed=seed,
            kg=kg,
            language=raw.get("language", "zh"),
            template_version=raw.get("template_version", "v1"),
            actions=tuple(ActionKind(a) for a in raw.get("actions", ["act1", "act2", "act3"])),
            layers=tuple(
                ShortcutLayer(l) for l in raw.get("layers", ["L1", "L2", "L2.5", "L3"])
            ),
            styles=tuple(
                PromptStyle(s) for s in raw.get("styles", ["simple", "advanced"])
            ),
            models=models,
            policy=frozenset(
                RelationKind(k) for k in raw.get("policy", ["causation"])
            ),
            length_limit=int(raw.get("length_limit", 200)),
            balance_ratio=float(raw.get("balance_ratio", 1.0)),
            max_per_action=raw.get("max_per_action"),
            chunk_size=int(chunk.get("size", 64)),
            chunk_overlap=int(chunk.get("overlap", 16)),
            k=int(raw.get("k", 2)),
            k_disease=int(raw.get("k_disease", 1)),
            k_chunk=int(raw.get("k_chunk", 2)),
            embedder=raw.get("embedder", {"provider": "hash", "dim": 64}),
            translator=raw.get("translator", {"provider": "identity"}),
            scorer=raw.get("scorer", {"provider": "length"}),
            audit_n=int(raw.get("audit_n", 50)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if ShortcutLayer.L3_KNOWLEDGE_GRAPH in cfg.layers and cfg.kg is None and cfg.models:
        raise ConfigError("L3 requested but no kg path configured")
    return cfg


# ---------------------------------------------------------------------------
# Provider factories


def make_chat_provider(model: ModelConfig, config_dir: Path):
    if model.provider == "scripted":
        script_path = Path(model.options["script"])
        if not script_path.is_absolute():
            script_path = config_dir / script_path
        script = json.loads(script_path.read_text(encoding="utf-8"))
        return ScriptedChat(script, fallback=model.options.get("fallback", "我不知道"))
    if model.provider == "http":
        return HttpChatProvider(
            base_url=model.options["base_url"],
            model_id=model.options.get("model_id", model.name),
            api_key_env=model.options.get("api_key_env", "CAUSALPROBE_API_KEY"),
        )
    raise ConfigError(f"unknown chat provider: {model.provider}")


def make_embedder_provider(spec: dict):
    if spec.get("provider", "hash") == "hash":
        return HashEmbedder(dim=int(spec.get("dim", 64)))
    raise ConfigError(f"unknown embedder provider: {spec.get('provider')}")


def make_translator_provider(spec: dict):
    kind = spec.get("provider", "identity")
    if kind == "identity":
        return IdentityTranslator()
    if kind == "marker":
        return MarkerTranslator()
    raise ConfigError(f"unknown translator provider: {kind}")


def make_scorer_provider(spec: dict):
    if spec.get("provider", "length") == "length":
        return LengthPplScorer()
    raise ConfigError(f"unknown scorer provider: {spec.get('provider')}")
