"""Run orchestration: ingest -> perturb -> index -> run grid -> review ->
score -> report, all rooted in a run directory named by the config digest.

Every step is resumable; completed grid cells are recorded in the manifest and
skipped on re-run.  Manifest writes are atomic (write-temp-then-rename).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .config import (
    ExperimentConfig,
    make_chat_provider,
    make_embedder_provider,
    make_scorer_provider,
    make_translator_provider,
)
from .corpus import corpus_stats, parse_corpus
from .evaluate import (
    MetricsReport,
    PplReport,
    audit_sample,
    confusion,
    ppl_study,
    render_report,
)
from .layers import (
    KnowledgeBundle,
    LayerDeps,
    PromptStyle,
    ShortcutLayer,
    assemble,
    gather_knowledge,
)
from .modelgw import (
    ChatRequest,
    Gateway,
    ResponseCache,
    VerdictRecord,
    VerdictStore,
    export_review,
    import_review,
    parse_verdict,
)
from .perturb import (
    ClassificationInstance,
    DatasetConfig,
    build_dataset,
    read_dataset,
    write_dataset,
)
from .retrieval import DocIndex, Snippet, read_kg

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_FAILURE = 2


@dataclass
class RunManifest:
    config_digest: str
    tool_version: str = __version__
    dataset_digest: str | None = None
    cells: dict[str, str] = field(default_factory=dict)
    cache_stats: dict = field(default_factory=dict)

    @classmethod
    def load_or_create(cls, path: Path, config_digest: str) -> "RunManifest":
        if path.exists():
            raw = json.loads(path.read_text(encoding="utf-8"))
            return cls(
                config_digest=raw["config_digest"],
                tool_version=raw.get("tool_version", __version__),
                dataset_digest=raw.get("dataset_digest"),
                cells=raw.get("cells", {}),
                cache_stats=raw.get("cache_stats", {}),
            )
        return cls(config_digest=config_digest)

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps(
                {
                    "config_digest": self.config_digest,
                    "tool_version": self.tool_version,
                    "dataset_digest": self.dataset_digest,
                    "cells": self.cells,
                    "cache_stats": self.cache_stats,
                },
                indent=2,
                sort_keys=True,
            ),
            encoding="utf-8",
        )
        tmp.rename(path)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest_path(run_dir: Path) -> Path:
    return run_dir / "manifest.json"


def _parse_corpus_file(config: ExperimentConfig):
    with config.corpus.open(encoding="utf-8") as f:
        return parse_corpus(f)


def cmd_ingest(config: ExperimentConfig) -> int:
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    passages, report = _parse_corpus_file(config)
    if not passages:
        raise ValueError(f"corpus {config.corpus} contains no passages")
    stats = corpus_stats(passages)
    (run_dir / "stats.json").write_text(
        json.dumps(stats.to_dict(), indent=2, sort_keys=True, ensure_ascii=False),
        encoding="utf-8",
    )
    (run_dir / "ingest_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False),
        encoding="utf-8",
    )
    manifest = RunManifest.load_or_create(_manifest_path(run_dir), config.digest())
    manifest.save(_manifest_path(run_dir))
    return EXIT_PARTIAL if report.rejected else EXIT_OK


def cmd_perturb(config: ExperimentConfig) -> int:
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    passages, _ = _parse_corpus_file(config)
    dataset_config = DatasetConfig(
        actions=config.actions,
        length_limit=config.length_limit,
        balance_ratio=config.balance_ratio,
        policy=config.policy,
        max_per_action=config.max_per_action,
    )
    dataset, shortfall = build_dataset(passages, dataset_config, config.seed)
    dataset_path = run_dir / "dataset.jsonl"
    tmp = dataset_path.with_suffix(".tmp")
    with tmp.open("w", encoding="utf-8") as f:
        write_dataset(dataset, f)
    tmp.rename(dataset_path)
    (run_dir / "shortfall.json").write_text(
        json.dumps(shortfall.to_dict(), indent=2, sort_keys=True, ensure_ascii=False),
        encoding="utf-8",
    )
    manifest = RunManifest.load_or_create(_manifest_path(run_dir), config.digest())
    manifest.dataset_digest = _file_digest(dataset_path)
    manifest.save(_manifest_path(run_dir))
    return EXIT_PARTIAL if shortfall.any_shortfall else EXIT_OK


def _load_dataset(run_dir: Path) -> list[ClassificationInstance]:
    path = run_dir / "dataset.jsonl"
    if not path.exists():
        raise FileNotFoundError("dataset.jsonl missing; run the perturb step first")
    with path.open(encoding="utf-8") as f:
        return read_dataset(f)


def cmd_index(config: ExperimentConfig, gateway: Gateway | None = None) -> int:
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    passages, _ = _parse_corpus_file(config)
    gateway = gateway or _make_gateway(config)
    embedder = gateway.embedder(make_embedder_provider(config.embedder))
    index = DocIndex.build(
        {p.id: p.text for p in passages},
        embedder,
        chunk_size=config.chunk_size,
        overlap=config.chunk_overlap,
    )
    index.save(run_dir / "passage_index.json")
    return EXIT_OK


def _make_gateway(config: ExperimentConfig) -> Gateway:
    return Gateway(cache=ResponseCache(config.run_dir() / "cache"))


def _cell_key(action, layer, style, model_name) -> str:
    return f"{action.value}_{layer.value}_{style.value}_{model_name}"


def _knowledge_path(run_dir: Path, action, layer) -> Path:
    return run_dir / "knowledge" / f"{action.value}_{layer.value}.jsonl"


def _load_or_build_knowledge(
    run_dir: Path,
    action,
    layer: ShortcutLayer,
    instances: list[ClassificationInstance],
    deps: LayerDeps,
) -> dict[str, KnowledgeBundle]:
    path = _knowledge_path(run_dir, action, layer)
    if path.exists():
        bundles: dict[str, KnowledgeBundle] = {}
        with path.open(encoding="utf-8") as f:
            for line in f:
                raw = json.loads(line)
                bundles[raw["instance_id"]] = KnowledgeBundle(
                    layer=ShortcutLayer(raw["layer"]),
                    snippets=tuple(
                        Snippet(text=s["text"], source=s["source"]) for s in raw["snippets"]
                    ),
                    transform_log=tuple(raw.get("transform_log", [])),
                )
        if set(bundles) == {i.id for i in instances}:
            return bundles
    bundles = {i.id: gather_knowledge(i, layer, deps) for i in instances}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with tmp.open("w", encoding="utf-8") as f:
        for iid in sorted(bundles):
            row = {"instance_id": iid, **bundles[iid].to_dict()}
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    tmp.rename(path)
    return bundles


def cmd_run(config: ExperimentConfig, max_cells: int | None = None) -> int:
    """Execute the action x layer x style x model grid, cache-first and resumable."""
    run_dir = config.run_dir()
    dataset = _load_dataset(run_dir)
    by_action: dict = {}
    for inst in dataset:
        by_action.setdefault(inst.action, []).append(inst)

    gateway = _make_gateway(config)
    embed_provider = make_embedder_provider(config.embedder)
    translator_provider = make_translator_provider(config.translator)
    index_path = run_dir / "passage_index.json"
    if not index_path.exists():
        cmd_index(config, gateway)
    deps = LayerDeps(
        passage_index=DocIndex.load(index_path),
        kg=(read_kg(config.kg.open(encoding="utf-8")) if config.kg else None),
        embedder=gateway.embedder(embed_provider),
        translator=gateway.translator(translator_provider),
        k=config.k,
        k_disease=config.k_disease,
        k_chunk=config.k_chunk,
    )
    chat_providers = {
        m.name: make_chat_provider(m, config.corpus.parent) for m in config.models
    }

    manifest = RunManifest.load_or_create(_manifest_path(run_dir), config.digest())
    pending_review = False
    failures: list[str] = []
    executed = 0
    for action in config.actions:
        instances = by_action.get(action, [])
        for layer in config.layers:
            for style in config.styles:
                for model in config.models:
                    cell = _cell_key(action, layer, style, model.name)
                    if manifest.cells.get(cell) == "done":
                        continue
                    if max_cells is not None and executed >= max_cells:
                        manifest.cache_stats = gateway.cache.stats() if gateway.cache else {}
                        manifest.save(_manifest_path(run_dir))
                        return EXIT_PARTIAL
                    executed += 1
                    try:
                        bundles = _load_or_build_knowledge(
                            run_dir, action, layer, instances, deps
                        )
                        store = VerdictStore()
                        for inst in instances:
                            prompt = assemble(
                                inst,
                                bundles[inst.id],
                                style,
                                config.language,
                                config.template_version,
                            )
                            response = gateway.chat(
                                chat_providers[model.name],
                                ChatRequest(
                                    model_id=model.name,
                                    history=prompt.history,
                                    question=prompt.final_question,
                                    tag=inst.id,
                                ),
                            )
                            store.add(
                                VerdictRecord(
                                    instance_id=inst.id,
                                    response=response,
                                    verdict=parse_verdict(response, config.language),
                                )
                            )
                        store.save(run_dir / "verdicts" / f"{cell}.jsonl")
                        if store.needs_review():
                            export_review(store, run_dir / "review" / f"{cell}.tsv")
                            pending_review = True
                        manifest.cells[cell] = "done"
                    except Exception as exc:  # noqa: BLE001 - cell isolation
                        failures.append(f"{cell}: {exc}")
                        manifest.cells[cell] = "failed"
                    manifest.cache_stats = gateway.cache.stats() if gateway.cache else {}
                    manifest.save(_manifest_path(run_dir))
    if failures:
        return EXIT_FAILURE
    return EXIT_PARTIAL if pending_review else EXIT_OK


def cmd_review_import(config: ExperimentConfig) -> int:
    """Apply every edited review file back onto its cell's verdict store."""
    run_dir = config.run_dir()
    review_dir = run_dir / "review"
    if not review_dir.exists():
        return EXIT_OK
    for review_path in sorted(review_dir.glob("*.tsv")):
        store_path = run_dir / "verdicts" / (review_path.stem + ".jsonl")
        if not store_path.exists():
            continue
        store = VerdictStore.load(store_path)
        if import_review(store, review_path):
            store.save(store_path)
    return EXIT_OK


def cmd_score(config: ExperimentConfig) -> int:
    run_dir = config.run_dir()
    dataset = _load_dataset(run_dir)
    gateway = _make_gateway(config)
    scorer = make_scorer_provider(config.scorer)
    report = ppl_study(
        dataset,
        lambda text: gateway.score_ppl(scorer, text).ppl,
        scorer_id=scorer.provider_id,
    )
    (run_dir / "ppl.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False),
        encoding="utf-8",
    )
    return EXIT_PARTIAL if report.failures else EXIT_OK


def collect_metrics(config: ExperimentConfig) -> list[MetricsReport]:
    run_dir = config.run_dir()
    dataset = _load_dataset(run_dir)
    labels = {inst.id: inst.label for inst in dataset}
    reports: list[MetricsReport] = []
    for action in config.actions:
        for layer in config.layers:
            for style in config.styles:
                for model in config.models:
                    cell = _cell_key(action, layer, style, model.name)
                    store_path = run_dir / "verdicts" / f"{cell}.jsonl"
                    if not store_path.exists():
                        continue
                    store = VerdictStore.load(store_path)
                    verdicts = {iid: r.verdict for iid, r in store.records.items()}
                    matrix = confusion(verdicts, labels)
                    reports.append(
                        MetricsReport(
                            action=action,
                            layer=layer,
                            style=style,
                            model=model.name,
                            matrix=matrix,
                        )
                    )
    return reports


def cmd_report(config: ExperimentConfig) -> int:
    run_dir = config.run_dir()
    reports = collect_metrics(config)
    ppl = None
    ppl_path = run_dir / "ppl.json"
    if ppl_path.exists():
        ppl = PplReport.from_dict(json.loads(ppl_path.read_text(encoding="utf-8")))
    metrics_path = run_dir / "report"
    render_report(reports, metrics_path, ppl)
    (metrics_path / "metrics.json").write_text(
        json.dumps(
            {"config_digest": config.digest(), "cells": [r.to_dict() for r in reports]},
            indent=2,
            sort_keys=True,
            ensure_ascii=False,
        ),
        encoding="utf-8",
    )
    return EXIT_OK


def cmd_audit(config: ExperimentConfig) -> int:
    run_dir = config.run_dir()
    bundles: list[tuple[str, list[str]]] = []
    knowledge_dir = run_dir / "knowledge"
    if knowledge_dir.exists():
        for path in sorted(knowledge_dir.glob("*.jsonl")):
            with path.open(encoding="utf-8") as f:
                for line in f:
                    raw = json.loads(line)
                    snippets = [s["text"] for s in raw["snippets"]]
                    if snippets:
                        bundles.append((f"{path.stem}:{raw['instance_id']}", snippets))
    audit_sample(bundles, run_dir / "audit_sample.tsv", n=config.audit_n, seed=config.seed)
    return EXIT_OK
