"""Metrics (F1, MCC), the perplexity separation study, the knowledge-relevance
audit sampler, and report/chart rendering.

Positive class is "causality correct".  Unclear verdicts never enter a
confusion matrix; they are counted separately and excluded from both metrics.
"""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Callable, Iterable, Sequence

from .layers import PromptStyle, ShortcutLayer
from .perturb import ActionKind, ClassificationInstance, Label
from .modelgw import Verdict, VerdictKind

LAYER_ORDER = [
    ShortcutLayer.L1_NONE,
    ShortcutLayer.L2_SOURCE,
    ShortcutLayer.L2_5_BACKTRANSLATED,
    ShortcutLayer.L3_KNOWLEDGE_GRAPH,
]
ACTION_ORDER = [ActionKind.LOCAL_SWAP, ActionKind.GLOBAL_SHUFFLE, ActionKind.MUTUAL_SWAP]
ACTION_TITLES = {
    ActionKind.LOCAL_SWAP: "Act 1",
    ActionKind.GLOBAL_SHUFFLE: "Act 2",
    ActionKind.MUTUAL_SWAP: "Act 3",
}
MISSING_CELL = "—"


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    excluded_unclear: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn, self.excluded_unclear) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "excluded_unclear": self.excluded_unclear,
        }


def confusion(
    verdicts: dict[str, Verdict], labels: dict[str, Label]
) -> ConfusionMatrix:
    """Tally verdicts against gold labels; Unclear only bumps excluded_unclear."""
    orphans = sorted(set(verdicts) - set(labels))
    if orphans:
        raise EvalError(f"verdicts without labels: {orphans}")
    tp = fp = fn = tn = unclear = 0
    for iid, verdict in verdicts.items():
        gold_positive = labels[iid] is Label.POSITIVE
        if verdict.kind is VerdictKind.UNCLEAR:
            unclear += 1
        elif verdict.kind is VerdictKind.CAUSALITY_CORRECT:
            tp += gold_positive
            fp += not gold_positive
        else:
            fn += gold_positive
            tn += not gold_positive
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn, excluded_unclear=unclear)


def f1(matrix: ConfusionMatrix) -> float:
    """Harmonic mean of precision and recall; 0 when either is undefined."""
    if matrix.tp + matrix.fp == 0 or matrix.tp + matrix.fn == 0:
        return 0.0
    precision = matrix.tp / (matrix.tp + matrix.fp)
    recall = matrix.tp / (matrix.tp + matrix.fn)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def mcc(matrix: ConfusionMatrix) -> float:
    """Matthews correlation; 0 whenever a denominator factor vanishes."""
    tp, fp, fn, tn = matrix.tp, matrix.fp, matrix.fn, matrix.tn
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


@dataclass(frozen=True)
class MetricsReport:
    action: ActionKind
    layer: ShortcutLayer
    style: PromptStyle
    model: str
    matrix: ConfusionMatrix

    @property
    def f1(self) -> float:
        return f1(self.matrix)

    @property
    def mcc(self) -> float:
        return mcc(self.matrix)

    def to_dict(self) -> dict:
        return {
            "action": self.action.value,
            "layer": self.layer.value,
            "style": self.style.value,
            "model": self.model,
            "f1": self.f1,
            "mcc": self.mcc,
            "matrix": self.matrix.to_dict(),
        }


# ---------------------------------------------------------------------------
# Perplexity separation study


@dataclass(frozen=True)
class PplCell:
    mean: float
    median: float
    count: int


@dataclass
class PplReport:
    scorer_id: str
    aggregation: str
    cells: dict[tuple[str, str], PplCell] = field(default_factory=dict)
    deltas: dict[str, float] = field(default_factory=dict)
    empty_actions: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scorer_id": self.scorer_id,
            "aggregation": self.aggregation,
            "cells": {
                f"{a}|{l}": {"mean": c.mean, "median": c.median, "count": c.count}
                for (a, l), c in sorted(self.cells.items())
            },
            "deltas": dict(sorted(self.deltas.items())),
            "empty_actions": self.empty_actions,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PplReport":
        report = cls(scorer_id=raw["scorer_id"], aggregation=raw["aggregation"])
        for key, cell in raw.get("cells", {}).items():
            action, label = key.split("|")
            report.cells[(action, label)] = PplCell(
                mean=cell["mean"], median=cell["median"], count=cell["count"]
            )
        report.deltas = dict(raw.get("deltas", {}))
        report.empty_actions = list(raw.get("empty_actions", []))
        report.failures = list(raw.get("failures", []))
        return report


def ppl_study(
    instances: Sequence[ClassificationInstance],
    score: Callable[[str], float],
    scorer_id: str = "unknown",
) -> PplReport:
    """Score every instance, aggregate per (action, label), compute per-action
    separation delta = mean(negative) - mean(positive).

    A larger delta means the action is easier to detect from surface statistics
    alone.  Scorer failures produce a partial report, never an exception.
    """
    report = PplReport(scorer_id=scorer_id, aggregation="arithmetic-mean")
    buckets: dict[tuple[str, str], list[float]] = {}
    for inst in instances:
        try:
            value = float(score(inst.text))
        except Exception as exc:  # noqa: BLE001 - provider errors become entries
            report.failures.append(f"{inst.id}: {exc}")
            continue
        buckets.setdefault((inst.action.value, inst.label.value), []).append(value)
    for key, values in buckets.items():
        report.cells[key] = PplCell(
            mean=sum(values) / len(values),
            median=statistics.median(values),
            count=len(values),
        )
    for action in ACTION_ORDER:
        pos = report.cells.get((action.value, Label.POSITIVE.value))
        neg = report.cells.get((action.value, Label.NEGATIVE.value))
        if pos is None and neg is None:
            report.empty_actions.append(action.value)
        elif pos is not None and neg is not None:
            report.deltas[action.value] = neg.mean - pos.mean
    return report


# ---------------------------------------------------------------------------
# Knowledge-relevance audit sampler

AUDIT_HEADER = ["instance_id", "snippets", "entity_related", "causally_helpful"]
DEFAULT_AUDIT_N = 50


@dataclass(frozen=True)
class AuditTally:
    entity_related_yes: int
    causally_helpful_yes: int
    total: int


def audit_sample(
    bundles: Sequence[tuple[str, Sequence[str]]],
    path: Path,
    n: int = DEFAULT_AUDIT_N,
    seed: int = 0,
) -> int:
    """Export a seeded uniform sample of (instance, snippets) pairs with blank
    judgment columns; returns the number of rows written."""
    populated = [(iid, snips) for iid, snips in bundles if snips]
    if not populated:
        raise EvalError("no knowledge bundles with snippets to audit")
    rng = Random(seed)
    if n >= len(populated):
        sample = list(populated)
    else:
        sample = rng.sample(populated, n)
    sample.sort(key=lambda b: b[0])
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        f.write("\t".join(AUDIT_HEADER) + "\n")
        for iid, snips in sample:
            joined = " / ".join(s.replace("\t", " ").replace("\n", " ") for s in snips)
            f.write(f"{iid}\t{joined}\t\t\n")
    return len(sample)


_YES_MARKS = {"yes", "y", "1", "true", "是"}


def audit_tally(path: Path) -> AuditTally:
    with path.open(encoding="utf-8") as f:
        rows = [ln.rstrip("\n").split("\t") for ln in f if ln.strip()][1:]
    entity = sum(1 for r in rows if len(r) > 2 and r[2].strip().lower() in _YES_MARKS)
    causal = sum(1 for r in rows if len(r) > 3 and r[3].strip().lower() in _YES_MARKS)
    return AuditTally(entity_related_yes=entity, causally_helpful_yes=causal, total=len(rows))


# ---------------------------------------------------------------------------
# Report rendering


def _fmt(value: float | None) -> str:
    return MISSING_CELL if value is None else f"{value:.4f}"


def _cell_map(reports: Iterable[MetricsReport]):
    return {(r.action, r.layer, r.style, r.model): r for r in reports}


def render_table_text(reports: list[MetricsReport]) -> str:
    """Human-readable grid: Act rows x layer sub-rows, F1/MCC per model, one
    block per prompt style.  Missing cells render as an em dash, never 0."""
    cells = _cell_map(reports)
    models = sorted({r.model for r in reports})
    styles = sorted({r.style for r in reports}, key=lambda s: s.value)
    lines: list[str] = []
    for style in styles:
        lines.append(f"== {style.value} prompts ==")
        header = ["Action", "Layer"]
        for m in models:
            header += [f"{m} F1", f"{m} MCC"]
        widths = [max(10, len(h)) for h in header]
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        for action in ACTION_ORDER:
            for layer in LAYER_ORDER:
                row = [ACTION_TITLES[action], layer.value]
                for m in models:
                    r = cells.get((action, layer, style, m))
                    row += [_fmt(r.f1 if r else None), _fmt(r.mcc if r else None)]
                lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
        lines.append("")
    return "\n".join(lines)


def render_table_csv(reports: list[MetricsReport]) -> str:
    cells = _cell_map(reports)
    models = sorted({r.model for r in reports})
    styles = sorted({r.style for r in reports}, key=lambda s: s.value)
    lines = ["action,layer,style,model,f1,mcc,tp,fp,fn,tn,excluded_unclear"]
    for style in styles:
        for action in ACTION_ORDER:
            for layer in LAYER_ORDER:
                for m in models:
                    r = cells.get((action, layer, style, m))
                    if r is None:
                        lines.append(
                            f"{ACTION_TITLES[action]},{layer.value},{style.value},{m},"
                            f"{MISSING_CELL},{MISSING_CELL},,,,,"
                        )
                    else:
                        x = r.matrix
                        lines.append(
                            f"{ACTION_TITLES[action]},{layer.value},{style.value},{m},"
                            f"{r.f1!r},{r.mcc!r},{x.tp},{x.fp},{x.fn},{x.tn},{x.excluded_unclear}"
                        )
    return "\n".join(lines) + "\n"


def _matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # Fix the hash salt so rendered SVG ids (and therefore bytes) are stable.
    matplotlib.rcParams["svg.hashsalt"] = "causalprobe"
    return plt


def render_mcc_chart(reports: list[MetricsReport], path: Path, style: PromptStyle) -> None:
    """MCC per action across layers, one line per (action, model)."""
    plt = _matplotlib()
    cells = _cell_map(reports)
    models = sorted({r.model for r in reports})
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(LAYER_ORDER))
    for model in models:
        for action in ACTION_ORDER:
            ys = [
                cells[(action, layer, style, model)].mcc
                if (action, layer, style, model) in cells
                else None
                for layer in LAYER_ORDER
            ]
            pts = [(x, y) for x, y in zip(xs, ys) if y is not None]
            if pts:
                ax.plot(
                    [p[0] for p in pts],
                    [p[1] for p in pts],
                    marker="o",
                    label=f"{model} {ACTION_TITLES[action]}",
                )
    ax.set_xticks(list(xs))
    ax.set_xticklabels([l.value for l in LAYER_ORDER])
    ax.set_xlabel("knowledge layer")
    ax.set_ylabel("MCC")
    ax.set_title(f"MCC trend across layers ({style.value} prompts)")
    # "best" placement is quadratic in line count across the whole grid; pin it
    ax.legend(fontsize=7, loc="upper left", bbox_to_anchor=(1.02, 1.0))
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_ppl_chart(report: PplReport, path: Path) -> None:
    """Grouped bars: mean perplexity of positives vs negatives per action."""
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(6, 4))
    actions = [a for a in ACTION_ORDER if a.value not in report.empty_actions]
    width = 0.35
    xs = range(len(actions))
    pos_means = [
        report.cells.get((a.value, Label.POSITIVE.value), PplCell(0, 0, 0)).mean for a in actions
    ]
    neg_means = [
        report.cells.get((a.value, Label.NEGATIVE.value), PplCell(0, 0, 0)).mean for a in actions
    ]
    ax.bar([x - width / 2 for x in xs], pos_means, width, label="positive")
    ax.bar([x + width / 2 for x in xs], neg_means, width, label="negative")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([ACTION_TITLES[a] for a in actions])
    ax.set_ylabel(f"mean perplexity ({report.scorer_id})")
    ax.set_title("Perplexity of positive vs negative instances")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_report(
    reports: list[MetricsReport],
    out_dir: Path,
    ppl: PplReport | None = None,
) -> list[Path]:
    """Emit the tabular report, the delimited file, and the charts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    text_path = out_dir / "report.txt"
    text_path.write_text(render_table_text(reports), encoding="utf-8")
    written.append(text_path)
    csv_path = out_dir / "report.csv"
    csv_path.write_text(render_table_csv(reports), encoding="utf-8")
    written.append(csv_path)
    for style in sorted({r.style for r in reports}, key=lambda s: s.value):
        chart = out_dir / f"mcc_trend_{style.value}.svg"
        render_mcc_chart(reports, chart, style)
        written.append(chart)
    if ppl is not None:
        ppl_json = out_dir / "ppl.json"
        ppl_json.write_text(
            json.dumps(ppl.to_dict(), ensure_ascii=False, indent=2, sort_keys=True),
            encoding="utf-8",
        )
        written.append(ppl_json)
        chart = out_dir / "ppl_bars.svg"
        render_ppl_chart(ppl, chart)
        written.append(chart)
    return written
