"""Acceptance gate: one test per release criterion, each with its stated
tolerance and wall-clock budget.  Every test prints a PASS line on success so
the suite output doubles as a checklist."""
from __future__ import annotations

import json
import math
import socket
import time
from fractions import Fraction
from pathlib import Path
from random import Random

import pytest

from causalprobe.config import ExperimentConfig, ModelConfig
from causalprobe.corpus import (
    AnnotatedPassage,
    CausalRelation,
    RelationKind,
    Span,
    segment_sentences,
)
from causalprobe.evaluate import (
    MISSING_CELL,
    ConfusionMatrix,
    audit_sample,
    audit_tally,
    f1,
    mcc,
    ppl_study,
)
from causalprobe.perturb import (
    ActionKind,
    Label,
    action1_local,
    action2_global,
    action3_mutual,
    entity_slots,
    read_dataset,
    replace_spans,
)
from causalprobe.retrieval import Vector, expand_to_sentence, top_k
from causalprobe.runner import (
    EXIT_OK,
    EXIT_PARTIAL,
    cmd_index,
    cmd_ingest,
    cmd_perturb,
    cmd_report,
    cmd_run,
)

from test_layers import FIXTURE, KNOWLEDGE_L1, KNOWLEDGE_L2, bundle_bytes
from test_retrieval import brute_force_top_k, identity_index
from test_runner import tree_bytes, write_script

GOLDEN_DIR = Path(__file__).parent / "goldens"


def report_pass(criterion: int, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: PASS — {detail}")


class Budget:
    def __init__(self, criterion: int, seconds: float):
        self.criterion = criterion
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, *_):
        self.elapsed = time.perf_counter() - self.start
        if exc_type is None:
            assert self.elapsed < self.seconds, (
                f"criterion {self.criterion} exceeded budget: "
                f"{self.elapsed:.2f}s >= {self.seconds}s"
            )
        return False


WORDS = "心肌炎肺栓塞高血压糖尿病胃溃疡脑梗死贫血哮喘肝硬化肾衰竭"


def synthetic_passage(i: int, rng: Random) -> AnnotatedPassage:
    head = "".join(rng.choice(WORDS) for _ in range(rng.randint(2, 4))) + f"{i}"
    tail = "".join(rng.choice(WORDS) for _ in range(rng.randint(1, 3))) + f"{i}"
    text = f"{head}会导致{tail}。"
    return AnnotatedPassage(
        id=f"s{i:04d}",
        text=text,
        relations=(
            CausalRelation(
                Span(0, len(head)),
                Span(len(head) + 3, len(head) + 3 + len(tail)),
                RelationKind.CAUSATION,
            ),
        ),
    )


def reapply_act1(instance) -> str:
    """Second application of the head/tail swap on the perturbed text."""
    window = instance.source_window
    head, tail = (s.shift(-window.start) for s in instance.record.slots)
    # in the perturbed text the head region holds the old tail and vice versa
    new_head = Span(head.start, head.start + len(tail))
    shift = len(new_head) - len(head)
    new_tail = Span(tail.start + shift, tail.start + shift + len(head))
    text, _ = replace_spans(
        instance.text,
        [
            (new_head, new_tail.slice(instance.text)),
            (new_tail, new_head.slice(instance.text)),
        ],
    )
    return text


class TestCriterion1Perturbation:
    def test_actions_on_1000_synthetic_passages(self):
        rng = Random(41)
        passages = [synthetic_passage(i, rng) for i in range(1000)]
        with Budget(1, 10.0):
            for p in passages:
                # Action 1: double application restores the window byte-for-byte
                neg = action1_local(p, p.relations[0])
                assert neg.text != p.text
                assert reapply_act1(neg) == p.text

                # Action 2: entity multiset preserved, assignment changed,
                # non-entity text untouched
                neg2 = action2_global(p, seed=1000 + p.relations[0].head.end)
                slots = entity_slots(p)
                originals = [s.slice(p.text) for s in slots]
                local = [s.shift(-neg2.source_window.start) for s in slots]
                _, new_spans = replace_spans(
                    p.text,
                    [(s, originals[neg2.record.order[i]]) for i, s in enumerate(slots)],
                )
                extracted = [s.slice(neg2.text) for s in new_spans]
                assert sorted(extracted) == sorted(originals)
                assert extracted != originals

                def residue(text, spans):
                    cuts = [0]
                    for s in spans:
                        cuts += [s.start, s.end]
                    cuts.append(len(text))
                    return "".join(
                        text[a:b] for a, b in zip(cuts[::2], cuts[1::2])
                    )

                assert residue(neg2.text, new_spans) == residue(p.text, slots)

            # Action 3 exact exchange on the documented example pair
            pa = AnnotatedPassage(
                "x1",
                "A causes B。",
                (CausalRelation(Span(0, 1), Span(9, 10), RelationKind.CAUSATION),),
            )
            pb = AnnotatedPassage(
                "x2",
                "C causes D。",
                (CausalRelation(Span(0, 1), Span(9, 10), RelationKind.CAUSATION),),
            )
            left, right = action3_mutual((pa, pa.relations[0]), (pb, pb.relations[0]))
            assert (left.text, right.text) == ("A causes D。", "C causes B。")
        report_pass(1, "1000 passages, all three actions verified against oracles")


class TestCriterion2Metrics:
    def test_1000_random_confusion_matrices(self):
        rng = Random(43)
        with Budget(2, 5.0):
            for _ in range(1000):
                m = ConfusionMatrix(
                    tp=rng.randrange(30),
                    fp=rng.randrange(30),
                    fn=rng.randrange(30),
                    tn=rng.randrange(30),
                )
                # F1 against exact precision/recall arithmetic
                if m.tp + m.fp == 0 or m.tp + m.fn == 0:
                    assert f1(m) == 0.0
                else:
                    p = Fraction(m.tp, m.tp + m.fp)
                    r = Fraction(m.tp, m.tp + m.fn)
                    expected = 0.0 if p + r == 0 else float(2 * p * r / (p + r))
                    assert abs(f1(m) - expected) <= 1e-12
                # MCC against Pearson correlation of expanded indicator vectors
                if (m.tp + m.fp) * (m.tp + m.fn) * (m.tn + m.fp) * (m.tn + m.fn) == 0:
                    assert mcc(m) == 0.0
                    continue
                gold, pred = [], []
                for count, g, q in (
                    (m.tp, 1, 1),
                    (m.fp, 0, 1),
                    (m.fn, 1, 0),
                    (m.tn, 0, 0),
                ):
                    gold += [g] * count
                    pred += [q] * count
                n = len(gold)
                mg, mp = sum(gold) / n, sum(pred) / n
                cov = sum((g - mg) * (q - mp) for g, q in zip(gold, pred))
                var = sum((g - mg) ** 2 for g in gold) * sum((q - mp) ** 2 for q in pred)
                assert abs(mcc(m) - cov / math.sqrt(var)) <= 1e-12
        report_pass(2, "1000 matrices, MCC==Pearson and F1==precision/recall at 1e-12")


class TestCriterion3Retrieval:
    def test_top_k_oracle_and_sentence_expansion(self):
        rng = Random(47)
        with Budget(3, 10.0):
            vectors = [[rng.uniform(-1, 1) for _ in range(64)] for _ in range(990)]
            vectors += [list(v) for v in vectors[:10]]  # exact duplicates force ties
            index = identity_index(vectors)
            for qi in range(25):
                query = [rng.uniform(-1, 1) for _ in range(64)]
                for k in (1, 2, 5):
                    hits = top_k(index, Vector.of(query), k)
                    got = [h.chunk.doc_id for h in hits]
                    expected = [f"d{i:04d}" for i in brute_force_top_k(vectors, query, k)]
                    assert got == expected

            for _ in range(1000):
                n_sent = rng.randint(1, 8)
                text = "".join(
                    "".join(rng.choice(WORDS) for _ in range(rng.randint(1, 6))) + "。"
                    for _ in range(n_sent)
                )
                start = rng.randrange(len(text))
                end = rng.randrange(start + 1, len(text) + 1)
                expanded = expand_to_sentence(text, Span(start, end))
                assert expanded.start <= start and end <= expanded.end
                boundaries = {0}
                for s in segment_sentences(text):
                    boundaries.add(s.range.start)
                    boundaries.add(s.range.end)
                assert expanded.start in boundaries and expanded.end in boundaries
        report_pass(3, "top_k matches brute force incl. ties; 1000-case expansion fuzz")


class TestCriterion4PromptGoldens:
    def test_byte_pinned_bundles(self):
        from causalprobe.layers import PromptStyle, assemble

        cases = [
            (PromptStyle.SIMPLE, KNOWLEDGE_L1, "simple_L1_zh"),
            (PromptStyle.SIMPLE, KNOWLEDGE_L2, "simple_L2_zh"),
            (PromptStyle.ADVANCED, KNOWLEDGE_L1, "advanced_L1_zh"),
            (PromptStyle.ADVANCED, KNOWLEDGE_L2, "advanced_L2_zh"),
        ]
        for style, knowledge, name in cases:
            bundle = assemble(FIXTURE, knowledge, style, language="zh")
            golden = (GOLDEN_DIR / f"{name}.json").read_text(encoding="utf-8")
            assert bundle_bytes(bundle) == golden, name
        report_pass(4, "simple/advanced x L1/L2 bundles match byte-pinned goldens")


def grid_corpus(path: Path, n: int = 20) -> None:
    with path.open("w", encoding="utf-8") as f:
        for i in range(n):
            record = {
                "id": f"p{i:02d}",
                "text": f"病因{i:02d}会导致症状{i:02d}。",
                "relations": [{"head": [0, 4], "tail": [7, 11], "kind": "causation"}],
            }
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def grid_kg(path: Path, n: int = 20) -> None:
    with path.open("w", encoding="utf-8") as f:
        for i in range(n):
            row = {
                "disease_name": f"病因{i:02d}",
                "description": f"病因{i:02d}常见的后果是症状{i:02d}。需尽早干预。",
            }
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def grid_config(tmp_path: Path, out_name: str) -> ExperimentConfig:
    corpus = tmp_path / "corpus.jsonl"
    if not corpus.exists():
        grid_corpus(corpus)
        grid_kg(tmp_path / "kg.jsonl")
    return ExperimentConfig(
        corpus=corpus,
        out_dir=tmp_path / out_name,
        seed=23,
        kg=tmp_path / "kg.jsonl",
        models=(
            ModelConfig(
                name="mock", provider="scripted", options={"script": "script.json"}
            ),
        ),
    )


@pytest.fixture
def no_network(monkeypatch):
    def refuse(*args, **kwargs):
        raise AssertionError("network access attempted during mock run")

    monkeypatch.setattr(socket, "socket", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


class TestCriterion5EndToEnd:
    def test_mock_grid_offline_reproducible(self, tmp_path, no_network):
        config = grid_config(tmp_path, "runs_ref")
        with Budget(5, 60.0):
            assert cmd_ingest(config) == EXIT_OK
            assert cmd_perturb(config) == EXIT_OK
            with (config.run_dir() / "dataset.jsonl").open(encoding="utf-8") as f:
                dataset = read_dataset(f)
            assert len(dataset) == 120  # 3 actions x (20 negatives + 20 positives)
            write_script(config)
            assert cmd_index(config) == EXIT_OK
            assert cmd_run(config) == EXIT_OK
            assert cmd_report(config) == EXIT_OK

        # Hand-computed metrics: per action the script flips one negative to
        # "correct" (fp) and blanks one positive (unclear), so every cell is
        # tp=19 fp=1 fn=0 tn=19.
        expected_f1 = float(Fraction(2 * 19, 2 * 19 + 1 + 0))
        expected_mcc = float(
            Fraction(19 * 19 - 1 * 0, 1)
        ) / math.sqrt(float((19 + 1) * (19 + 0) * (19 + 1) * (19 + 0)))
        metrics = json.loads(
            (config.run_dir() / "report" / "metrics.json").read_text(encoding="utf-8")
        )
        assert len(metrics["cells"]) == 24
        for cell in metrics["cells"]:
            assert abs(cell["f1"] - expected_f1) <= 1e-12
            assert abs(cell["mcc"] - expected_mcc) <= 1e-12
            assert cell["matrix"] == {
                "tp": 19, "fp": 1, "fn": 0, "tn": 19, "excluded_unclear": 1
            }

        # Interrupt after 5 cells, resume, compare artifact bytes.
        resumed = grid_config(tmp_path, "runs_resumed")
        cmd_ingest(resumed)
        cmd_perturb(resumed)
        cmd_index(resumed)
        assert cmd_run(resumed, max_cells=5) == EXIT_PARTIAL
        assert cmd_run(resumed) == EXIT_OK
        assert cmd_report(resumed) == EXIT_OK
        assert tree_bytes(resumed.run_dir()) == tree_bytes(config.run_dir())
        report_pass(5, "120-instance mock grid offline, exact metrics, resume identical")


class TestCriterion6ReportShape:
    def test_table_and_chart_structure(self, tmp_path, no_network):
        config = grid_config(tmp_path, "runs")
        cmd_ingest(config)
        cmd_perturb(config)
        write_script(config)
        cmd_index(config)
        assert cmd_run(config) == EXIT_OK
        assert cmd_report(config) == EXIT_OK
        report_dir = config.run_dir() / "report"

        text = (report_dir / "report.txt").read_text(encoding="utf-8")
        for style in ("simple", "advanced"):
            block = text.split(f"== {style} prompts ==")[1]
            rows = [l for l in block.splitlines() if l.startswith("Act ")]
            assert len(rows) >= 12
            rows = rows[:12]
            for a, action in enumerate(("Act 1", "Act 2", "Act 3")):
                for l, layer in enumerate(("L1", "L2", "L2.5", "L3")):
                    assert rows[a * 4 + l].startswith(action)
                    assert f" {layer} " in rows[a * 4 + l] + " "
        header = (report_dir / "report.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header == "action,layer,style,model,f1,mcc,tp,fp,fn,tn,excluded_unclear"
        assert MISSING_CELL not in text  # full grid: no missing cells

        for style in ("simple", "advanced"):
            svg = (report_dir / f"mcc_trend_{style}.svg").read_text(encoding="utf-8")
            for label in ("L1", "L2", "L2.5", "L3", "Act 1", "Act 2", "Act 3", "MCC"):
                assert label in svg, label
        report_pass(6, "3x4 grid tables per style, per-model F1/MCC, MCC trend chart")


class TestCriterion7PplStudy:
    def test_action2_more_separable_than_action1(self):
        from test_evaluate import instance

        instances = []
        ppl = {}
        for i in range(10):
            for action, neg_ppl in ((ActionKind.LOCAL_SWAP, 12.0), (ActionKind.GLOBAL_SHUFFLE, 30.0)):
                pos = instance(f"{action.value}-pos-{i}", f"P{action.value}{i}", action, Label.POSITIVE)
                neg = instance(f"{action.value}-neg-{i}", f"N{action.value}{i}", action, Label.NEGATIVE)
                instances += [pos, neg]
                ppl[pos.text] = 10.0
                ppl[neg.text] = neg_ppl
        report = ppl_study(instances, ppl.__getitem__, scorer_id="scripted")
        assert report.deltas["act1"] == pytest.approx(2.0)
        assert report.deltas["act2"] == pytest.approx(20.0)
        assert report.deltas["act2"] > report.deltas["act1"]
        report_pass(7, "separation deltas rank Action 2 above Action 1")


class TestCriterion8AuditSampler:
    def test_round_trip_and_tally(self, tmp_path):
        bundles = [(f"inst-{i:03d}", [f"snippet {i}"]) for i in range(120)]
        path = tmp_path / "audit.tsv"
        assert audit_sample(bundles, path, n=50, seed=23) == 50

        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 51
        sampled_ids = [l.split("\t")[0] for l in lines[1:]]
        by_id = dict(bundles)
        for line in lines[1:]:
            iid, snippets, entity, causal = line.split("\t")
            assert snippets == by_id[iid][0]  # export is lossless
            assert entity == "" and causal == ""

        filled = [lines[0]]
        for i, line in enumerate(lines[1:]):
            iid, snippets, _, _ = line.split("\t")
            filled.append(f"{iid}\t{snippets}\t{'yes' if i < 43 else 'no'}\t")
        path.write_text("\n".join(filled) + "\n", encoding="utf-8")
        tally = audit_tally(path)
        assert tally.entity_related_yes == 43
        assert tally.total == 50
        report_pass(8, "n=50 sample round-trips losslessly, hand tally reads 43/50")
