from __future__ import annotations

import json

import httpx
import pytest

from causalprobe.layers import DialogRound
from causalprobe.modelgw import (
    ChatRequest,
    Gateway,
    GatewayError,
    HashEmbedder,
    HttpChatProvider,
    IdentityTranslator,
    LengthPplScorer,
    MarkerTranslator,
    ResponseCache,
    RetryPolicy,
    ScriptedChat,
    ScriptedPplScorer,
    TransportError,
    Verdict,
    VerdictKind,
    VerdictRecord,
    VerdictStore,
    export_review,
    import_review,
    parse_verdict,
)


def request(question="语句正确吗", tag=None):
    return ChatRequest(model_id="m", history=(), question=question, tag=tag)


class TestChat:
    def test_scripted_mock_contract(self):
        provider = ScriptedChat({"i1": "正确"})
        gateway = Gateway()
        assert gateway.chat(provider, request(tag="i1")) == "正确"
        assert gateway.chat(provider, request(tag="unknown")) == "我不知道"

    def test_cache_suppresses_second_call(self, tmp_path):
        provider = ScriptedChat({"i1": "正确"})
        gateway = Gateway(cache=ResponseCache(tmp_path))
        first = gateway.chat(provider, request(tag="i1"))
        count = provider.call_count
        second = gateway.chat(provider, request(tag="i1"))
        assert provider.call_count == count
        assert first == second

    def test_temperature_defaults_to_zero(self):
        assert request().temperature == 0.0

    def test_different_requests_different_cache_keys(self, tmp_path):
        provider = ScriptedChat({"i1": "正确", "i2": "错误"})
        gateway = Gateway(cache=ResponseCache(tmp_path))
        assert gateway.chat(provider, request(tag="i1")) == "正确"
        assert gateway.chat(provider, request(tag="i2")) == "错误"

    def test_retries_then_transport_error(self):
        class Flaky:
            provider_id = "mock:flaky"
            calls = 0

            def chat(self, req):
                self.calls += 1
                raise RuntimeError("boom")

        provider = Flaky()
        gateway = Gateway(policy=RetryPolicy(max_attempts=3, backoff_base=0.0))
        with pytest.raises(TransportError):
            gateway.chat(provider, request())
        assert provider.calls == 3


class TestHttpChat:
    def test_wire_format(self, monkeypatch):
        monkeypatch.setenv("TEST_KEY", "secret-token")
        seen = {}

        def handler(req: httpx.Request) -> httpx.Response:
            seen["auth"] = req.headers["Authorization"]
            seen["payload"] = json.loads(req.content)
            return httpx.Response(
                200, json={"choices": [{"message": {"content": "正确"}}]}
            )

        provider = HttpChatProvider(
            "https://api.example.com/v1",
            "model-x",
            api_key_env="TEST_KEY",
            transport=httpx.MockTransport(handler),
        )
        req = ChatRequest(
            model_id="model-x",
            history=(DialogRound("你好", "好的"),),
            question="语句正确吗",
        )
        assert provider.chat(req) == "正确"
        assert seen["auth"] == "Bearer secret-token"
        assert seen["payload"]["messages"] == [
            {"role": "user", "content": "你好"},
            {"role": "assistant", "content": "好的"},
            {"role": "user", "content": "语句正确吗"},
        ]
        assert seen["payload"]["temperature"] == 0.0

    def test_missing_credential(self, monkeypatch):
        monkeypatch.delenv("MISSING_KEY", raising=False)
        provider = HttpChatProvider("https://x", "m", api_key_env="MISSING_KEY")
        with pytest.raises(GatewayError):
            provider.chat(request())


class TestEmbed:
    def test_identical_texts_identical_vectors(self):
        gateway = Gateway()
        provider = HashEmbedder(dim=16)
        a, b = gateway.embed(provider, ["甲导致乙", "甲导致乙"])
        assert a == b

    def test_order_preserved(self):
        gateway = Gateway()
        provider = HashEmbedder(dim=16)
        vectors = gateway.embed(provider, ["a", "bb", "a"])
        assert len(vectors) == 3
        assert vectors[0] == vectors[2]
        assert vectors[0] != vectors[1]

    def test_full_cache_hit_on_repeat_batch(self, tmp_path):
        cache = ResponseCache(tmp_path)
        gateway = Gateway(cache=cache)
        provider = HashEmbedder(dim=16)
        texts = ["甲", "乙", "丙"]
        first = gateway.embed(provider, texts)
        count = provider.call_count
        second = gateway.embed(provider, texts)
        assert provider.call_count == count
        assert first == second

    def test_empty_batch_rejected(self):
        with pytest.raises(GatewayError):
            Gateway().embed(HashEmbedder(8), [])


class TestTranslate:
    def test_identity_and_marker(self, tmp_path):
        gateway = Gateway(cache=ResponseCache(tmp_path))
        assert gateway.translate(IdentityTranslator(), "X", "zh", "en") == "X"
        assert gateway.translate(MarkerTranslator(), "X", "zh", "en") == "«en»X"

    def test_cache_probe(self, tmp_path):
        gateway = Gateway(cache=ResponseCache(tmp_path))
        provider = IdentityTranslator()
        gateway.translate(provider, "X", "zh", "en")
        count = provider.call_count
        gateway.translate(provider, "X", "zh", "en")
        assert provider.call_count == count

    def test_unsupported_pair(self):
        class OnlyZhEn:
            provider_id = "mock:zh-en"
            language_pairs = {("zh", "en")}

            def translate(self, text, s, t):
                return text

        with pytest.raises(GatewayError):
            Gateway().translate(OnlyZhEn(), "X", "en", "fr")


class TestScorePpl:
    def test_length_mock(self):
        scored = Gateway().score_ppl(LengthPplScorer(), "abcd")
        assert scored.ppl == 4.0

    def test_strictly_positive_enforced(self):
        bad = ScriptedPplScorer(lambda text: 0.0)
        with pytest.raises(ValueError):
            Gateway().score_ppl(bad, "x")

    def test_cache_probe(self, tmp_path):
        gateway = Gateway(cache=ResponseCache(tmp_path))
        provider = LengthPplScorer()
        gateway.score_ppl(provider, "甲乙丙")
        count = provider.call_count
        assert gateway.score_ppl(provider, "甲乙丙").ppl == 3.0
        assert provider.call_count == count


class TestParseVerdict:
    @pytest.mark.parametrize(
        "response,kind",
        [
            ("否，该句因果倒置", VerdictKind.CAUSALITY_INCORRECT),
            ("错误。原因是...", VerdictKind.CAUSALITY_INCORRECT),
            ("不正确，因果颠倒了", VerdictKind.CAUSALITY_INCORRECT),
            ("正确。", VerdictKind.CAUSALITY_CORRECT),
            ("是，这个语句逻辑正确", VerdictKind.CAUSALITY_CORRECT),
            ("Yes, the statement is right.", VerdictKind.CAUSALITY_CORRECT),
            ("No. The causality is reversed.", VerdictKind.CAUSALITY_INCORRECT),
            ("Incorrect, cause and effect are swapped", VerdictKind.CAUSALITY_INCORRECT),
            ("我不知道", VerdictKind.UNCLEAR),
            ("I don't know", VerdictKind.UNCLEAR),
        ],
    )
    def test_pattern_table(self, response, kind):
        verdict = parse_verdict(response)
        assert verdict.kind is kind
        assert not verdict.needs_review

    def test_no_match_needs_review(self):
        verdict = parse_verdict("这个问题很有趣")
        assert verdict.kind is VerdictKind.UNCLEAR
        assert verdict.needs_review
        assert verdict.matched_pattern is None

    def test_leading_clause_wins(self):
        # body mentions 正确 but the leading clause is a negation
        verdict = parse_verdict("否，虽然表述正确但因果关系不成立")
        assert verdict.kind is VerdictKind.CAUSALITY_INCORRECT

    def test_total_on_junk(self):
        for junk in ("", "   ", "。。。", "\n\n"):
            assert parse_verdict(junk).kind is VerdictKind.UNCLEAR


def store_with(*records):
    store = VerdictStore()
    for iid, response in records:
        store.add(
            VerdictRecord(instance_id=iid, response=response, verdict=parse_verdict(response))
        )
    return store


class TestReviewRoundtrip:
    def test_no_edit_round_trip_is_identity(self, tmp_path):
        store = store_with(("i1", "正确"), ("i2", "这很难说"))
        before = {k: v for k, v in store.records.items()}
        review = tmp_path / "review.tsv"
        assert export_review(store, review) == 1
        assert import_review(store, review) == 0
        assert store.records == before

    def test_single_edit_changes_one_verdict(self, tmp_path):
        store = store_with(("i1", "正确"), ("i2", "这很难说"), ("i3", "也许吧"))
        review = tmp_path / "review.tsv"
        export_review(store, review)
        lines = review.read_text(encoding="utf-8").splitlines()
        edited = []
        for line in lines:
            if line.startswith("i2\t"):
                line = line.rstrip("\t") + "\tincorrect"
            edited.append(line)
        review.write_text("\n".join(edited) + "\n", encoding="utf-8")
        assert import_review(store, review) == 1
        assert store.records["i2"].verdict.kind is VerdictKind.CAUSALITY_INCORRECT
        assert not store.records["i2"].verdict.needs_review
        assert store.records["i3"].verdict.needs_review

    def test_unknown_id_rejected(self, tmp_path):
        store = store_with(("i1", "不好说"))
        review = tmp_path / "review.tsv"
        export_review(store, review)
        review.write_text(
            review.read_text(encoding="utf-8") + "ghost\tx\tunclear\tcorrect\n",
            encoding="utf-8",
        )
        with pytest.raises(GatewayError) as err:
            import_review(store, review)
        assert "ghost" in str(err.value)

    def test_store_save_load_round_trip(self, tmp_path):
        store = store_with(("i1", "正确"), ("i2", "说不清楚"))
        path = tmp_path / "verdicts.jsonl"
        store.save(path)
        loaded = VerdictStore.load(path)
        assert loaded.records == store.records
