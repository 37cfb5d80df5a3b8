import json
import threading

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabchain.gateway import (
    API_KEY_ENV,
    BackendError,
    BackendHandle,
    BackendUnavailable,
    BudgetExceeded,
    ChatRequest,
    Gateway,
    HttpBackend,
    ScriptedBackend,
    ScriptMiss,
    UsageRecord,
    count_tokens,
    fingerprint,
    script_entry,
    usage_report,
    write_script,
)

from conftest import FunctionBackend


def _completion(text="ok", prompt_tokens=None, completion_tokens=None):
    body = {"choices": [{"message": {"role": "assistant", "content": text}}]}
    if prompt_tokens is not None:
        body["usage"] = {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens}
    return body


def http_backend(handler, retry_limit=2, sleeps=None, api_key=None):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpBackend("http://llm.test/v1", retry_limit=retry_limit, client=client,
                       sleep=(sleeps.append if sleeps is not None else (lambda s: None)), api_key=api_key)


class TestScripted:
    def test_fixture_lookup_returns_entry_verbatim(self, tmp_path):
        req = ChatRequest("What limits throughput?", "backbone", system_text="sys")
        entries = [
            {"fingerprint": req.fingerprint, "text": "Cycle time limits it.", "input_tokens": 42, "output_tokens": 7},
            {"fingerprint": "deadbeef", "text": "other", "input_tokens": 1, "output_tokens": 1},
        ]
        path = tmp_path / "script.jsonl"
        path.write_text("".join(json.dumps(e) + "\n" for e in entries))
        resp = ScriptedBackend.from_jsonl(path).send(req)
        assert (resp.text, resp.input_tokens, resp.output_tokens) == ("Cycle time limits it.", 42, 7)

    def test_miss_raises(self):
        with pytest.raises(ScriptMiss):
            ScriptedBackend({}).send(ChatRequest("hello", "m"))

    def test_fingerprint_ignores_temperature(self):
        a = ChatRequest("q", "m", "s", temperature=0.0)
        b = ChatRequest("q", "m", "s", temperature=0.9)
        assert a.fingerprint == b.fingerprint == fingerprint("m", "s", "q")
        assert a.fingerprint != ChatRequest("q", "m2", "s").fingerprint

    def test_write_script_roundtrip(self, tmp_path):
        req = ChatRequest("one two three", "m")
        write_script(tmp_path / "s.jsonl", [script_entry(req, "four five")])
        resp = ScriptedBackend.from_jsonl(tmp_path / "s.jsonl").send(req)
        assert (resp.text, resp.input_tokens, resp.output_tokens) == ("four five", 3, 2)


class TestRequestValidation:
    def test_empty_user_text_fails_before_backend(self):
        backend = FunctionBackend(lambda r: "x")
        h = BackendHandle(Gateway(), backend, "m")
        with pytest.raises(ValueError):
            h.ask("")
        with pytest.raises(ValueError):
            h.ask("   ")
        assert backend.requests == []

    def test_max_output_tokens_positive(self):
        with pytest.raises(ValueError):
            ChatRequest("q", "m", max_output_tokens=0)


class TestHttp:
    def test_connection_failure_retries_then_unavailable(self):
        attempts = []

        def handler(request):
            attempts.append(request)
            raise httpx.ConnectError("refused", request=request)

        sleeps = []
        backend = http_backend(handler, retry_limit=2, sleeps=sleeps)
        with pytest.raises(BackendUnavailable) as exc:
            backend.send(ChatRequest("q", "m"))
        assert len(attempts) == 3
        assert exc.value.attempts == 3
        assert sleeps == [0.5, 1.0]

    def test_429_is_retried(self):
        statuses = iter([429, 503, 200])

        def handler(request):
            code = next(statuses)
            return httpx.Response(code, json=_completion("fine", 11, 2) if code == 200 else {})

        backend = http_backend(handler)
        resp = backend.send(ChatRequest("q", "m"))
        assert resp.text == "fine"
        assert backend.attempts == 3

    def test_client_error_is_not_retried(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(400, json={"error": "bad"})

        with pytest.raises(BackendError) as exc:
            http_backend(handler).send(ChatRequest("q", "m"))
        assert not isinstance(exc.value, BackendUnavailable)
        assert len(calls) == 1

    def test_wire_format_and_auth(self, monkeypatch):
        monkeypatch.setenv(API_KEY_ENV, "sekret")
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json=_completion("answer text", 17, 2))

        resp = http_backend(handler).send(ChatRequest("user words", "gpt-x", system_text="be brief"))
        assert seen["url"] == "http://llm.test/v1/chat/completions"
        assert seen["auth"] == "Bearer sekret"
        assert seen["body"]["model"] == "gpt-x"
        assert seen["body"]["messages"] == [
            {"role": "system", "content": "be brief"},
            {"role": "user", "content": "user words"},
        ]
        assert (resp.input_tokens, resp.output_tokens) == (17, 2)

    def test_missing_usage_falls_back_to_local_rule(self):
        handler = lambda request: httpx.Response(200, json=_completion("three word answer"))
        resp = http_backend(handler).send(ChatRequest("a b c d", "m", system_text="s t"))
        assert (resp.input_tokens, resp.output_tokens) == (6, 3)

    @settings(max_examples=40, deadline=None)
    @given(retry_limit=st.integers(0, 4), failures=st.integers(0, 7))
    def test_attempts_bounded_by_retry_limit(self, retry_limit, failures):
        count = {"n": 0}

        def handler(request):
            count["n"] += 1
            if count["n"] <= failures:
                return httpx.Response(500)
            return httpx.Response(200, json=_completion())

        backend = http_backend(handler, retry_limit=retry_limit)
        try:
            backend.send(ChatRequest("q", "m"))
            assert failures <= retry_limit
        except BackendUnavailable:
            assert failures > retry_limit
        assert backend.attempts <= 1 + retry_limit
        assert backend.attempts == min(failures + 1, retry_limit + 1)


class TestUsage:
    def test_empty_report(self):
        assert usage_report(Gateway()) == UsageRecord(0, 0, 0, 0.0, 0)

    def test_totals_are_additive(self):
        gw = Gateway()
        counts = iter([(10, 20), (5, 5)])

        class Fixed:
            def send(self, request):
                from collabchain.gateway import ChatResponse
                i, o = next(counts)
                return ChatResponse("x", i, o)

        gw.complete(ChatRequest("a", "m"), Fixed())
        gw.complete(ChatRequest("b", "m"), Fixed())
        rec = gw.usage_report()
        assert (rec.total_input_tokens, rec.total_output_tokens, rec.call_count) == (15, 25, 2)

    def test_cost_uses_per_model_rates(self):
        gw = Gateway(rates={"m": (1e-6, 4e-6)})
        req = ChatRequest("q", "m")
        gw.complete(req, ScriptedBackend({req.fingerprint: {"text": "x", "input_tokens": 500, "output_tokens": 540}}))
        assert gw.usage_report().total_cost == pytest.approx(0.0005 + 0.00216, abs=1e-15)
        assert gw.usage_report().total_cost == pytest.approx(0.00266, abs=1e-12)

    def test_unknown_model_costs_nothing(self):
        gw = Gateway(rates={"other": (1.0, 1.0)})
        gw.complete(ChatRequest("q r", "m"), FunctionBackend(lambda r: "x"))
        assert gw.usage_report().total_cost == 0.0

    def test_budget_ceiling(self):
        gw = Gateway(token_ceiling=10)
        backend = FunctionBackend(lambda r: "one two three")
        gw.complete(ChatRequest("a b c d", "m"), backend)  # 4 in + 3 out
        with pytest.raises(BudgetExceeded):
            gw.complete(ChatRequest("a b c d", "m"), backend)
        assert len(backend.requests) == 1

    def test_track_scopes_calls(self):
        gw = Gateway()
        backend = FunctionBackend(lambda r: "x y")
        gw.complete(ChatRequest("outside", "m"), backend)
        with gw.track() as ledger:
            gw.complete(ChatRequest("inside call", "m"), backend)
        assert ledger.usage().call_count == 1
        assert ledger.usage().total_input_tokens == 2
        assert gw.usage_report().call_count == 2


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["alpha", "beta gamma", "delta epsilon zeta"]), min_size=1, max_size=12))
def test_scripted_runs_are_deterministic(texts):
    reqs = {t: ChatRequest(t, "m") for t in set(texts)}
    script = {r.fingerprint: script_entry(r, f"reply to {t}") for t, r in reqs.items()}

    def run():
        gw = Gateway(rates={"m": (1e-6, 2e-6)})
        backend = ScriptedBackend(script)
        out = [gw.complete(ChatRequest(t, "m"), backend) for t in texts]
        return out, gw.usage_report()

    assert run() == run()


def test_concurrent_accounting_matches_independent_ledger():
    gw = Gateway(rates={"a": (1e-6, 3e-6), "b": (2e-6, 1e-6)})
    backend = FunctionBackend(lambda r: "word " * (len(r.user_text) % 7 + 1))
    expected = {"calls": 0, "in": 0, "out": 0, "cost": 0.0}
    lock = threading.Lock()

    def worker(k):
        for i in range(25):
            model = "a" if (i + k) % 2 else "b"
            resp = gw.complete(ChatRequest(f"req {k} {i} " + "x " * i, model), backend)
            rate_in, rate_out = gw.rates[model]
            with lock:
                expected["calls"] += 1
                expected["in"] += resp.input_tokens
                expected["out"] += resp.output_tokens
                expected["cost"] += resp.input_tokens * rate_in + resp.output_tokens * rate_out

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    rec = gw.usage_report()
    assert rec.call_count == expected["calls"] == 200
    assert (rec.total_input_tokens, rec.total_output_tokens) == (expected["in"], expected["out"])
    assert rec.total_cost == pytest.approx(expected["cost"], rel=1e-12)


def test_count_tokens_is_whitespace_split():
    assert count_tokens("  a  b\tc\nd ") == 4
    assert count_tokens("") == 0
