from __future__ import annotations

from typing import Callable

import pytest

from collabchain.gateway import BackendHandle, ChatRequest, ChatResponse, Gateway, count_tokens, script_entry
from collabchain.graph import StageLabel, make_stages


class FunctionBackend:
    """Deterministic programmable backend: ``fn(request) -> text``."""

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self.fn = fn
        self.requests: list[ChatRequest] = []

    def send(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        text = self.fn(request)
        return ChatResponse(text, request.estimated_input_tokens(), count_tokens(text))


class RecordingBackend(FunctionBackend):
    """Function backend that also collects scripted-fixture entries."""

    def __init__(self, fn):
        super().__init__(fn)
        self.entries: dict[str, dict] = {}

    def send(self, request):
        resp = super().send(request)
        self.entries[request.fingerprint] = script_entry(request, resp.text)
        return resp


class FailingBackend:
    def __init__(self, exc: Exception):
        self.exc = exc
        self.calls = 0

    def send(self, request):
        self.calls += 1
        raise self.exc


def handle(fn_or_backend, model: str = "test-model", gateway: Gateway | None = None) -> BackendHandle:
    backend = fn_or_backend if hasattr(fn_or_backend, "send") else FunctionBackend(fn_or_backend)
    return BackendHandle(gateway or Gateway(), backend, model)


def scripted(*texts: str) -> Callable[[ChatRequest], str]:
    """Responder yielding ``texts`` in order, repeating the last one."""
    queue = list(texts)

    def fn(_request):
        return queue.pop(0) if len(queue) > 1 else queue[0]
    return fn


@pytest.fixture
def stages() -> list[StageLabel]:
    return make_stages(["design", "supply", "production", "quality"])


@pytest.fixture
def gateway() -> Gateway:
    return Gateway()


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
