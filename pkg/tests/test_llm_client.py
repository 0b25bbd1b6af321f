import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from reflectrl.llm_client import (
    AuthError,
    ChatMessage,
    EndpointConfig,
    LlmClient,
    ProtocolError,
    RemoteGenerator,
    SamplingOptions,
    TransportError,
    chat,
    chat_many,
)


class StubHandler(BaseHTTPRequestHandler):
    """Scriptable chat-completions endpoint with concurrency accounting."""

    script: list = []
    lock = threading.Lock()
    in_flight = 0
    peak_in_flight = 0
    requests_seen: list = []
    delay = 0.0

    def log_message(self, *args):
        pass

    def do_POST(self):
        cls = type(self)
        with cls.lock:
            cls.in_flight += 1
            cls.peak_in_flight = max(cls.peak_in_flight, cls.in_flight)
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
            with cls.lock:
                cls.requests_seen.append({"path": self.path, "body": body, "time": time.monotonic()})
                action = cls.script.pop(0) if cls.script else ("echo", None)
            if cls.delay:
                time.sleep(cls.delay)
            kind, payload = action
            if kind == "status":
                self.send_response(payload)
                self.end_headers()
            elif kind == "body":
                self.send_response(200)
                self.end_headers()
                self.wfile.write(payload.encode())
            else:
                content = body["messages"][-1]["content"]
                reply = json.dumps({"choices": [{"message": {"content": content}}]})
                self.send_response(200)
                self.end_headers()
                self.wfile.write(reply.encode())
        finally:
            with cls.lock:
                cls.in_flight -= 1


@pytest.fixture()
def stub():
    StubHandler.script = []
    StubHandler.requests_seen = []
    StubHandler.peak_in_flight = 0
    StubHandler.in_flight = 0
    StubHandler.delay = 0.0
    server = ThreadingHTTPServer(("127.0.0.1", 0), StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()
    thread.join(timeout=2)


def make_cfg(base, **kw):
    defaults = dict(base_url=base, model="stub-model", max_retries=2, backoff_base=0.05, timeout=5.0)
    defaults.update(kw)
    return EndpointConfig(**defaults)


MESSAGES = [ChatMessage("system", "be brief"), ChatMessage("user", "ok")]


class TestChat:
    def test_echo(self, stub):
        assert chat(make_cfg(stub), MESSAGES) == "ok"

    def test_wire_format(self, stub):
        chat(make_cfg(stub), MESSAGES, SamplingOptions(temperature=0.5, max_tokens=77))
        req = StubHandler.requests_seen[-1]
        assert req["path"].endswith("/chat/completions")
        assert req["body"]["model"] == "stub-model"
        assert req["body"]["messages"] == [
            {"role": "system", "content": "be brief"},
            {"role": "user", "content": "ok"},
        ]
        assert req["body"]["temperature"] == 0.5
        assert req["body"]["max_tokens"] == 77

    def test_retry_on_429_with_backoff(self, stub):
        StubHandler.script = [("status", 429), ("status", 429), ("echo", None)]
        cfg = make_cfg(stub)
        start = time.monotonic()
        assert chat(cfg, MESSAGES) == "ok"
        elapsed = time.monotonic() - start
        assert len(StubHandler.requests_seen) == 3
        assert elapsed >= cfg.backoff_base * (1 + 2)  # 2 retries with doubling delay

    def test_retry_on_500(self, stub):
        StubHandler.script = [("status", 503), ("echo", None)]
        assert chat(make_cfg(stub), MESSAGES) == "ok"

    def test_exhausted_retries(self, stub):
        StubHandler.script = [("status", 500)] * 3
        with pytest.raises(TransportError):
            chat(make_cfg(stub), MESSAGES)

    def test_auth_error_not_retried(self, stub):
        StubHandler.script = [("status", 401)]
        with pytest.raises(AuthError):
            chat(make_cfg(stub), MESSAGES)
        assert len(StubHandler.requests_seen) == 1

    def test_other_4xx_not_retried(self, stub):
        StubHandler.script = [("status", 404)]
        with pytest.raises(ProtocolError):
            chat(make_cfg(stub), MESSAGES)
        assert len(StubHandler.requests_seen) == 1

    def test_malformed_body(self, stub):
        StubHandler.script = [("body", '{"not": "choices"}')]
        with pytest.raises(ProtocolError):
            chat(make_cfg(stub), MESSAGES)

    def test_invalid_json_body(self, stub):
        StubHandler.script = [("body", "garbage{{{")]
        with pytest.raises(ProtocolError):
            chat(make_cfg(stub), MESSAGES)

    def test_empty_messages_rejected(self, stub):
        with pytest.raises(ValueError):
            chat(make_cfg(stub), [])

    def test_bearer_token_from_env(self, stub, monkeypatch):
        monkeypatch.setenv("LLM_API_TOKEN", "sekret-token-123")
        chat(make_cfg(stub), MESSAGES)
        # the stub does not record headers; assert via a fresh request capture
        import requests as _requests

        captured = {}
        orig = _requests.Session.post

        def spy(self, url, **kw):
            captured["headers"] = kw.get("headers", {})
            return orig(self, url, **kw)

        monkeypatch.setattr(_requests.Session, "post", spy)
        chat(make_cfg(stub), MESSAGES)
        assert captured["headers"]["Authorization"] == "Bearer sekret-token-123"

    def test_secret_never_serialized(self, stub, monkeypatch, tmp_path):
        monkeypatch.setenv("LLM_API_TOKEN", "sekret-token-123")
        cfg = make_cfg(stub)
        assert "sekret-token-123" not in repr(cfg)
        client = LlmClient(cfg)
        client.chat(MESSAGES)
        assert "sekret-token-123" not in repr(client.__dict__)
        # records written from remote completions carry no secret either
        from reflectrl.episode import FailureRecord, write_records
        from reflectrl.tasks import Problem

        record = FailureRecord(task=Problem((1, 2), 3), attempt1="\\boxed{1*2}", category="MissedTarget")
        path = tmp_path / "records.jsonl"
        write_records(path, [record])
        assert "sekret-token-123" not in path.read_text()


class TestChatMany:
    def test_empty(self, stub):
        assert chat_many(make_cfg(stub), []) == []

    def test_order_preserved_with_error_in_place(self, stub):
        StubHandler.script = [("echo", None), ("status", 400), ("echo", None)]
        cfg = make_cfg(stub, max_in_flight=1)
        jobs = [[ChatMessage("user", f"job-{i}")] for i in range(3)]
        results = chat_many(cfg, jobs)
        assert results[0] == "job-0"
        assert isinstance(results[1], ProtocolError)
        assert results[2] == "job-2"

    def test_concurrency_bound(self, stub):
        StubHandler.delay = 0.05
        cfg = make_cfg(stub, max_in_flight=3)
        jobs = [[ChatMessage("user", f"j{i}")] for i in range(12)]
        results = LlmClient(cfg).chat_many(jobs)
        assert results == [f"j{i}" for i in range(12)]
        assert StubHandler.peak_in_flight <= 3

    def test_higher_bound_actually_parallel(self, stub):
        StubHandler.delay = 0.05
        cfg = make_cfg(stub, max_in_flight=6)
        LlmClient(cfg).chat_many([[ChatMessage("user", f"j{i}")] for i in range(12)])
        assert StubHandler.peak_in_flight >= 2


class TestRemoteGenerator:
    def test_episode_integration(self, stub):
        from reflectrl.episode import run_episode, verify_output
        from reflectrl.tasks import Problem

        # the stub echoes the last user message back, which never verifies;
        # wrong -> wrong gives a completed zero-reward episode
        gen = RemoteGenerator(LlmClient(make_cfg(stub)))
        assert gen.supports_token_ids is False
        ep = run_episode(gen, Problem((1, 2), 3), verify_output)
        assert ep.reward == 0
        assert ep.outcome1.category == "InvalidEquation"

    def test_transport_error_becomes_generator_error(self, stub):
        from reflectrl.episode import GeneratorError

        StubHandler.script = [("status", 500)] * 3
        gen = RemoteGenerator(LlmClient(make_cfg(stub)))
        with pytest.raises(GeneratorError):
            gen.complete(
                [{"role": "user", "content": "x"}], temperature=0.0, max_new_tokens=10, seed=0
            )


def test_chat_message_validation():
    with pytest.raises(ValueError):
        ChatMessage("robot", "hi")
    with pytest.raises(ValueError):
        ChatMessage("user", 5)
