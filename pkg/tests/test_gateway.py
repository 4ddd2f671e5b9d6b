import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from issuepatch.errors import UsageError
from issuepatch.gateway import (
    BackendConfig,
    CompletionRequest,
    Gateway,
    GatewayError,
    LoopAborted,
    ScriptExhaustedError,
    run_bounded_loop,
)


def scripted(entries):
    return Gateway(BackendConfig(kind="scripted", script=entries))


class TestScriptedBackend:
    def test_tag_match(self):
        gw = scripted([{"tag": "extract", "reply": "X"}])
        assert gw.ask("whatever", tag="extract") == "X"

    def test_ordinal_fallback_for_untagged_entries(self):
        gw = scripted([{"reply": "first"}, {"reply": "second"}])
        assert gw.ask("p", tag="anything") == "first"
        assert gw.ask("p", tag="else") == "second"

    def test_same_tag_consumed_in_order(self):
        gw = scripted([{"tag": "t", "reply": "1"}, {"tag": "t", "reply": "2"}])
        assert gw.ask("p", tag="t") == "1"
        assert gw.ask("p", tag="t") == "2"

    def test_unmatched_tag_errors_naming_tag(self):
        gw = scripted([{"tag": "a", "reply": "x"}])
        gw.ask("p", tag="a")
        with pytest.raises(ScriptExhaustedError, match="missing"):
            gw.ask("p", tag="missing")

    def test_script_file_loading(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps([{"tag": "t", "reply": "filed"}]))
        gw = Gateway(BackendConfig(kind="scripted", script_path=str(path)))
        assert gw.ask("p", tag="t") == "filed"

    def test_calls_are_logged(self):
        gw = scripted([{"tag": "t", "reply": "r"}])
        gw.ask("the prompt", tag="t")
        assert gw.calls[0].tag == "t"
        assert gw.calls[0].prompt == "the prompt"
        assert gw.calls[0].reply == "r"


class TestRequestValidation:
    def test_bad_max_tokens(self):
        with pytest.raises(UsageError):
            CompletionRequest(prompt="p", max_tokens=0)

    def test_bad_temperature(self):
        with pytest.raises(UsageError):
            CompletionRequest(prompt="p", temperature=-0.1)

    def test_backend_kind_fields(self):
        with pytest.raises(UsageError):
            BackendConfig(kind="http_chat")
        with pytest.raises(UsageError):
            BackendConfig(kind="carrier_pigeon")


class TestBoundedLoop:
    def test_done_first_call(self):
        assert run_bounded_loop(lambda: True, cap=10) == (1, True)

    def test_never_done_stops_at_cap_ten(self):
        calls = []
        iterations, completed = run_bounded_loop(
            lambda: calls.append(1) and False, cap=10
        )
        assert (iterations, completed) == (10, False)
        assert len(calls) == 10

    def test_cap_one_continue(self):
        assert run_bounded_loop(lambda: False, cap=1) == (1, False)

    def test_step_error_aborts_with_iteration_count(self):
        state = {"n": 0}

        def step():
            state["n"] += 1
            if state["n"] == 3:
                raise RuntimeError("boom")
            return False

        with pytest.raises(LoopAborted) as exc:
            run_bounded_loop(step, cap=10)
        assert exc.value.iterations == 3

    def test_cap_validated(self):
        with pytest.raises(UsageError):
            run_bounded_loop(lambda: True, cap=0)


class _FlakyHandler(BaseHTTPRequestHandler):
    """Returns 429 twice, then a well-formed chat completion."""

    attempts = 0

    def do_POST(self):
        cls = type(self)
        cls.attempts += 1
        body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
        if cls.attempts <= 2:
            self.send_response(429)
            self.end_headers()
            return
        request = json.loads(body)
        reply = {
            "choices": [{"message": {"content": f"echo:{request['messages'][0]['content']}"}}],
            "usage": {"prompt_tokens": 5, "completion_tokens": 2},
        }
        payload = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def flaky_server():
    _FlakyHandler.attempts = 0
    server = ThreadingHTTPServer(("127.0.0.1", 0), _FlakyHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
    server.shutdown()


class TestHttpBackend:
    def test_retries_on_429_then_succeeds_with_retry_records(self, flaky_server, monkeypatch):
        monkeypatch.setenv("TEST_API_KEY", "k")
        gw = Gateway(
            BackendConfig(
                kind="http_chat",
                endpoint=flaky_server,
                model_name="test-model",
                api_key_env="TEST_API_KEY",
                max_retries=3,
                retry_base_delay=0.01,
            )
        )
        assert gw.ask("hello", tag="t") == "echo:hello"
        assert gw.calls[0].retries == 2
        assert gw.calls[0].completion_tokens == 2

    def test_exhausted_retries_raise_gateway_error(self, monkeypatch):
        gw = Gateway(
            BackendConfig(
                kind="http_chat",
                endpoint="http://127.0.0.1:9/unreachable",
                model_name="m",
                max_retries=1,
                retry_base_delay=0.01,
            )
        )
        with pytest.raises(GatewayError):
            gw.ask("p", tag="t")
