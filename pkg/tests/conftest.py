import sys
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


def completion_choice(index, tokens):
    """``tokens`` is a list of (token, logprob, {alt: logprob})."""
    return {
        "index": index,
        "text": "".join(t for t, _, _ in tokens),
        "finish_reason": "stop",
        "logprobs": {
            "tokens": [t for t, _, _ in tokens],
            "token_logprobs": [lp for _, lp, _ in tokens],
            "top_logprobs": [alts for _, _, alts in tokens],
        },
    }


class StubLLM:
    """Scripted OpenAI-compatible server.

    ``responder(path, body) -> (status, payload)`` decides every reply; the
    requests seen are kept in ``requests``.
    """

    def __init__(self, responder):
        self.responder = responder
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.requests.append((self.path, body))
                status, payload = stub.responder(self.path, body)
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_llm():
    servers = []

    def make(responder):
        s = StubLLM(responder)
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.close()


def emotion_responder(path, body):
    """Plausible multi-token label answers, deterministic per prompt."""
    import hashlib

    names = ["Sadness", "Joy", "Love", "Anger", "Fear", "Surprise"]
    prompt = body.get("prompt") or body["messages"][-1]["content"]
    seed = int(hashlib.sha256(prompt.encode()).hexdigest(), 16)
    choices = []
    for i in range(body.get("n", 1)):
        lab = (seed >> (3 * i)) % 6
        lp = -0.05 - 0.2 * ((seed >> (5 * i)) % 7)
        alts = {str(lab): lp, str((lab + 1) % 6): lp - 1.5, str((lab + 2) % 6): lp - 2.5}
        toks = [(str(lab), lp, alts), (":", -0.01, {":": -0.01, "}": -4.8}),
                (" " + names[lab], -0.02, {" " + names[lab]: -0.02, " X": -4.0}), ("}", -0.01, {"}": -0.01})]
        choices.append(completion_choice(i, toks))
    return 200, {"choices": choices}


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
