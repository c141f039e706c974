from __future__ import annotations

import base64
import json

import httpx
import pytest

from synthvit.backends import (
    BackendPolicy,
    ChatRequest,
    HttpChatClient,
    HttpT2IClient,
    RateLimiter,
    T2IRequest,
    parse_numbered_list,
)
from synthvit.errors import BadResponse, EmptyList, Exhausted, SafetyRejected


class VirtualClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps: list[float] = []

    def __call__(self) -> float:
        return self.now

    def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self.now += seconds


def _chat(handler, policy=None, clock=None):
    clock = clock or VirtualClock()
    http = httpx.Client(transport=httpx.MockTransport(handler))
    client = HttpChatClient(
        "http://test/v1", "m", policy or BackendPolicy(max_retries=3, backoff_base=0.5),
        http=http, clock=clock, sleep=clock.sleep, api_key_env=None,
    )
    return client, clock


def _ok(content="hello"):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


def test_chat_success_and_payload():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        assert request.url.path == "/v1/chat/completions"
        return _ok()

    client, _ = _chat(handler)
    req = ChatRequest.user("hi", system="sys", seed=5, temperature=0.0)
    assert client.chat_complete(req) == "hello"
    body = seen[0]
    assert body["messages"][0] == {"role": "system", "content": "sys"}
    assert body["seed"] == 5 and body["temperature"] == 0.0


@pytest.mark.parametrize("status", [429, 500, 503])
def test_retries_transient_then_succeeds(status):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(status) if len(calls) < 3 else _ok()

    client, clock = _chat(handler)
    assert client.chat_complete(ChatRequest.user("x")) == "hello"
    assert clock.sleeps == [0.5, 1.0]
    assert client.last_retries == 2
    assert client.stats.to_dict() == {"calls": 1, "retries": 2, "failures": 0}


def test_exhausted_after_max_retries():
    client, clock = _chat(lambda r: httpx.Response(502))
    with pytest.raises(Exhausted) as info:
        client.chat_complete(ChatRequest.user("x"))
    assert info.value.attempts == 4
    assert clock.sleeps == [0.5, 1.0, 2.0]


def test_connection_error_is_transient():
    def handler(request):
        raise httpx.ConnectError("refused")

    client, _ = _chat(handler, BackendPolicy(max_retries=1, backoff_base=0.01))
    with pytest.raises(Exhausted):
        client.chat_complete(ChatRequest.user("x"))


@pytest.mark.parametrize(
    "response",
    [httpx.Response(400, text="bad"), httpx.Response(200, json={"nope": 1}), httpx.Response(200, text="not json")],
)
def test_bad_response_not_retried(response):
    calls = []

    def handler(request):
        calls.append(1)
        return response

    client, _ = _chat(handler)
    with pytest.raises(BadResponse):
        client.chat_complete(ChatRequest.user("x"))
    assert len(calls) == 1


def test_rate_limiter_virtual_clock():
    clock = VirtualClock()
    lim = RateLimiter(3, clock, clock.sleep)
    stamps = [lim.acquire() for _ in range(7)]
    assert stamps == [0, 0, 0, 60, 60, 60, 120]
    # no 60 s window holds more than rpm acquisitions
    for t in stamps:
        assert sum(1 for s in stamps if t <= s < t + 60) <= 3


def _t2i(handler):
    clock = VirtualClock()
    return HttpT2IClient(
        "http://t2i/txt2img", BackendPolicy(max_retries=1, backoff_base=0.1),
        http=httpx.Client(transport=httpx.MockTransport(handler)), clock=clock, sleep=clock.sleep,
        api_key_env=None,
    )


def test_t2i_decodes_images():
    png = b"\x89PNG fake"

    def handler(request):
        body = json.loads(request.content)
        assert body["seed"] == 9 and body["width"] == 64
        return httpx.Response(200, json={"images": [base64.b64encode(png).decode()]})

    art = _t2i(handler).txt2img(T2IRequest("a cat", 9, 64, 64))
    assert art.data == png and art.seed == 9


@pytest.mark.parametrize("body", [{"safety_rejected": True}, {"nsfw_content_detected": [True], "images": ["AA=="]}])
def test_t2i_safety(body):
    with pytest.raises(SafetyRejected):
        _t2i(lambda r: httpx.Response(200, json=body)).txt2img(T2IRequest("x", 1))


def test_t2i_bad_base64():
    with pytest.raises(BadResponse):
        _t2i(lambda r: httpx.Response(200, json={"image": "%%%"})).txt2img(T2IRequest("x", 1))


def test_parse_numbered_list():
    assert parse_numbered_list("Sure:\n1. a\n2) b\n\n3.   c  \nthanks") == ["a", "b", "c"]
    with pytest.raises(EmptyList):
        parse_numbered_list("nothing numbered")


def test_followup_keeps_history():
    req = ChatRequest.user("q", seed=3).followup("a", "again")
    assert req.messages == (("user", "q"), ("assistant", "a"), ("user", "again"))
    assert req.last_user_message == "again" and req.seed == 3
