from __future__ import annotations

import io

import pytest
from PIL import Image

from synthvit.backends import ChatRequest, T2IRequest
from synthvit.errors import SafetyRejected
from synthvit.mock import MOCK_IMAGE_SIZE, MockChatBackend, MockT2IBackend, Scenario, task_kind


def test_replies_are_pure_functions_of_request():
    req = ChatRequest.user("### TASK: prompt_gen\nGenerate 5 new prompts", seed=4)
    a = MockChatBackend().chat_complete(req)
    b = MockChatBackend().chat_complete(req)
    assert a == b
    other = MockChatBackend().chat_complete(ChatRequest.user(req.messages[0][1], seed=5))
    assert other != a


def test_task_kind_and_unknown():
    assert task_kind(ChatRequest.user("### TASK: judge\n...")) == "judge"
    assert MockChatBackend().chat_complete(ChatRequest.user("hello")) == "1. ok"


def test_sequence_is_stateful_and_last_repeats():
    chat = MockChatBackend({"kinds": {"judge": {"sequence": ["a", "b"]}}})
    req = ChatRequest.user("### TASK: judge")
    assert [chat.chat_complete(req) for _ in range(3)] == ["a", "b", "b"]
    assert chat.calls_by_kind == {"judge": 3}


def test_scenario_rejects_unknown_keys():
    with pytest.raises(ValueError):
        Scenario.from_dict({"kind": {}})


def test_t2i_placeholder_png_deterministic():
    t2i = MockT2IBackend()
    a = t2i.txt2img(T2IRequest("red car", 3))
    b = t2i.txt2img(T2IRequest("red car", 3))
    c = t2i.txt2img(T2IRequest("red car", 4))
    assert a.data == b.data != c.data
    img = Image.open(io.BytesIO(a.data))
    assert img.size == (MOCK_IMAGE_SIZE, MOCK_IMAGE_SIZE)


def test_t2i_unsafe_terms():
    with pytest.raises(SafetyRejected):
        MockT2IBackend(["weapon"]).txt2img(T2IRequest("a Weapon on a table", 1))
