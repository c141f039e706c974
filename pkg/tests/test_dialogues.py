from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthvit.dialogues import (
    DialogueLimits,
    PhaseList,
    RelationKind,
    bracket_segments,
    generate_interleaved_dialogue,
    generate_multi_image_dialogue,
    generate_pair_prompts,
    generate_phase_list,
    generate_stage1_dialogue,
    parse_transcript,
    question_form_counts,
    tag_question_form,
    validate_dialogue,
)
from synthvit.errors import InsufficientPhases, TooLong, Unparseable
from synthvit.mock import MockChatBackend
from synthvit.prompts import FilterConfig, PromptCorpus, parse_sd_prompt
from synthvit.schema import Dialogue, Turn
from tests.oracles import count_top_level_brackets

LIMITS = DialogueLimits()


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


def test_parse_transcript_labels_and_continuations():
    turns = parse_transcript("Intro line\nHuman: Q1\nAssistant: A1\nmore of A1\n**User:** Q2\nGPT: A2")
    assert [(t.speaker, t.text) for t in turns] == [
        ("human", "Q1"), ("assistant", "A1\nmore of A1"), ("human", "Q2"), ("assistant", "A2"),
    ]


def test_bracket_segments():
    text = "Whisk (gently) the eggs. [((eggs)), bowl, [whisk:1.2]] Then wait."
    segs = bracket_segments(text)
    assert len(segs) == 1
    assert segs[0][2] == "((eggs)), bowl, [whisk:1.2]"
    for bad in ("a ] b", "[a (b]", "[open"):
        with pytest.raises(Unparseable):
            bracket_segments(bad)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.one_of(st.text(alphabet="abc ()", max_size=6), st.just("[x, (y)]")), max_size=8))
def test_bracket_segments_count_matches_oracle(parts):
    text = "".join(parts)
    try:
        segs = bracket_segments(text)
    except Unparseable:
        return
    assert len(segs) == count_top_level_brackets(text)


@pytest.mark.parametrize(
    "q,form",
    [
        ("Is the car red?", "yes_no"),
        ("Is the car red or blue?", "either_or"),
        ("What color is the car?", "wh"),
        ("<image>\nHow many dogs are there?", "wh"),
        ("Describe the scene.", "other"),
    ],
)
def test_tag_question_form(q, form):
    assert tag_question_form(q) == form


def test_question_form_counts():
    d = Dialogue((Turn("human", "Is it red?"), Turn("assistant", "Yes.")), "stage1_description")
    assert question_form_counts([d, d])["yes_no"] == 2


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _codes(d, limits=LIMITS):
    return [v.code for v in validate_dialogue(d, limits).violations]


def test_validate_alternation_and_length():
    d = Dialogue((Turn("human", "Q?"), Turn("human", "Q2?"), Turn("assistant", "x" * 501)), "multi_image")
    assert _codes(d) == ["Alternation", "TooLong"]


def test_validate_question_form_allowlist():
    limits = DialogueLimits(allowed_question_forms=frozenset({"wh"}))
    d = Dialogue((Turn("human", "Is it red?"), Turn("assistant", "Yes.")), "stage1_description")
    assert _codes(d, limits) == ["QuestionForm"]


def test_validate_interleaved_bracket_count():
    p = parse_sd_prompt("eggs")
    d = Dialogue((Turn("human", "How?"), Turn("assistant", "Crack them. [eggs] [bowl]", (p,))), "interleaved")
    assert _codes(d) == ["Brackets"]


def test_validate_unanswered():
    assert _codes(Dialogue((Turn("human", "Q?"),), "stage1_description")) == ["Unanswered"]


# ---------------------------------------------------------------------------
# Stage-1 dialogue
# ---------------------------------------------------------------------------


def test_stage1_dialogue_mock(ability):
    p = parse_sd_prompt("((chef)), kitchen, white hat")
    d = generate_stage1_dialogue(p, ability, LIMITS, MockChatBackend({"defaults": {"overlong_rate": 0}}), seed=3)
    assert d.kind == "stage1_description"
    assert d.turns[0].text in ability.question_pool
    assert "chef" in d.turns[1].text
    assert not validate_dialogue(d, LIMITS).violations


def test_stage1_overlong_is_regenerated_once(ability):
    chat = MockChatBackend({"kinds": {"stage1_dialogue": {"sequence": ["x" * 600, "Short answer."]}}})
    d = generate_stage1_dialogue(parse_sd_prompt("chef"), ability, LIMITS, chat, seed=0)
    assert d.turns[1].text == "Short answer."
    chat = MockChatBackend({"kinds": {"stage1_dialogue": {"sequence": ["x" * 600]}}})
    with pytest.raises(TooLong):
        generate_stage1_dialogue(parse_sd_prompt("chef"), ability, LIMITS, chat, seed=0)


# ---------------------------------------------------------------------------
# Multi-image
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("relation", list(RelationKind))
def test_pair_prompts_and_dialogue(relation):
    chat = MockChatBackend({"defaults": {"overlong_rate": 0}})
    corpus = PromptCorpus()
    pairs = generate_pair_prompts(relation, 4, None, FilterConfig(), chat, corpus, seed=5)
    assert pairs
    for pair in pairs:
        assert pair.first.pair_id == pair.second.pair_id == pair.pair_id
        assert pair.pair_id.startswith(relation.value)
        assert all(c.startswith("A photo of") for c in pair.captions)
    d = generate_multi_image_dialogue(pairs[0], LIMITS, chat, seed=1, n_rounds=2)
    assert d.kind == "multi_image" and len(d.turns) == 4
    assert not validate_dialogue(d, LIMITS).violations


def test_pair_member_rejection_drops_whole_pair():
    chat = MockChatBackend(
        {"kinds": {
            "paired_prompt_gen": {"replies": ["1. cat, sofa || cat, growing\n2. dog, yard || dog, beach\n3. nonsense"]},
        }}
    )
    rejects = []
    pairs = generate_pair_prompts(
        "similarity", 3, None, FilterConfig(), chat, PromptCorpus(), seed=0,
        on_reject=lambda raw, r: rejects.append(r.code),
    )
    assert [(p.first.text, p.second.text) for p in pairs] == [("dog, yard", "dog, beach")]
    assert rejects == ["NonVisual", "Unparseable"]


# ---------------------------------------------------------------------------
# Interleaved
# ---------------------------------------------------------------------------


def test_phase_list_collapses_duplicates_and_retries():
    chat = MockChatBackend({"kinds": {"phase_gen": {"sequence": ["1. a\n2. A\n3. b", "1. c"]}}})
    assert generate_phase_list("recipes", 3, chat, seed=0).phases == ("a", "b", "c")
    chat = MockChatBackend({"kinds": {"phase_gen": {"sequence": ["1. a\n2. a"]}}})
    with pytest.raises(InsufficientPhases):
        generate_phase_list("recipes", 3, chat, seed=0, retry_budget=2)


def test_phase_list_distinct():
    with pytest.raises(ValueError):
        PhaseList(("a", "A "))


def test_interleaved_dialogue_mock():
    chat = MockChatBackend()
    phases = generate_phase_list("recipes", 4, chat, seed=11)
    d = generate_interleaved_dialogue(phases, LIMITS, chat, domain="recipes", seed=12)
    assistant = [t for t in d.turns if t.speaker == "assistant"]
    assert len(assistant) == 4
    for t in assistant:
        assert len(t.image_prompts) == 1
        assert len(bracket_segments(t.text)) == 1
    assert len(d.image_prompts()) == 4


def test_interleaved_wrong_bracket_count_rejected():
    reply = "Human: How?\nAssistant: Step one [a] and [b]"
    chat = MockChatBackend({"kinds": {"interleaved_dialogue": {"replies": [reply]}}})
    with pytest.raises(Unparseable):
        generate_interleaved_dialogue(PhaseList(("one",)), LIMITS, chat, seed=0)
