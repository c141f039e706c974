from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthvit.errors import EmptyPrompt, Unparseable
from synthvit.mock import MockChatBackend
from synthvit.prompts import (
    FilterConfig,
    PromptCorpus,
    filter_prompts,
    generate_keyword_pool,
    generate_prompt_batch,
    inject_attributes,
    parse_sd_prompt,
    repetition_rate,
    screen_prompt,
)
from synthvit.schema import Keyword, SDPrompt
from synthvit.templates import AttributeRule, InContextPool
from tests.oracles import max_jaccard_bruteforce

# ---------------------------------------------------------------------------
# Grammar
# ---------------------------------------------------------------------------


def test_parse_examples():
    p = parse_sd_prompt("((giraffe:1.2)), [savanna], sunset, (tree)")
    assert p.keywords == (
        Keyword("giraffe", 2, 1.2),
        Keyword("savanna", 1),
        Keyword("sunset"),
        Keyword("tree", 1),
    )
    assert p.text == "((giraffe:1.2)), (savanna), sunset, (tree)"


@pytest.mark.parametrize("raw", ["((cat), dog", "(cat]", "ca(t)", "cat:0"])
def test_parse_rejects_bad_brackets(raw):
    with pytest.raises(Unparseable):
        parse_sd_prompt(raw)


@pytest.mark.parametrize("raw", ["", "  ", ", ,", '""'])
def test_parse_empty(raw):
    with pytest.raises(EmptyPrompt):
        parse_sd_prompt(raw)


_word = st.text(alphabet="abcdefghijklmnopqrstuvwxyz ", min_size=1, max_size=12).map(str.strip).filter(bool)
_keyword = st.builds(
    Keyword,
    _word,
    st.integers(0, 3),
    st.one_of(st.none(), st.integers(1, 30).map(lambda n: n / 10)),
)


@settings(max_examples=300, deadline=None)
@given(st.lists(_keyword, min_size=1, max_size=12))
def test_parse_serialize_round_trip(kws):
    p = SDPrompt(tuple(Keyword(" ".join(k.text.split()), k.emphasis, k.weight) for k in kws))
    assert parse_sd_prompt(p.text) == p


# ---------------------------------------------------------------------------
# Repetition rate
# ---------------------------------------------------------------------------

_vocab = st.sampled_from([f"k{i}" for i in range(15)])
_kwset = st.frozensets(_vocab, min_size=1, max_size=8)


def _prompt(kws) -> SDPrompt:
    return SDPrompt(tuple(Keyword(k) for k in sorted(kws)))


@settings(max_examples=300, deadline=None)
@given(_kwset, st.lists(_kwset, max_size=10))
def test_repetition_rate_matches_oracle(candidate, corpus):
    got = repetition_rate(_prompt(candidate), [_prompt(c) for c in corpus])
    assert abs(got - max_jaccard_bruteforce(set(candidate), [set(c) for c in corpus])) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(_kwset, st.lists(_kwset, max_size=10))
def test_repetition_rate_bounds(candidate, corpus):
    r = repetition_rate(_prompt(candidate), [_prompt(c) for c in corpus])
    assert 0.0 <= r <= 1.0
    if candidate in corpus:
        assert r == 1.0


def test_repetition_ignores_emphasis_and_case():
    a = parse_sd_prompt("((Giraffe)), savanna")
    b = parse_sd_prompt("giraffe, [savanna:1.3]")
    assert repetition_rate(a, [b]) == 1.0


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def test_screen_reasons():
    cfg = FilterConfig(max_keywords=3, max_prompt_chars=40)
    corpus = PromptCorpus([parse_sd_prompt("cat, sofa, lamp")])
    assert screen_prompt("a, b, c, d", cfg, corpus).code == "TooManyKeywords"
    assert screen_prompt("x" * 41, cfg, corpus).code == "TooLong"
    assert screen_prompt("dog, growing", cfg, corpus).code == "NonVisual"
    assert screen_prompt("cat, sofa, lamp", cfg, corpus).code == "Duplicate"
    assert screen_prompt("(cat", cfg, corpus).code == "Unparseable"
    assert screen_prompt("", cfg, corpus).code == "Empty"
    assert isinstance(screen_prompt("dog, sofa", cfg, corpus), SDPrompt)


def test_threshold_is_inclusive():
    corpus = PromptCorpus([parse_sd_prompt("a, b, c, d, e, f, g")])
    # 7 shared out of 10 -> exactly 0.7
    cfg = FilterConfig(duplicate_threshold=0.7)
    assert screen_prompt("a, b, c, d, e, f, g, h, i, j", cfg, corpus).code == "Duplicate"


def test_filter_adds_accepted_to_corpus_in_order():
    corpus = PromptCorpus()
    batch = filter_prompts(["cat, sofa", "cat, sofa", "dog, yard"], FilterConfig(), corpus)
    assert [p.text for p in batch.accepted] == ["cat, sofa", "dog, yard"]
    assert batch.reject_counts() == {"Duplicate": 1}
    assert len(corpus) == 2


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(_vocab, min_size=1, max_size=14), max_size=20))
def test_accepted_prompts_respect_limits(raw_lists):
    cfg = FilterConfig()
    corpus = PromptCorpus()
    batch = filter_prompts([", ".join(r) for r in raw_lists], cfg, corpus)
    seen = []
    for p in batch.accepted:
        assert len(p.keywords) <= cfg.max_keywords
        assert max_jaccard_bruteforce(set(p.keyword_set()), seen) < cfg.duplicate_threshold
        seen.append(set(p.keyword_set()))


# ---------------------------------------------------------------------------
# Attribute injection
# ---------------------------------------------------------------------------

RULES = (
    AttributeRule("construction worker", ("hard hat", "high-visibility vest")),
    AttributeRule("hard hat", ("yellow",)),
)


def test_inject_attributes_chains_and_is_idempotent():
    p = parse_sd_prompt("((construction worker)), site")
    once = inject_attributes(p, RULES)
    assert [k.text for k in once.keywords] == [
        "construction worker", "site", "hard hat", "high-visibility vest", "yellow",
    ]
    assert inject_attributes(once, RULES) == once


def test_inject_attributes_word_boundary():
    p = parse_sd_prompt("hard hatter")
    assert inject_attributes(p, RULES) is p


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["construction worker", "hard hat", "site", "dog", "yellow"]), min_size=1, max_size=5))
def test_inject_idempotence_property(words):
    p = parse_sd_prompt(", ".join(words))
    once = inject_attributes(p, RULES)
    assert inject_attributes(once, RULES) == once
    assert once.keywords[: len(p.keywords)] == p.keywords


# ---------------------------------------------------------------------------
# Generation through the mock backend
# ---------------------------------------------------------------------------


def test_generate_prompt_batch_mock(ability):
    chat = MockChatBackend({"defaults": {"duplicate_rate": 0.3, "overlong_rate": 0.3}})
    corpus = PromptCorpus()
    batch = generate_prompt_batch(
        ability, 20, InContextPool.from_examples(ability.in_context_examples, 8), FilterConfig(), chat, corpus, seed=1
    )
    assert len(batch.accepted) + len(batch.rejected) == 20
    assert batch.accepted and batch.rejected
    assert len(corpus) == len(batch.accepted)
    for p in batch.accepted:
        assert len(p.keywords) <= 10
        assert p.ability_id == "profession"
        if any(k.normalized() == "construction worker" for k in p.keywords):
            assert "hard hat" in p.keyword_set()
    again = generate_prompt_batch(
        ability, 20, InContextPool.from_examples(ability.in_context_examples, 8), FilterConfig(),
        MockChatBackend({"defaults": {"duplicate_rate": 0.3, "overlong_rate": 0.3}}), PromptCorpus(), seed=1,
    )
    assert [p.text for p in again.accepted] == [p.text for p in batch.accepted]


def test_generate_keyword_pool_excludes_existing(ability):
    chat = MockChatBackend({"kinds": {"keyword_pool_gen": {"replies": ["1. Chef\n2. pilot\n3. pilot\n4. baker"]}}})
    assert generate_keyword_pool(ability, 5, chat, seed=0) == ["pilot", "baker"]
