"""Dialogue generation: single-image descriptions, image pairs, interleaved walkthroughs."""

from __future__ import annotations

import enum
import hashlib
import logging
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .backends import ChatBackend, ChatRequest, parse_numbered_list
from .errors import EmptyList, EmptyPrompt, InsufficientPhases, TooLong, Unparseable
from .prompts import (
    FilterConfig,
    PromptCorpus,
    RejectReason,
    _CLOSE,
    _OPEN,
    dedupe,
    normalize_keyword,
    parse_sd_prompt,
    screen_prompt,
)
from .schema import Dialogue, SDPrompt, Turn, ValidationReport
from .templates import AbilitySpec, InContextPool, TemplateKind, TemplateSet, render_template

log = logging.getLogger(__name__)

QUESTION_FORMS = ("yes_no", "wh", "either_or")


class RelationKind(str, enum.Enum):
    SIMILARITY = "similarity"
    DIFFERENCE = "difference"
    LOGICAL_RELATION = "logical_relation"

    @property
    def label(self) -> str:
        return self.value.replace("_", " ")


RELATION_INSTRUCTIONS = {
    RelationKind.SIMILARITY: (
        "The two images must share a clearly visible subject or property while differing in setting, "
        "so that a viewer can say what they have in common."
    ),
    RelationKind.DIFFERENCE: (
        "The two images must be nearly identical except for one or two clearly visible changes, "
        "such as the color, the object or the background."
    ),
    RelationKind.LOGICAL_RELATION: (
        "The two images must show two moments or states that are connected by cause and effect or by "
        "order in time, so that a viewer can reason about which one comes first and why."
    ),
}


@dataclass(frozen=True)
class PairedPrompt:
    pair_id: str
    first: SDPrompt
    second: SDPrompt
    captions: tuple[str, str]
    relation: RelationKind

    def __post_init__(self) -> None:
        if self.first.pair_id != self.pair_id or self.second.pair_id != self.pair_id:
            raise ValueError("pair members must carry the pair's pair_id")


@dataclass(frozen=True)
class PhaseList:
    phases: tuple[str, ...]

    def __post_init__(self) -> None:
        keys = [normalize_keyword(p) for p in self.phases]
        if len(set(keys)) != len(keys):
            raise ValueError("phases must be distinct")

    def __len__(self) -> int:
        return len(self.phases)


@dataclass(frozen=True)
class DialogueLimits:
    max_answer_chars: int = 500
    allowed_question_forms: frozenset[str] = field(default_factory=lambda: frozenset(QUESTION_FORMS))

    def __post_init__(self) -> None:
        if self.max_answer_chars <= 0:
            raise ValueError("max_answer_chars must be > 0")
        unknown = set(self.allowed_question_forms) - set(QUESTION_FORMS)
        if unknown:
            raise ValueError(f"unknown question forms: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


_SPEAKER_LINE = re.compile(
    r"^\s*\**\s*(human|user|question|q|assistant|gpt|answer|response|a)\s*\**\s*:\s*\**\s*(.*)$",
    re.IGNORECASE,
)
_HUMAN_LABELS = {"human", "user", "question", "q"}


def parse_transcript(reply: str) -> list[Turn]:
    """Split ``Human: ... / Assistant: ...`` text into turns; unlabeled lines continue the current turn."""
    turns: list[list[str]] = []
    for line in reply.splitlines():
        m = _SPEAKER_LINE.match(line)
        if m:
            speaker = "human" if m.group(1).lower() in _HUMAN_LABELS else "assistant"
            turns.append([speaker, m.group(2).strip()])
        elif turns and line.strip():
            turns[-1][1] = (turns[-1][1] + "\n" + line.strip()).strip()
    return [Turn(speaker, text) for speaker, text in turns]


def bracket_segments(text: str) -> list[tuple[int, int, str]]:
    """``(start, end, inner)`` for every top-level ``[...]`` segment.

    Parentheses outside a segment are ordinary prose; inside, every bracket
    must match. A stray ``]`` or an unclosed ``[`` raises Unparseable.
    """
    segments = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "]":
            raise Unparseable(f"stray ']' at {i}")
        if ch != "[":
            i += 1
            continue
        stack = ["["]
        j = i + 1
        while j < len(text) and stack:
            c = text[j]
            if c in _OPEN:
                stack.append(c)
            elif c in _CLOSE:
                if stack[-1] != _CLOSE[c]:
                    raise Unparseable(f"mismatched {c!r} at {j}")
                stack.pop()
            j += 1
        if stack:
            raise Unparseable(f"unclosed '[' at {i}")
        segments.append((i, j, text[i + 1 : j - 1]))
        i = j
    return segments


_WH = {"what", "which", "who", "whom", "whose", "where", "when", "why", "how"}
_AUX = {
    "is", "are", "was", "were", "am", "do", "does", "did", "can", "could", "will", "would",
    "should", "shall", "may", "might", "has", "have", "had", "must",
}


def tag_question_form(text: str) -> str:
    """Heuristic: yes_no / wh / either_or / other, from the leading word and an ``or``."""
    t = text.replace("<image>", " ").strip().lower()
    m = re.match(r"[a-z']+", t)
    first = m.group(0) if m else ""
    has_or = re.search(r"\bor\b", t) is not None
    if first in _AUX:
        return "either_or" if has_or else "yes_no"
    if first in _WH:
        return "wh"
    if has_or:
        return "either_or"
    return "other"


def _clean_answer(text: str) -> str:
    return re.sub(r"^\s*(answer|response|assistant)\s*:\s*", "", text.strip(), flags=re.IGNORECASE).strip()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_dialogue(d: Dialogue, limits: DialogueLimits) -> ValidationReport:
    report = ValidationReport(count=len(d.turns))
    if not d.turns:
        report.add(None, "Empty", "dialogue has no turns")
        return report
    expected = "human"
    for i, turn in enumerate(d.turns):
        if turn.speaker not in ("human", "assistant"):
            report.add(i, "Speaker", f"unknown speaker {turn.speaker!r}")
        elif turn.speaker != expected:
            report.add(i, "Alternation", f"expected a {expected} turn, got {turn.speaker}")
        expected = "assistant" if turn.speaker == "human" else "human"

        if turn.image_prompts and d.kind != "interleaved":
            report.add(i, "ImagePrompts", "image prompts are only allowed in interleaved dialogues")

        if turn.speaker == "assistant":
            if not turn.text.strip():
                report.add(i, "EmptyAnswer", "assistant turn is empty")
            if len(turn.text) > limits.max_answer_chars:
                report.add(i, "TooLong", f"{len(turn.text)} > {limits.max_answer_chars} characters")
        elif turn.speaker == "human":
            if not turn.text.strip():
                report.add(i, "EmptyQuestion", "human turn is empty")
            form = tag_question_form(turn.text)
            if form in QUESTION_FORMS and form not in limits.allowed_question_forms:
                report.add(i, "QuestionForm", f"{form} questions are not allowed")

        if d.kind == "interleaved":
            try:
                n = len(bracket_segments(turn.text))
            except Unparseable as exc:
                report.add(i, "Brackets", str(exc))
            else:
                if n != len(turn.image_prompts):
                    report.add(i, "Brackets", f"{n} bracketed segments, {len(turn.image_prompts)} image prompts")
    if d.turns[-1].speaker == "human":
        report.add(len(d.turns) - 1, "Unanswered", "dialogue ends with a human turn")
    return report


def question_form_counts(dialogues: Sequence[Dialogue]) -> dict[str, int]:
    counts = {f: 0 for f in QUESTION_FORMS + ("other",)}
    for d in dialogues:
        for t in d.turns:
            if t.speaker == "human":
                counts[tag_question_form(t.text)] += 1
    return counts


def _check_structure(d: Dialogue, limits: DialogueLimits) -> list[str]:
    """Violations other than length; these are not fixed by asking for a shorter answer."""
    report = validate_dialogue(d, limits)
    return [f"turn {v.index}: {v.code}: {v.message}" for v in report.violations if v.code != "TooLong"]


def _too_long(turns: Sequence[Turn], limit: int) -> list[int]:
    return [i for i, t in enumerate(turns) if t.speaker == "assistant" and len(t.text) > limit]


def _shorten_request(req: ChatRequest, reply: str, limit: int) -> ChatRequest:
    return req.followup(
        reply,
        f"Some answers exceed {limit} characters. Rewrite the whole response so that every answer "
        f"has at most {limit} characters. Keep the same format.",
    )


# ---------------------------------------------------------------------------
# Stage-1 dialogues
# ---------------------------------------------------------------------------


def generate_question_pool(
    ability: AbilitySpec,
    n: int,
    chat: ChatBackend,
    *,
    templates: TemplateSet | None = None,
    seed: int | None = None,
) -> list[str]:
    """Up to ``n`` new questions that are not already in the ability's question pool."""
    if n <= 0:
        return []
    text = render_template(TemplateKind.QUESTION_POOL_GEN, ability, None, {"n_questions": n}, templates)
    reply = chat.chat_complete(ChatRequest.user(text, seed=seed))
    try:
        items = parse_numbered_list(reply)
    except EmptyList as exc:
        raise EmptyList(f"{ability.ability_id}: question pool reply: {exc}") from exc
    return dedupe(items, ability.question_pool)[:n]


def generate_stage1_dialogue(
    p: SDPrompt,
    ability: AbilitySpec,
    limits: DialogueLimits,
    chat: ChatBackend,
    *,
    pool: InContextPool | None = None,
    templates: TemplateSet | None = None,
    seed: int | None = None,
) -> Dialogue:
    """One question from the ability's pool and one generated answer grounded in the prompt."""
    if not ability.question_pool:
        raise ValueError(f"{ability.ability_id}: question_pool is empty")
    question = random.Random(seed).choice(ability.question_pool)
    slots = {"prompt": p.text, "question": question, "max_chars": limits.max_answer_chars}
    text = render_template(TemplateKind.STAGE1_DIALOGUE, ability, pool, slots, templates)
    req = ChatRequest.user(text, seed=seed)
    reply = chat.chat_complete(req)
    answer = _clean_answer(reply)
    if len(answer) > limits.max_answer_chars or not answer:
        answer = _clean_answer(chat.chat_complete(_shorten_request(req, reply, limits.max_answer_chars)))
        if len(answer) > limits.max_answer_chars:
            raise TooLong(f"{ability.ability_id}: answer of {len(answer)} characters after regeneration")
        if not answer:
            raise Unparseable(f"{ability.ability_id}: empty answer")
    kind = "abnormality" if ability.dialogue_kind == "abnormality" else "stage1_description"
    return Dialogue((Turn("human", question), Turn("assistant", answer)), kind)


# ---------------------------------------------------------------------------
# Multi-image dialogues
# ---------------------------------------------------------------------------


def _pair_id(relation: RelationKind, first: str, second: str) -> str:
    digest = hashlib.sha1(f"{relation.value}|{first}|{second}".encode()).hexdigest()[:12]
    return f"{relation.value}-{digest}"


def _split_pair(item: str) -> tuple[str, str] | None:
    parts = [s.strip() for s in item.split("||")]
    if len(parts) != 2 or not all(parts):
        return None
    return parts[0], parts[1]


def generate_pair_prompts(
    relation: RelationKind | str,
    n: int,
    pool: InContextPool | None,
    cfg: FilterConfig,
    chat: ChatBackend,
    corpus: PromptCorpus,
    *,
    templates: TemplateSet | None = None,
    seed: int | None = None,
    on_reject: Callable[[str, RejectReason], None] | None = None,
) -> list[PairedPrompt]:
    """Generate prompt pairs, keep those whose members both pass filtering, then caption them."""
    relation = RelationKind(relation)
    ability_id = f"multi_image_{relation.value}"
    slots = {
        "relation": relation.label,
        "relation_instructions": RELATION_INSTRUCTIONS[relation],
        "n_pairs": n,
        "max_keywords": cfg.max_keywords,
    }
    text = render_template(TemplateKind.PAIRED_PROMPT_GEN, None, pool, slots, templates)
    items = parse_numbered_list(chat.chat_complete(ChatRequest.user(text, seed=seed)))[:n]

    def reject(raw: str, reason: RejectReason) -> None:
        log.info("dropped %s pair %r: %s", relation.value, raw, reason)
        if on_reject is not None:
            on_reject(raw, reason)

    kept: list[tuple[SDPrompt, SDPrompt]] = []
    for item in items:
        parts = _split_pair(item)
        if parts is None:
            reject(item, RejectReason("Unparseable"))
            continue
        pid = _pair_id(relation, *parts)
        members = []
        for raw in parts:
            try:
                members.append(parse_sd_prompt(raw, ability_id, pid))
            except EmptyPrompt:
                members.append(RejectReason("Empty"))
            except Unparseable:
                members.append(RejectReason("Unparseable"))
        screened = [m if isinstance(m, RejectReason) else screen_prompt(m, cfg, corpus) for m in members]
        bad = next((s for s in screened if isinstance(s, RejectReason)), None)
        if bad is not None:
            reject(item, bad)
            continue
        for s in screened:
            corpus.add(s)
        kept.append((screened[0], screened[1]))
    if not kept:
        return []

    listing = "\n".join(f"{i}. {a.text} || {b.text}" for i, (a, b) in enumerate(kept, start=1))
    text = render_template(
        TemplateKind.PAIR_CAPTION_GEN, None, None, {"relation": relation.label, "pairs": listing}, templates
    )
    seed2 = None if seed is None else seed + 1
    captions = parse_numbered_list(chat.chat_complete(ChatRequest.user(text, seed=seed2)))

    pairs = []
    for i, (a, b) in enumerate(kept):
        cap = _split_pair(captions[i]) if i < len(captions) else None
        if cap is None:
            reject(f"{a.text} || {b.text}", RejectReason("Unparseable"))
            continue
        pairs.append(PairedPrompt(a.pair_id, a, b, cap, relation))
    return pairs


def generate_multi_image_dialogue(
    pair: PairedPrompt,
    limits: DialogueLimits,
    chat: ChatBackend,
    *,
    pool: InContextPool | None = None,
    templates: TemplateSet | None = None,
    seed: int | None = None,
    n_rounds: int = 2,
) -> Dialogue:
    slots = {
        "relation": pair.relation.label,
        "relation_instructions": RELATION_INSTRUCTIONS[pair.relation],
        "caption_1": pair.captions[0],
        "caption_2": pair.captions[1],
        "prompt_1": pair.first.text,
        "prompt_2": pair.second.text,
        "n_rounds": n_rounds,
        "max_chars": limits.max_answer_chars,
    }
    text = render_template(TemplateKind.MULTI_IMAGE_DIALOGUE, None, pool, slots, templates)
    req = ChatRequest.user(text, seed=seed)
    reply = chat.chat_complete(req)
    turns = parse_transcript(reply)
    if _too_long(turns, limits.max_answer_chars):
        turns = parse_transcript(chat.chat_complete(_shorten_request(req, reply, limits.max_answer_chars)))
        if _too_long(turns, limits.max_answer_chars):
            raise TooLong(f"{pair.pair_id}: answer over {limits.max_answer_chars} characters after regeneration")
    d = Dialogue(tuple(turns), "multi_image")
    problems = _check_structure(d, limits)
    if problems:
        raise Unparseable(f"{pair.pair_id}: " + "; ".join(problems))
    return d


# ---------------------------------------------------------------------------
# Interleaved dialogues
# ---------------------------------------------------------------------------


def generate_phase_list(
    topic_domain: str,
    k: int,
    chat: ChatBackend,
    *,
    templates: TemplateSet | None = None,
    seed: int | None = None,
    retry_budget: int = 2,
) -> PhaseList:
    """``k`` distinct steps; duplicates are collapsed and more are requested up to ``retry_budget`` times."""
    if k < 1:
        raise ValueError("k must be >= 1")
    text = render_template(
        TemplateKind.PHASE_GEN, None, None, {"domain": topic_domain, "n_phases": k}, templates
    )
    req = ChatRequest.user(text, seed=seed)
    phases: list[str] = []
    for attempt in range(retry_budget + 1):
        reply = chat.chat_complete(req)
        try:
            items = [i.rstrip(".") for i in parse_numbered_list(reply)]
        except EmptyList:
            items = []
        phases += dedupe(items, phases)
        if len(phases) >= k:
            return PhaseList(tuple(phases[:k]))
        missing = k - len(phases)
        req = req.followup(
            reply,
            f"Some steps were repeated. List {missing} more steps as a numbered list that differ from: "
            + "; ".join(phases),
        )
    raise InsufficientPhases(f"{topic_domain}: {len(phases)} distinct phases after retries, need {k}")


def _interleaved_turns(reply: str, phases: PhaseList, cfg: FilterConfig) -> list[Turn]:
    turns = []
    for i, turn in enumerate(parse_transcript(reply)):
        segments = bracket_segments(turn.text)
        if turn.speaker == "human":
            if segments:
                raise Unparseable(f"turn {i}: bracketed prompt in a human turn")
            turns.append(turn)
            continue
        if len(segments) != 1:
            raise Unparseable(f"turn {i}: expected one bracketed prompt, found {len(segments)}")
        inner = segments[0][2]
        try:
            p = parse_sd_prompt(inner, "interleaved")
        except EmptyPrompt as exc:
            raise Unparseable(f"turn {i}: {exc}") from exc
        if len(p.keywords) > cfg.max_keywords:
            raise Unparseable(f"turn {i}: bracketed prompt has {len(p.keywords)} keywords > {cfg.max_keywords}")
        turns.append(Turn("assistant", turn.text, (p,)))
    n_assistant = sum(t.speaker == "assistant" for t in turns)
    if n_assistant != len(phases):
        raise Unparseable(f"{n_assistant} assistant turns for {len(phases)} phases")
    return turns


def generate_interleaved_dialogue(
    phases: PhaseList,
    limits: DialogueLimits,
    chat: ChatBackend,
    *,
    domain: str = "",
    cfg: FilterConfig | None = None,
    pool: InContextPool | None = None,
    templates: TemplateSet | None = None,
    seed: int | None = None,
) -> Dialogue:
    """One assistant turn per phase, each embedding exactly one ``[...]`` image prompt."""
    cfg = cfg or FilterConfig()
    slots = {
        "domain": domain or "an everyday task",
        "phases": "\n".join(f"{i}. {p}" for i, p in enumerate(phases.phases, start=1)),
        "max_keywords": cfg.max_keywords,
        "max_chars": limits.max_answer_chars,
    }
    text = render_template(TemplateKind.INTERLEAVED_DIALOGUE, None, pool, slots, templates)
    req = ChatRequest.user(text, seed=seed)
    reply = chat.chat_complete(req)
    turns = _interleaved_turns(reply, phases, cfg)
    if _too_long(turns, limits.max_answer_chars):
        reply = chat.chat_complete(_shorten_request(req, reply, limits.max_answer_chars))
        turns = _interleaved_turns(reply, phases, cfg)
        if _too_long(turns, limits.max_answer_chars):
            raise TooLong(f"interleaved answer over {limits.max_answer_chars} characters after regeneration")
    d = Dialogue(tuple(turns), "interleaved")
    problems = _check_structure(d, limits)
    if problems:
        raise Unparseable("; ".join(problems))
    return d
