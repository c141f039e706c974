"""StableDiffusion prompt grammar, filtering and generation.

Grammar: comma-separated keywords, most important first. A keyword may be
wrapped in any number of balanced ``()`` / ``[]`` pairs (the nesting depth
is its emphasis) and may carry a ``:weight`` suffix inside the brackets, so
``((giraffe:1.2))`` is ``Keyword("giraffe", emphasis=2, weight=1.2)``.
Serialization always uses parentheses.
"""

from __future__ import annotations

import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

from .backends import ChatBackend, ChatRequest, parse_numbered_list
from .errors import EmptyList, EmptyPrompt, Unparseable
from .schema import Keyword, SDPrompt
from .templates import AbilitySpec, AttributeRule, InContextPool, TemplateKind, TemplateSet, render_template

log = logging.getLogger(__name__)

DEFAULT_BLOCKLIST = (
    "growing",
    "thinking",
    "dreaming",
    "remembering",
    "smelling",
    "tasting",
    "hearing",
    "aroma",
    "scent",
    "melody",
    "evolving",
)

_OPEN = {"(": ")", "[": "]"}
_CLOSE = {")": "(", "]": "["}
_WEIGHT = re.compile(r"^(.*?)\s*:\s*(\d+(?:\.\d+)?|\.\d+)$")


# ---------------------------------------------------------------------------
# Grammar
# ---------------------------------------------------------------------------


def brackets_balanced(text: str) -> bool:
    stack = []
    for ch in text:
        if ch in _OPEN:
            stack.append(ch)
        elif ch in _CLOSE:
            if not stack or stack.pop() != _CLOSE[ch]:
                return False
    return not stack


def _parse_keyword(item: str, raw: str) -> Keyword:
    s = item
    depth = 0
    while s and s[0] in _OPEN:
        if not s.endswith(_OPEN[s[0]]):
            raise Unparseable(f"mismatched brackets in {item!r} of {raw!r}")
        s = s[1:-1].strip()
        depth += 1
    if any(ch in s for ch in "()[]"):
        raise Unparseable(f"brackets inside keyword {item!r} of {raw!r}")
    weight = None
    m = _WEIGHT.match(s)
    if m:
        s, weight = m.group(1).strip(), float(m.group(2))
        if weight <= 0:
            raise Unparseable(f"non-positive weight in {item!r}")
    if not s:
        raise Unparseable(f"empty keyword {item!r} in {raw!r}")
    return Keyword(s, depth, weight)


def parse_sd_prompt(raw: str, ability_id: str = "", pair_id: str | None = None) -> SDPrompt:
    text = raw.strip().strip('"').strip().rstrip(".").strip()
    if not text:
        raise EmptyPrompt("empty prompt")
    if not brackets_balanced(text):
        raise Unparseable(f"unbalanced brackets in {raw!r}")
    keywords = [_parse_keyword(item.strip(), raw) for item in text.split(",") if item.strip()]
    if not keywords:
        raise EmptyPrompt(f"no keywords in {raw!r}")
    return SDPrompt(tuple(keywords), raw_text=raw, ability_id=ability_id, pair_id=pair_id)


def normalize_keyword(text: str) -> str:
    return " ".join(text.lower().split())


# ---------------------------------------------------------------------------
# Repetition rate
# ---------------------------------------------------------------------------


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


class PromptCorpus:
    """Accepted keyword sets of one ability, indexed by keyword.

    Candidates sharing no keyword with a corpus entry have similarity 0, so
    only entries reachable through the inverted index need to be scored.
    """

    def __init__(self, prompts: Iterable[SDPrompt] = ()):
        self._sets: list[frozenset[str]] = []
        self._index: dict[str, list[int]] = defaultdict(list)
        for p in prompts:
            self.add(p)

    def __len__(self) -> int:
        return len(self._sets)

    def add(self, prompt: SDPrompt | frozenset[str]) -> None:
        kws = prompt if isinstance(prompt, frozenset) else prompt.keyword_set()
        idx = len(self._sets)
        self._sets.append(kws)
        for kw in kws:
            self._index[kw].append(idx)

    def max_similarity(self, kws: frozenset[str]) -> float:
        candidates = {i for kw in kws for i in self._index.get(kw, ())}
        return max((jaccard(kws, self._sets[i]) for i in candidates), default=0.0)


def repetition_rate(p: SDPrompt, corpus: PromptCorpus | Iterable[SDPrompt]) -> float:
    """Highest Jaccard similarity between ``p``'s keyword set and any corpus prompt."""
    if not isinstance(corpus, PromptCorpus):
        corpus = PromptCorpus(corpus)
    return corpus.max_similarity(p.keyword_set())


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterConfig:
    max_keywords: int = 10
    duplicate_threshold: float = 0.7
    non_visual_blocklist: tuple[str, ...] = DEFAULT_BLOCKLIST
    max_prompt_chars: int = 400

    def __post_init__(self) -> None:
        if self.max_keywords < 1:
            raise ValueError("max_keywords must be >= 1")
        if not 0 <= self.duplicate_threshold <= 1:
            raise ValueError("duplicate_threshold must be in [0, 1]")
        if self.max_prompt_chars < 1:
            raise ValueError("max_prompt_chars must be >= 1")


@dataclass(frozen=True)
class RejectReason:
    code: str
    score: float | None = None
    term: str | None = None

    CODES = ("TooManyKeywords", "TooLong", "Duplicate", "Empty", "Unparseable", "NonVisual")

    def __str__(self) -> str:
        if self.code == "Duplicate":
            return f"Duplicate({self.score:.3f})"
        if self.code == "NonVisual":
            return f"NonVisual({self.term})"
        return self.code

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"code": self.code}
        if self.score is not None:
            d["score"] = self.score
        if self.term is not None:
            d["term"] = self.term
        return d


@dataclass
class PromptBatch:
    ability_id: str
    accepted: list[SDPrompt] = field(default_factory=list)
    rejected: list[tuple[str, RejectReason]] = field(default_factory=list)

    def reject_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for _, reason in self.rejected:
            counts[reason.code] = counts.get(reason.code, 0) + 1
        return counts

    def reject_log(self) -> list[dict[str, Any]]:
        return [
            {"ability_id": self.ability_id, "raw": raw, "reason": reason.to_dict()}
            for raw, reason in self.rejected
        ]


def _blocked_term(p: SDPrompt, blocklist: Sequence[str]) -> str | None:
    for term in blocklist:
        pattern = re.compile(r"\b" + re.escape(normalize_keyword(term)) + r"\b")
        if any(pattern.search(k.normalized()) for k in p.keywords):
            return term
    return None


def screen_prompt(
    candidate: str | SDPrompt, cfg: FilterConfig, corpus: PromptCorpus, ability_id: str = ""
) -> SDPrompt | RejectReason:
    """Check one candidate against every filter without adding it to the corpus."""
    if isinstance(candidate, SDPrompt):
        p = candidate
    else:
        try:
            p = parse_sd_prompt(candidate, ability_id)
        except EmptyPrompt:
            return RejectReason("Empty")
        except Unparseable:
            return RejectReason("Unparseable")
    if len(p.keywords) > cfg.max_keywords:
        return RejectReason("TooManyKeywords")
    if len(p.text) > cfg.max_prompt_chars:
        return RejectReason("TooLong")
    term = _blocked_term(p, cfg.non_visual_blocklist)
    if term is not None:
        return RejectReason("NonVisual", term=term)
    rate = corpus.max_similarity(p.keyword_set())
    if rate >= cfg.duplicate_threshold:
        return RejectReason("Duplicate", score=rate)
    return p


def filter_prompts(
    raws: Iterable[str | SDPrompt], cfg: FilterConfig, corpus: PromptCorpus, ability_id: str = ""
) -> PromptBatch:
    """Accept or reject each candidate in order; accepted prompts join ``corpus`` immediately."""
    batch = PromptBatch(ability_id)
    for raw in raws:
        result = screen_prompt(raw, cfg, corpus, ability_id)
        raw_text = raw.text if isinstance(raw, SDPrompt) else raw
        if isinstance(result, RejectReason):
            batch.rejected.append((raw_text, result))
        else:
            corpus.add(result)
            batch.accepted.append(result)
    return batch


def _mentions(keywords: Iterable[Keyword], phrase: str) -> bool:
    pattern = re.compile(r"\b" + re.escape(normalize_keyword(phrase)) + r"\b")
    return any(pattern.search(k.normalized()) for k in keywords)


def inject_attributes(p: SDPrompt, rules: Sequence[AttributeRule]) -> SDPrompt:
    keywords = list(p.keywords)
    present = {k.normalized() for k in keywords}
    changed = True
    # repeat until stable so that rule order cannot break idempotence
    while changed:
        changed = False
        for rule in rules:
            if not _mentions(keywords, rule.trigger_keyword):
                continue
            for extra in rule.injected_keywords:
                if normalize_keyword(extra) not in present:
                    keywords.append(Keyword(extra.strip()))
                    present.add(normalize_keyword(extra))
                    changed = True
    if len(keywords) == len(p.keywords):
        return p
    out = replace(p, keywords=tuple(keywords))
    return replace(out, raw_text=out.text)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def dedupe(items: Iterable[str], existing: Iterable[str] = ()) -> list[str]:
    """Order-preserving case-insensitive dedup; ``existing`` entries are excluded."""
    seen = {normalize_keyword(x) for x in existing}
    out = []
    for item in items:
        key = normalize_keyword(item)
        if key and key not in seen:
            seen.add(key)
            out.append(item.strip())
    return out


def generate_keyword_pool(
    ability: AbilitySpec,
    n: int,
    chat: ChatBackend,
    *,
    templates: TemplateSet | None = None,
    seed: int | None = None,
) -> list[str]:
    """Ask the chat backend for up to ``n`` new keywords not already in the ability's pool."""
    if n <= 0:
        return []
    text = render_template(TemplateKind.KEYWORD_POOL_GEN, ability, None, {"n_keywords": n}, templates)
    reply = chat.chat_complete(ChatRequest.user(text, seed=seed))
    try:
        items = parse_numbered_list(reply)
    except EmptyList as exc:
        raise EmptyList(f"{ability.ability_id}: keyword pool reply: {exc}") from exc
    items = [i.strip().rstrip(".") for i in items]
    return dedupe(items, ability.keyword_pool)[:n]


def generate_prompt_batch(
    ability: AbilitySpec,
    n: int,
    pool: InContextPool | None,
    cfg: FilterConfig,
    chat: ChatBackend,
    corpus: PromptCorpus,
    *,
    templates: TemplateSet | None = None,
    seed: int | None = None,
) -> PromptBatch:
    """Render prompt_gen, call chat, parse, inject attributes, filter."""
    slots = {"n_prompts": n, "max_keywords": cfg.max_keywords}
    text = render_template(TemplateKind.PROMPT_GEN, ability, pool, slots, templates)
    reply = chat.chat_complete(ChatRequest.user(text, seed=seed))
    try:
        items = parse_numbered_list(reply)[:n]
    except EmptyList as exc:
        raise EmptyList(f"{ability.ability_id}: prompt reply: {exc}") from exc

    candidates: list[str | SDPrompt] = []
    for item in items:
        try:
            p = parse_sd_prompt(item, ability.ability_id)
        except (EmptyPrompt, Unparseable):
            candidates.append(item)
            continue
        candidates.append(inject_attributes(p, ability.attribute_rules))
    batch = filter_prompts(candidates, cfg, corpus, ability.ability_id)
    log.debug(
        "%s: %d accepted, rejected %s", ability.ability_id, len(batch.accepted), batch.reject_counts()
    )
    return batch
