"""Offline stand-ins for the chat and text-to-image services.

The mock chat backend reads the ``### TASK: <kind>`` marker on the first
line of every template and dispatches to a reply generator for that kind.
Built-in generators read the same labeled lines a human-readable template
carries (``Generate 20 new ...``, ``Image prompt: ...``) and answer in the
format the template asks for, so every parser downstream runs for real.

Replies are a pure function of the request (messages + seed): the RNG is
seeded from a SHA-256 of the canonical request JSON. A scenario may replace
a kind's generator with canned ``replies`` (picked by the same hash) or a
stateful ``sequence`` (returned in call order, last one repeating).
"""

from __future__ import annotations

import hashlib
import io
import json
import random
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml
from PIL import Image

from .backends import CallStats, ChatRequest, ImageArtifact, T2IRequest
from .errors import SafetyRejected

MOCK_IMAGE_SIZE = 64

_TASK = re.compile(r"^### TASK: (\w+)", re.MULTILINE)

SCENES = [
    "city street", "forest clearing", "kitchen counter", "living room", "beach", "mountain trail",
    "office desk", "farm field", "train station", "garden", "harbor", "snowy park", "desert road",
    "library", "rooftop", "market stall", "classroom", "riverbank", "workshop", "museum hall",
]
LIGHTING = [
    "soft light", "golden hour", "overcast", "studio lighting", "morning light", "dramatic shadows",
    "neon glow", "candlelight", "bright daylight", "blue hour",
]
STYLES = [
    "photorealistic", "high detail", "wide shot", "close-up", "35mm photo", "cinematic",
    "sharp focus", "depth of field", "top view", "8k",
]
DETAILS = [
    "wooden table", "brick wall", "green grass", "glass window", "stone path", "red door",
    "white background", "blue sky", "puddles", "potted plant", "metal fence", "striped rug",
    "paper lanterns", "old bench", "tiled floor", "fallen leaves", "sand dunes", "wet asphalt",
]
GENERIC_KEYWORDS = [
    "saffron", "cobalt", "vermilion", "chartreuse", "ochre", "periwinkle", "umber", "jade",
    "lantern", "kayak", "accordion", "typewriter", "telescope", "hammock", "sundial", "canoe",
    "heron", "lynx", "walrus", "tapir", "quince", "kohlrabi", "persimmon", "fennel",
]
QUESTION_STEMS = [
    "What {x} can you see in the image?",
    "Describe the {x} in the image.",
    "Is there anything notable about the {x}?",
    "Which {x} stands out the most?",
    "How would you describe the {x} shown here?",
    "Where is the {x} located in the image?",
]
QUESTION_TOPICS = ["main object", "background", "colors", "scene", "subject", "lighting", "details"]
LOGICAL_PAIRS = [
    ("raw dough", "baked bread"), ("ice cube", "puddle of water"), ("seedling", "tall tree"),
    ("full glass", "empty glass"), ("dark clouds", "wet street"), ("unlit candle", "burning candle"),
    ("green banana", "brown banana"), ("tidy room", "messy room"), ("closed flower bud", "open flower"),
    ("blank canvas", "finished painting"),
]
COLORS = ["red", "blue", "green", "yellow", "white", "black", "orange", "purple"]
TASKS = {
    "recipes": [
        ("make pancakes", ["whisk the eggs", "add the flour", "pour the batter", "flip the pancake",
                           "stack the pancakes", "drizzle the syrup", "add fresh berries", "serve the plate"]),
        ("make a salad", ["wash the lettuce", "slice the tomatoes", "chop the cucumber", "crumble the cheese",
                          "mix the dressing", "toss the salad", "add the croutons", "plate the salad"]),
        ("bake cookies", ["cream the butter", "mix the dough", "scoop the dough", "line the tray",
                          "bake the cookies", "cool the cookies", "pack the cookies", "pour the milk"]),
    ],
    "everyday objects": [
        ("use a coffee maker", ["fill the water tank", "insert the filter", "add the ground coffee",
                                "press the start button", "pour the coffee", "add the milk",
                                "rinse the carafe", "wipe the counter"]),
        ("change a bicycle tire", ["open the brake", "remove the wheel", "lever off the tire",
                                   "pull out the tube", "insert the new tube", "inflate the tire",
                                   "mount the wheel", "test the brake"]),
        ("plant a flower pot", ["pick the pot", "add the gravel", "fill the soil", "dig the hole",
                                "set the plant", "press the soil", "water the plant", "place the pot"]),
    ],
}
EXTRA_STEPS = [
    "clean the workspace", "gather the tools", "check the result", "put everything away",
    "take a photo", "share with a friend", "label the container", "set the timer",
]


def request_seed(req: ChatRequest) -> int:
    blob = json.dumps(req.to_dict(), sort_keys=True, ensure_ascii=False)
    return int.from_bytes(hashlib.sha256(blob.encode("utf-8")).digest()[:8], "big")


def task_kind(req: ChatRequest) -> str:
    first_user = next((c for r, c in req.messages if r == "user"), "")
    m = _TASK.search(first_user)
    return m.group(1) if m else "unknown"


def _field(text: str, pattern: str, default: str = "") -> str:
    # last match wins: in-context examples precede the real request lines
    found = re.findall(pattern, text, re.MULTILINE)
    return found[-1].strip() if found else default


def _int_field(text: str, pattern: str, default: int) -> int:
    m = re.search(pattern, text, re.MULTILINE)
    return int(m.group(1)) if m else default


def _strip_brackets(kw: str) -> str:
    kw = kw.strip().strip("()[]").strip()
    return kw.split(":")[0].strip()


def _keywords_of(prompt: str) -> list[str]:
    return [_strip_brackets(k) for k in prompt.split(",") if _strip_brackets(k)]


def _is_followup(req: ChatRequest) -> bool:
    return len(req.messages) > 1


def _prompt_line(rng: random.Random, subject: str, n_extra: int) -> str:
    pools = [SCENES, LIGHTING, STYLES, DETAILS]
    words = [f"(({subject}))"]
    seen = {subject}
    while len(words) < 1 + n_extra:
        w = rng.choice(pools[(len(words) - 1) % len(pools)])
        if w not in seen:
            seen.add(w)
            words.append(w)
    return ", ".join(words)


# ---------------------------------------------------------------------------
# Built-in generators: (request text, request, rng, params) -> reply
# ---------------------------------------------------------------------------


def gen_prompt_list(text: str, req: ChatRequest, rng: random.Random, params: dict) -> str:
    n = _int_field(text, r"Generate (\d+) new", 10)
    max_kw = _int_field(text, r"at most (\d+) keywords", 10)
    refs = _field(text, r"^Reference keywords: (.*)$")
    subjects = [k for k in (s.strip() for s in refs.split(",")) if k and k != "(none)"] or GENERIC_KEYWORDS
    lines: list[str] = []
    for i in range(n):
        roll = rng.random()
        if lines and roll < params.get("duplicate_rate", 0.05):
            lines.append(rng.choice(lines))
            continue
        subject = rng.choice(subjects)
        if roll > 1 - params.get("overlong_rate", 0.05):
            line = _prompt_line(rng, subject, max_kw + rng.randint(0, 3))
        else:
            hi = max(max_kw - 1, 0)
            line = _prompt_line(rng, subject, rng.randint(min(3, hi), hi))
        if rng.random() < params.get("nonvisual_rate", 0.02):
            line += ", growing"
        lines.append(line)
    return "\n".join(f"{i}. {line}" for i, line in enumerate(lines, start=1))


def gen_keyword_list(text: str, req: ChatRequest, rng: random.Random, params: dict) -> str:
    n = _int_field(text, r"List (\d+) new", 10)
    picks = [f"{rng.choice(COLORS)} {rng.choice(GENERIC_KEYWORDS)}" for _ in range(n)]
    return "\n".join(f"{i}. {w}" for i, w in enumerate(picks, start=1))


def gen_question_list(text: str, req: ChatRequest, rng: random.Random, params: dict) -> str:
    n = _int_field(text, r"Write (\d+) new questions", 5)
    qs = [rng.choice(QUESTION_STEMS).format(x=rng.choice(QUESTION_TOPICS)) for _ in range(n)]
    return "\n".join(f"{i}. {q}" for i, q in enumerate(qs, start=1))


def gen_stage1_answer(text: str, req: ChatRequest, rng: random.Random, params: dict) -> str:
    prompt = _field(text, r"^Image prompt: (.*)$")
    question = _field(text, r"^Question: (.*)$").lower()
    kws = _keywords_of(prompt) or ["an object"]
    main, rest = kws[0], kws[1:]
    if _is_followup(req):
        return f"The image shows {main}."
    if any(w in question for w in ("unusual", "funny", "strange", "abnormal")):
        where = rest[0] if rest else "this setting"
        sentences = [
            f"In reality, {main} would not normally be seen in a setting like {where}.",
            "That mismatch is what makes the picture unusual.",
        ]
    else:
        sentences = [f"The image shows {main}."]
        if rest:
            sentences.append(f"The setting includes {', '.join(rest[:3])}.")
        if len(rest) > 3:
            sentences.append(f"The picture also has {rest[3]}.")
    answer = " ".join(sentences)
    if rng.random() < params.get("overlong_rate", 0.05):
        filler = f" The {main} is clearly visible and takes up most of the frame."
        while len(answer) <= 520:
            answer += filler
    return answer


def gen_pair_list(text: str, req: ChatRequest, rng: random.Random, params: dict) -> str:
    n = _int_field(text, r"Generate (\d+) pairs", 3)
    relation = _field(text, r"^Relation: (.*)$", "difference")
    lines = []
    for _ in range(n):
        scene, light, style = rng.choice(SCENES), rng.choice(LIGHTING), rng.choice(STYLES)
        noun = rng.choice(GENERIC_KEYWORDS)
        if relation.startswith("similarity"):
            other = rng.choice([s for s in SCENES if s != scene])
            a = f"(({noun})), {scene}, {light}, {style}"
            b = f"(({noun})), {other}, {rng.choice(LIGHTING)}, {style}"
        elif relation.startswith("logical"):
            before, after = rng.choice(LOGICAL_PAIRS)
            a = f"(({before})), {scene}, {light}, {style}"
            b = f"(({after})), {scene}, {light}, {style}"
        else:
            c1, c2 = rng.sample(COLORS, 2)
            a = f"(({c1} {noun})), {scene}, {light}, {style}"
            b = f"(({c2} {noun})), {scene}, {light}, {style}"
        if rng.random() < params.get("overlong_rate", 0.05):
            b = b + ", " + ", ".join(DETAILS[:8])
        lines.append(f"{a} || {b}")
    return "\n".join(f"{i}. {line}" for i, line in enumerate(lines, start=1))


def gen_pair_captions(text: str, req: ChatRequest, rng: random.Random, params: dict) -> str:
    body = text.split("Pairs:", 1)[-1]
    out = []
    for m in re.finditer(r"^\s*(\d+)\.\s*(.*?)\s*\|\|\s*(.*)$", body, re.MULTILINE):
        caps = []
        for prompt in (m.group(2), m.group(3)):
            kws = _keywords_of(prompt)
            where = f" in a {kws[1]} scene" if len(kws) > 1 else ""
            caps.append(f"A photo of {kws[0]}{where}.")
        out.append(f"{m.group(1)}. {caps[0]} || {caps[1]}")
    return "\n".join(out)


def gen_multi_image_dialogue(text: str, req: ChatRequest, rng: random.Random, params: dict) -> str:
    relation = _field(text, r"^Relation: (.*)$", "difference")
    cap1 = _field(text, r"^Image 1 caption: (.*)$").rstrip(".")
    cap2 = _field(text, r"^Image 2 caption: (.*)$").rstrip(".")
    rounds = _int_field(text, r"Write (\d+) question", 2)
    c1 = cap1[0].lower() + cap1[1:] if cap1 else "one scene"
    c2 = cap2[0].lower() + cap2[1:] if cap2 else "another scene"
    if relation.startswith("logical"):
        qa = [
            ("Which image shows what happens first, the first or the second?",
             f"The first image comes first. It shows {c1}, which leads to the second image showing {c2}."),
            ("Why are the two images connected?",
             f"The second image is a later state of the first: {c1} turns into {c2}."),
            ("Could the second image happen before the first?",
             "No. The change only goes in one direction, so the first image must come before the second."),
        ]
    elif relation.startswith("similarity"):
        qa = [
            ("What do the two images have in common?",
             f"Both images feature the same kind of subject. The first is {c1} and the second is {c2}."),
            ("Is the subject the same in both images?",
             "Yes. The main subject is the same; only the surroundings change."),
            ("Is the shared subject more visible in the first image or the second?",
             "It is clearly visible in both, so neither image hides it."),
        ]
    else:
        qa = [
            ("What is the difference between the first image and the second image?",
             f"The first image shows {c1}, while the second image shows {c2}."),
            ("Are the two images identical?",
             "No. They share the same setting, but the main subject changes between them."),
            ("Is the change in the subject or in the background?",
             "The change is in the subject; the background stays the same."),
        ]
    rng.shuffle(qa)
    lines = []
    for q, a in qa[: max(1, rounds)]:
        if _is_followup(req):
            a = a[:200]
        lines += [f"Human: {q}", f"Assistant: {a}"]
    return "\n".join(lines)


def gen_phase_list(text: str, req: ChatRequest, rng: random.Random, params: dict) -> str:
    if _is_followup(req):
        n = _int_field(req.last_user_message, r"List (\d+) more", 1)
        taken = req.last_user_message.split("differ from:", 1)[-1].lower()
        extra = [s for s in EXTRA_STEPS if s not in taken]
        rng.shuffle(extra)
        return "\n".join(f"{i}. {s}" for i, s in enumerate(extra[:n], start=1))
    domain = _field(text, r"^Domain: (.*)$", "recipes")
    k = _int_field(text, r"List (\d+) steps", 4)
    tasks = TASKS.get(domain) or [t for ts in TASKS.values() for t in ts]
    _, steps = rng.choice(tasks)
    chosen = steps[:k] if k <= len(steps) else steps + EXTRA_STEPS[: k - len(steps)]
    if len(chosen) > 1 and rng.random() < params.get("duplicate_rate", 0.05):
        chosen = chosen[:-1] + [chosen[0].capitalize()]
    return "\n".join(f"{i}. {s}" for i, s in enumerate(chosen, start=1))


_FOLLOW_QUESTIONS = ["What should I do next?", "What comes after that?", "And then?", "What is the next step?"]


def gen_interleaved_dialogue(text: str, req: ChatRequest, rng: random.Random, params: dict) -> str:
    domain = _field(text, r"conversation about: (.*)$", "a task")
    steps_block = text.split("Steps:", 1)[-1].split("Rules:", 1)[0]
    steps = re.findall(r"^\s*\d+\.\s*(.*)$", steps_block, re.MULTILINE)
    lines = []
    for i, step in enumerate(steps):
        q = f"How do I get started with {domain}?" if i == 0 else rng.choice(_FOLLOW_QUESTIONS)
        obj = step.split(" the ", 1)[-1] if " the " in step else step
        prompt = f"(({obj})), {rng.choice(SCENES)}, {rng.choice(LIGHTING)}, {rng.choice(STYLES)}"
        answer = f"{step[0].upper()}{step[1:]}. [{prompt}]"
        if not _is_followup(req) and rng.random() < params.get("overlong_rate", 0.0):
            answer = answer + " Take your time with this step." * 20
        lines += [f"Human: {q}", f"Assistant: {answer}"]
    return "\n".join(lines)


def gen_judge(text: str, req: ChatRequest, rng: random.Random, params: dict) -> str:
    def block(label: str) -> str:
        m = re.search(label + r":\n<<<\n(.*?)\n>>>", text, re.DOTALL)
        return m.group(1) if m else ""

    ref = set(re.findall(r"[a-z0-9]+", block("Reference answer").lower()))
    pred = set(re.findall(r"[a-z0-9]+", block("Predicted answer").lower()))
    sim = len(ref & pred) / len(ref | pred) if ref | pred else 0.0
    score = int(round(5 * sim)) if pred else 0
    return f"Score: {score}\nThe predicted answer overlaps the reference on {len(ref & pred)} words."


BUILTIN_GENERATORS: dict[str, Callable[[str, ChatRequest, random.Random, dict], str]] = {
    "prompt_gen": gen_prompt_list,
    "keyword_pool_gen": gen_keyword_list,
    "question_pool_gen": gen_question_list,
    "stage1_dialogue": gen_stage1_answer,
    "paired_prompt_gen": gen_pair_list,
    "pair_caption_gen": gen_pair_captions,
    "multi_image_dialogue": gen_multi_image_dialogue,
    "phase_gen": gen_phase_list,
    "interleaved_dialogue": gen_interleaved_dialogue,
    "judge": gen_judge,
}


# ---------------------------------------------------------------------------
# Scenario + backends
# ---------------------------------------------------------------------------


@dataclass
class KindScript:
    generator: str = "builtin"
    params: dict[str, Any] = field(default_factory=dict)
    replies: list[str] = field(default_factory=list)
    sequence: list[str] = field(default_factory=list)


@dataclass
class Scenario:
    defaults: dict[str, Any] = field(default_factory=dict)
    kinds: dict[str, KindScript] = field(default_factory=dict)
    unsafe_terms: list[str] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> Scenario:
        d = d or {}
        unknown = set(d) - {"defaults", "kinds", "unsafe_terms"}
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        kinds = {}
        for kind, spec in (d.get("kinds") or {}).items():
            if isinstance(spec, str):
                spec = {"replies": [spec]}
            kinds[kind] = KindScript(**spec)
        return cls(dict(d.get("defaults") or {}), kinds, list(d.get("unsafe_terms") or []))

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


class MockChatBackend:
    name = "mock-chat"

    def __init__(self, scenario: Scenario | dict | None = None):
        if not isinstance(scenario, Scenario):
            scenario = Scenario.from_dict(scenario)
        self.scenario = scenario
        self.stats = CallStats()
        self.calls_by_kind: dict[str, int] = {}
        self._lock = threading.Lock()
        self._positions: dict[str, int] = {}
        self.last_retries = 0

    def chat_complete(self, req: ChatRequest) -> str:
        kind = task_kind(req)
        self.stats.bump(calls=1)
        with self._lock:
            self.calls_by_kind[kind] = self.calls_by_kind.get(kind, 0) + 1
        script = self.scenario.kinds.get(kind, KindScript())
        if script.sequence:
            with self._lock:
                pos = self._positions.get(kind, 0)
                self._positions[kind] = pos + 1
            return script.sequence[min(pos, len(script.sequence) - 1)]
        rng = random.Random(request_seed(req))
        if script.replies:
            return script.replies[rng.randrange(len(script.replies))]
        gen = BUILTIN_GENERATORS.get(kind)
        if gen is None:
            return "1. ok"
        params = {**self.scenario.defaults, **script.params}
        first_user = next(c for r, c in req.messages if r == "user")
        return gen(first_user, req, rng, params)


def placeholder_png(prompt: str, seed: int, size: int = MOCK_IMAGE_SIZE) -> bytes:
    """Two-color diagonal gradient; colors come from a hash of (prompt, seed)."""
    h = hashlib.sha256(f"{seed}|{prompt}".encode("utf-8")).digest()
    c1, c2 = h[0:3], h[3:6]
    buf = bytearray()
    for y in range(size):
        for x in range(size):
            t = (x + y) / (2 * size - 2)
            buf += bytes(int(a + (b - a) * t) for a, b in zip(c1, c2))
    img = Image.frombytes("RGB", (size, size), bytes(buf))
    out = io.BytesIO()
    img.save(out, format="PNG", optimize=False, compress_level=9)
    return out.getvalue()


class MockT2IBackend:
    """Returns a fixed-size placeholder PNG whose bytes depend only on (prompt, seed)."""

    name = "mock-t2i"

    def __init__(self, unsafe_terms: list[str] | None = None):
        self.unsafe_terms = [t.lower() for t in unsafe_terms or []]
        self.stats = CallStats()

    def txt2img(self, req: T2IRequest) -> ImageArtifact:
        self.stats.bump(calls=1)
        lowered = req.prompt.lower()
        for term in self.unsafe_terms:
            if term in lowered:
                self.stats.bump(failures=1)
                raise SafetyRejected(f"mock-t2i refused {req.prompt!r}")
        data = placeholder_png(req.prompt, req.seed)
        return ImageArtifact(data, req.prompt, req.seed, MOCK_IMAGE_SIZE, MOCK_IMAGE_SIZE, backend=self.name)
