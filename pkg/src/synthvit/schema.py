"""Domain value types and the on-disk dataset / manifest formats.

Dataset files are JSON arrays of LLaVA-style records::

    {"id": ..., "image": "rel/path.png" | "images": [...],
     "conversations": [{"from": "human"|"gpt", "value": ...}, ...],
     "stage": 1|2,
     "provenance": {"ability_id": ..., "prompts": [...], "seed": ...}}

Manifests are JSON-lines: one header line followed by one line per committed
sample. See docs/formats.md for the byte-level contract.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import EmptyPrompt, FormatError, InvariantViolation

PLACEHOLDER = "<image>"

SPEAKERS = ("human", "assistant")
# LLaVA spells the assistant role "gpt" on disk.
_WIRE_SPEAKER = {"human": "human", "assistant": "gpt"}
_SPEAKER_FROM_WIRE = {"human": "human", "gpt": "assistant"}

DIALOGUE_KINDS = ("stage1_description", "abnormality", "multi_image", "interleaved")
STAGE_OF_KIND = {
    "stage1_description": 1,
    "abnormality": 1,
    "multi_image": 2,
    "interleaved": 2,
}

MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Keyword:
    text: str
    emphasis: int = 0
    weight: float | None = None

    def to_text(self) -> str:
        body = self.text if self.weight is None else f"{self.text}:{self.weight!r}"
        return "(" * self.emphasis + body + ")" * self.emphasis

    def normalized(self) -> str:
        return " ".join(self.text.lower().split())

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"text": self.text, "emphasis": self.emphasis}
        if self.weight is not None:
            d["weight"] = self.weight
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Keyword:
        return cls(d["text"], int(d.get("emphasis", 0)), d.get("weight"))


@dataclass(frozen=True)
class SDPrompt:
    """Ordered weighted keywords; the unit that drives an image and its dialogue.

    ``raw_text`` keeps whatever string the prompt was parsed from and takes no
    part in equality, so ``parse(p.text) == p`` holds for any parsed prompt.
    """

    keywords: tuple[Keyword, ...]
    raw_text: str = field(default="", compare=False)
    ability_id: str = ""
    pair_id: str | None = None

    def __post_init__(self) -> None:
        if not self.keywords:
            raise EmptyPrompt("prompt has no keywords")

    @property
    def text(self) -> str:
        return ", ".join(k.to_text() for k in self.keywords)

    def keyword_set(self) -> frozenset[str]:
        return frozenset(k.normalized() for k in self.keywords)

    def __len__(self) -> int:
        return len(self.keywords)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "text": self.text,
            "keywords": [k.to_dict() for k in self.keywords],
            "ability_id": self.ability_id,
        }
        if self.pair_id is not None:
            d["pair_id"] = self.pair_id
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SDPrompt:
        return cls(
            keywords=tuple(Keyword.from_dict(k) for k in d["keywords"]),
            raw_text=d.get("text", ""),
            ability_id=d.get("ability_id", ""),
            pair_id=d.get("pair_id"),
        )


# ---------------------------------------------------------------------------
# Dialogues
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str
    image_prompts: tuple[SDPrompt, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"speaker": self.speaker, "text": self.text}
        if self.image_prompts:
            d["image_prompts"] = [p.to_dict() for p in self.image_prompts]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Turn:
        return cls(
            d["speaker"],
            d["text"],
            tuple(SDPrompt.from_dict(p) for p in d.get("image_prompts", [])),
        )


@dataclass(frozen=True)
class Dialogue:
    """Conversation before images are bound.

    Construction does not enforce alternation; run ``validate_dialogue`` for
    the mechanical checks so that malformed generator output can be reported
    rather than crash.
    """

    turns: tuple[Turn, ...]
    kind: str

    @property
    def stage(self) -> int:
        return STAGE_OF_KIND[self.kind]

    def image_prompts(self) -> list[SDPrompt]:
        return [p for t in self.turns for p in t.image_prompts]

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "turns": [t.to_dict() for t in self.turns]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Dialogue:
        return cls(tuple(Turn.from_dict(t) for t in d["turns"]), d["kind"])


# ---------------------------------------------------------------------------
# Training samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Provenance:
    ability_id: str
    prompts: tuple[str, ...]
    seed: int

    def to_dict(self) -> dict[str, Any]:
        return {"ability_id": self.ability_id, "prompts": list(self.prompts), "seed": self.seed}


@dataclass(frozen=True)
class TrainingSample:
    id: str
    stage: int
    image_refs: tuple[str, ...]
    conversations: tuple[Turn, ...]
    provenance: Provenance


def sample_id(ability_id: str, counter: int) -> str:
    return f"{ability_id}-{counter:06d}"


def count_placeholders(turns: Iterable[Turn]) -> int:
    return sum(t.text.count(PLACEHOLDER) for t in turns)


def sample_problems(sample: TrainingSample) -> list[str]:
    problems = []
    n = count_placeholders(sample.conversations)
    if n != len(sample.image_refs):
        problems.append(f"{n} placeholder tokens but {len(sample.image_refs)} image refs")
    if sample.stage not in (1, 2):
        problems.append(f"stage must be 1 or 2, got {sample.stage}")
    if not sample.id:
        problems.append("empty id")
    for i, t in enumerate(sample.conversations):
        if t.speaker not in SPEAKERS:
            problems.append(f"conversations[{i}]: unknown speaker {t.speaker!r}")
    return problems


def encode_sample(sample: TrainingSample) -> dict[str, Any]:
    problems = sample_problems(sample)
    if problems:
        raise InvariantViolation(f"{sample.id}: " + "; ".join(problems))
    out: dict[str, Any] = {"id": sample.id}
    if sample.stage == 1 and len(sample.image_refs) == 1:
        out["image"] = sample.image_refs[0]
    elif sample.image_refs:
        out["images"] = list(sample.image_refs)
    out["conversations"] = [
        {"from": _WIRE_SPEAKER[t.speaker], "value": t.text} for t in sample.conversations
    ]
    out["stage"] = sample.stage
    out["provenance"] = sample.provenance.to_dict()
    return out


def _require(obj: dict, key: str, typ: type | tuple[type, ...], path: str) -> Any:
    if key not in obj:
        raise FormatError(path + key, "missing")
    value = obj[key]
    # bool is an int subclass; never accept it where a number is expected
    if not isinstance(value, typ) or (isinstance(value, bool) and typ is int):
        raise FormatError(path + key, f"expected {_type_name(typ)}, got {type(value).__name__}")
    return value


def _type_name(typ: type | tuple[type, ...]) -> str:
    if isinstance(typ, tuple):
        return "|".join(t.__name__ for t in typ)
    return typ.__name__


def decode_sample(obj: Any) -> TrainingSample:
    if not isinstance(obj, dict):
        raise FormatError("$", f"expected object, got {type(obj).__name__}")
    sid = _require(obj, "id", str, "")
    if "image" in obj and "images" in obj:
        raise FormatError("image", "both 'image' and 'images' present")
    if "image" in obj:
        refs: tuple[str, ...] = (_require(obj, "image", str, ""),)
    elif "images" in obj:
        images = _require(obj, "images", list, "")
        for i, ref in enumerate(images):
            if not isinstance(ref, str):
                raise FormatError(f"images[{i}]", "expected str")
        refs = tuple(images)
    else:
        refs = ()

    convs = _require(obj, "conversations", list, "")
    turns = []
    for i, entry in enumerate(convs):
        path = f"conversations[{i}]"
        if not isinstance(entry, dict):
            raise FormatError(path, "expected object")
        who = _require(entry, "from", str, path + ".")
        if who not in _SPEAKER_FROM_WIRE:
            raise FormatError(path + ".from", f"unknown speaker {who!r}")
        turns.append(Turn(_SPEAKER_FROM_WIRE[who], _require(entry, "value", str, path + ".")))

    stage = _require(obj, "stage", int, "")
    if stage not in (1, 2):
        raise FormatError("stage", f"expected 1 or 2, got {stage}")
    prov = _require(obj, "provenance", dict, "")
    prompts = _require(prov, "prompts", list, "provenance.")
    for i, p in enumerate(prompts):
        if not isinstance(p, str):
            raise FormatError(f"provenance.prompts[{i}]", "expected str")
    provenance = Provenance(
        _require(prov, "ability_id", str, "provenance."),
        tuple(prompts),
        _require(prov, "seed", int, "provenance."),
    )
    return TrainingSample(sid, stage, refs, tuple(turns), provenance)


def dump_dataset(samples: Iterable[dict[str, Any]]) -> str:
    return json.dumps(list(samples), ensure_ascii=False, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class Violation:
    index: int | None
    code: str
    message: str

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "code": self.code, "message": self.message}


@dataclass
class ValidationReport:
    count: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, index: int | None, code: str, message: str) -> None:
        self.violations.append(Violation(index, code, message))

    def to_dict(self) -> dict[str, Any]:
        return {"count": self.count, "violations": [v.to_dict() for v in self.violations]}


def validate_dataset_file(path: str | os.PathLike) -> ValidationReport:
    """Decode every record of a dataset file and collect per-sample problems."""
    text = Path(path).read_text(encoding="utf-8")
    report = ValidationReport()
    if not text.strip():
        return report
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        report.add(None, "Json", str(exc))
        return report
    if not isinstance(data, list):
        report.add(None, "Json", "dataset file must hold a JSON array")
        return report

    report.count = len(data)
    first_seen: dict[str, int] = {}
    for i, obj in enumerate(data):
        try:
            sample = decode_sample(obj)
        except FormatError as exc:
            report.add(i, "Format", str(exc))
            continue
        for problem in sample_problems(sample):
            report.add(i, "Invariant", problem)
        if sample.id in first_seen:
            report.add(i, "DuplicateId", f"id {sample.id!r} at indices {first_seen[sample.id]} and {i}")
        else:
            first_seen[sample.id] = i
    return report


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    """Committed sample ids for one job.

    Counters are derived from the id -> ability mapping, so they always sum
    to the number of completed ids.
    """

    job_id: str
    config_hash: str
    entries: dict[str, str] = field(default_factory=dict)
    _counts: dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        for ability in self.entries.values():
            self._counts[ability] = self._counts.get(ability, 0) + 1

    @property
    def completed_ids(self) -> set[str]:
        return set(self.entries)

    @property
    def counters(self) -> dict[str, int]:
        return dict(self._counts)

    def count(self, ability_id: str) -> int:
        return self._counts.get(ability_id, 0)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.entries

    def record(self, sample_id: str, ability_id: str) -> bool:
        """Add a completed sample; returns False if the id was already present."""
        if sample_id in self.entries:
            return False
        self.entries[sample_id] = ability_id
        self._counts[ability_id] = self._counts.get(ability_id, 0) + 1
        return True

    def merge(self, other: Manifest) -> Manifest:
        if other.config_hash != self.config_hash:
            raise InvariantViolation("cannot merge manifests with different config hashes")
        merged = Manifest(self.job_id, self.config_hash, dict(self.entries))
        for sid, ability in other.entries.items():
            merged.record(sid, ability)
        return merged

    def header_line(self) -> str:
        return _json_line(
            {"type": "header", "version": MANIFEST_VERSION, "job_id": self.job_id,
             "config_hash": self.config_hash}
        )

    def to_text(self) -> str:
        lines = [self.header_line()]
        lines += [entry_line(sid, ability) for sid, ability in self.entries.items()]
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str) -> Manifest:
        lines = text.split("\n")
        torn_tail = not text.endswith("\n")
        manifest: Manifest | None = None
        for n, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                # a crash mid-append leaves at most one partial trailing line
                if torn_tail and n == len(lines):
                    break
                raise FormatError("manifest", "invalid JSON", line=n) from None
            if manifest is None:
                if rec.get("type") != "header":
                    raise FormatError("type", "first manifest line must be a header", line=n)
                manifest = cls(rec["job_id"], rec["config_hash"])
            elif rec.get("type") == "sample":
                manifest.record(rec["id"], rec["ability_id"])
            else:
                raise FormatError("type", f"unexpected record type {rec.get('type')!r}", line=n)
        if manifest is None:
            raise FormatError("manifest", "no header line")
        return manifest

    @classmethod
    def load(cls, path: str | os.PathLike) -> Manifest:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.to_text())


def entry_line(sample_id_: str, ability_id: str) -> str:
    return _json_line({"type": "sample", "id": sample_id_, "ability_id": ability_id})


def _json_line(obj: dict[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n"


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


_SLUG = re.compile(r"^[a-z0-9][a-z0-9_]*$")


def is_slug(value: str) -> bool:
    return bool(_SLUG.match(value))
