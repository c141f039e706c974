"""Rubric-based LLM-judge scoring of model answers on curated benchmarks.

Benchmark files are JSON-lines. An optional first line
``{"categories": ["color", ...]}`` fixes the category order used in
reports; without it categories are listed in order of first appearance.
Every other line is one case::

    {"case_id": "color-001", "category": "color", "image_refs": ["img/1.png"],
     "question": "...", "reference_answer": "..."}
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import yaml

from .backends import JUDGE_TEMPERATURE, ChatBackend, ChatRequest
from .errors import Exhausted, FormatError, MissingCase, OutOfRange, SpecError, Unparseable
from .templates import TemplateKind, TemplateSet, data_path, fill_template, default_templates

log = logging.getLogger(__name__)

SCORE_LEVELS = (0, 1, 2, 3, 4, 5)

FORMAT_REMINDER = (
    'Your reply could not be read. Answer again and start the first line with "Score: <k>", '
    "where k is one integer from 0 to 5."
)


# ---------------------------------------------------------------------------
# Rubric
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Exemplar:
    prediction: str
    reference: str
    score: int


@dataclass(frozen=True)
class RubricLevel:
    score: int
    criteria: str
    exemplars: tuple[Exemplar, ...] = ()


@dataclass(frozen=True)
class ScoreRubric:
    levels: tuple[RubricLevel, ...]

    def __post_init__(self) -> None:
        scores = [lv.score for lv in self.levels]
        if sorted(scores) != list(SCORE_LEVELS):
            raise ValueError(f"rubric must define scores 0..5 exactly once, got {scores}")
        for lv in self.levels:
            if not lv.criteria.strip():
                raise ValueError(f"level {lv.score} has empty criteria")
            for ex in lv.exemplars:
                if ex.score not in SCORE_LEVELS:
                    raise ValueError(f"exemplar score {ex.score} outside 0..5")

    def ordered(self) -> list[RubricLevel]:
        return sorted(self.levels, key=lambda lv: lv.score)

    def to_dict(self) -> dict[str, Any]:
        return {
            "levels": [
                {
                    "score": lv.score,
                    "criteria": lv.criteria,
                    "exemplars": [
                        {"prediction": e.prediction, "reference": e.reference, "score": e.score}
                        for e in lv.exemplars
                    ],
                }
                for lv in self.ordered()
            ]
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], file: str = "<rubric>") -> ScoreRubric:
        raw_levels = d.get("levels") if isinstance(d, Mapping) else None
        if not isinstance(raw_levels, list):
            raise SpecError(file, "levels", "expected a list of 6 levels")
        levels = []
        for i, lv in enumerate(raw_levels):
            if not isinstance(lv, Mapping) or "score" not in lv or "criteria" not in lv:
                raise SpecError(file, f"levels[{i}]", "needs score and criteria")
            exemplars = []
            for j, ex in enumerate(lv.get("exemplars") or []):
                try:
                    score = ex.get("score", lv["score"])
                    exemplars.append(Exemplar(str(ex["prediction"]), str(ex["reference"]), int(score)))
                except (KeyError, TypeError, ValueError, AttributeError) as exc:
                    raise SpecError(file, f"levels[{i}].exemplars[{j}]", f"bad exemplar: {exc}") from exc
            levels.append(RubricLevel(int(lv["score"]), str(lv["criteria"]).strip(), tuple(exemplars)))
        try:
            return cls(tuple(levels))
        except ValueError as exc:
            raise SpecError(file, "levels", str(exc)) from exc


def load_rubric(path: str | Path | None = None) -> ScoreRubric:
    path = Path(path) if path else data_path("rubric.yaml")
    return ScoreRubric.from_dict(yaml.safe_load(path.read_text(encoding="utf-8")), str(path))


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalCase:
    case_id: str
    category: str
    image_refs: tuple[str, ...]
    question: str
    reference_answer: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "category": self.category,
            "image_refs": list(self.image_refs),
            "question": self.question,
            "reference_answer": self.reference_answer,
        }


@dataclass(frozen=True)
class EvalResult:
    case_id: str
    model_answer: str
    score: int
    judge_raw: str
    retries: int = 0

    def __post_init__(self) -> None:
        if self.score not in SCORE_LEVELS:
            raise OutOfRange(f"{self.case_id}: score {self.score} outside 0..5")

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "model_answer": self.model_answer,
            "score": self.score,
            "judge_raw": self.judge_raw,
            "retries": self.retries,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalResult:
        return cls(d["case_id"], d["model_answer"], int(d["score"]), d.get("judge_raw", ""), int(d.get("retries", 0)))


@dataclass
class Benchmark:
    cases: list[EvalCase]
    categories: list[str]

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)


_CASE_FIELDS = ("case_id", "category", "question", "reference_answer")


def load_benchmark(path: str | Path) -> Benchmark:
    path = Path(path)
    cases: list[EvalCase] = []
    declared: list[str] | None = None
    seen: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(str(path), f"invalid JSON: {exc.msg}", line=lineno) from exc
        if not isinstance(row, dict):
            raise FormatError(str(path), "expected an object", line=lineno)
        if "categories" in row and "case_id" not in row:
            if declared is not None or cases:
                raise FormatError(str(path), "category header must be the first line", line=lineno)
            cats = row["categories"]
            if not isinstance(cats, list) or not all(isinstance(c, str) for c in cats):
                raise FormatError(str(path), "categories must be a list of strings", line=lineno)
            declared = list(cats)
            continue
        for key in _CASE_FIELDS:
            if not isinstance(row.get(key), str) or not row[key].strip():
                raise FormatError(str(path), f"missing or empty {key}", line=lineno)
        refs = row.get("image_refs", [])
        if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
            raise FormatError(str(path), "image_refs must be a list of strings", line=lineno)
        cid = row["case_id"]
        if cid in seen:
            raise FormatError(str(path), f"duplicate case_id {cid!r} (first on line {seen[cid]})", line=lineno)
        seen[cid] = lineno
        if declared is not None and row["category"] not in declared:
            raise FormatError(str(path), f"category {row['category']!r} not in header", line=lineno)
        cases.append(EvalCase(cid, row["category"], tuple(refs), row["question"], row["reference_answer"]))
    if declared is None:
        declared = list(dict.fromkeys(c.category for c in cases))
    return Benchmark(cases, declared)


def load_answers(path: str | Path) -> dict[str, str]:
    """Model answers as JSON-lines ``{"case_id": ..., "answer": ...}``."""
    path = Path(path)
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            out[str(row["case_id"])] = str(row["answer"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(str(path), f"bad answer row: {exc}", line=lineno) from exc
    return out


# ---------------------------------------------------------------------------
# Judge prompt and reply parsing
# ---------------------------------------------------------------------------


def format_criteria(rubric: ScoreRubric) -> str:
    return "\n".join(f"Score {lv.score}: {lv.criteria}" for lv in rubric.ordered())


def format_exemplars(rubric: ScoreRubric) -> str:
    blocks = []
    n = 0
    for lv in rubric.ordered():
        for ex in lv.exemplars:
            n += 1
            blocks.append(
                f"Example {n}:\nReference: {ex.reference}\nPrediction: {ex.prediction}\nScore: {ex.score}"
            )
    return "\n\n".join(blocks) if blocks else "(no examples)"


def build_judge_prompt(
    rubric: ScoreRubric,
    case: EvalCase,
    model_answer: str,
    *,
    templates: TemplateSet | None = None,
) -> ChatRequest:
    templates = templates or default_templates()
    text = fill_template(
        templates[TemplateKind.JUDGE],
        {
            "criteria": format_criteria(rubric),
            "exemplars": format_exemplars(rubric),
            "question": case.question,
            "reference": case.reference_answer,
            "prediction": model_answer,
        },
    )
    return ChatRequest.user(text, temperature=JUDGE_TEMPERATURE)


_SCORE_MARKER = re.compile(r"\bscore", re.IGNORECASE)
# an integer (optionally with an all-zero fraction) not glued to other digits,
# letters or a decimal point
_NUMBER = re.compile(r"(?<![\w.])([+-]?\d+)(?:\.(\d+))?(?![\w]|\.\d)")
_AFTER_MARKER = re.compile(r"[\s*_:=–—#>\[\](){}\"'`]*(?:(?:is|of)\s+)?")


def _as_int(m: re.Match) -> int | None:
    """Integral value of a number match, or None for a genuine fraction like 3.5."""
    frac = m.group(2)
    if frac and frac.strip("0"):
        return None
    digits = m.group(1).lstrip("+-").lstrip("0") or "0"
    if len(digits) > 6:
        # huge literals would trip int()'s digit limit; any of them is out of range
        return 10**6
    return int(m.group(1))


def parse_judge_score(reply: str) -> int:
    """Score from a judge reply.

    The first number directly after a ``Score`` marker wins; failing that,
    the first standalone integer anywhere. Values outside 0..5 raise
    OutOfRange, replies without a usable integer raise Unparseable.
    """
    if not isinstance(reply, str):
        raise Unparseable(f"reply is {type(reply).__name__}, not text")
    for marker in _SCORE_MARKER.finditer(reply):
        rest = reply[marker.end():]
        lead = _AFTER_MARKER.match(rest)
        start = lead.end() if lead else 0
        m = _NUMBER.match(rest, start)
        if m:
            value = _as_int(m)
            if value is None:
                raise OutOfRange(f"non-integral score {m.group(0)!r}")
            return _checked(value)
    for m in _NUMBER.finditer(reply):
        value = _as_int(m)
        if value is None:
            continue
        return _checked(value)
    raise Unparseable(f"no score in reply: {reply[:80]!r}")


def _checked(value: int) -> int:
    if value not in SCORE_LEVELS:
        raise OutOfRange(f"score {value} outside 0..5")
    return value


def score_case(
    case: EvalCase,
    model_answer: str,
    rubric: ScoreRubric,
    judge: ChatBackend,
    *,
    templates: TemplateSet | None = None,
) -> EvalResult:
    """One judge call, plus one reprompt with a format reminder if the reply can't be read."""
    req = build_judge_prompt(rubric, case, model_answer, templates=templates)
    raws = []
    for attempt in range(2):
        reply = judge.chat_complete(req)
        raws.append(reply)
        try:
            score = parse_judge_score(reply)
        except (Unparseable, OutOfRange) as exc:
            log.info("%s: judge reply unusable (%s)", case.case_id, exc)
            req = req.followup(reply, FORMAT_REMINDER)
            continue
        return EvalResult(case.case_id, model_answer, score, "\n---\n".join(raws), retries=attempt)
    raise Exhausted(f"{case.case_id}: no usable judge score after 2 replies", attempts=2)


def score_benchmark(
    bench: Benchmark | Sequence[EvalCase],
    answers: Mapping[str, str],
    rubric: ScoreRubric,
    judge: ChatBackend,
    *,
    templates: TemplateSet | None = None,
    max_workers: int = 4,
) -> list[EvalResult]:
    """Score every case in parallel; results come back in case order."""
    cases = list(bench)
    missing = [c.case_id for c in cases if c.case_id not in answers]
    if missing:
        raise MissingCase(f"no model answer for {len(missing)} case(s), e.g. {missing[0]!r}")

    def one(case: EvalCase) -> EvalResult:
        return score_case(case, answers[case.case_id], rubric, judge, templates=templates)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        return list(pool.map(one, cases))


# ---------------------------------------------------------------------------
# Aggregation and reports
# ---------------------------------------------------------------------------


def round_half_up(value: Fraction | float | Decimal, places: int = 2) -> Decimal:
    if isinstance(value, Fraction):
        d = Decimal(value.numerator) / Decimal(value.denominator)
    else:
        d = Decimal(str(value))
    return d.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass
class ScoreSummary:
    """Exact means (Fractions) plus 2-decimal half-up display values."""

    category_means: dict[str, Fraction]
    counts: dict[str, int]
    overall: Fraction

    @property
    def rounded(self) -> dict[str, Decimal]:
        return {c: round_half_up(m) for c, m in self.category_means.items()}

    @property
    def overall_rounded(self) -> Decimal:
        return round_half_up(self.overall)

    def to_dict(self) -> dict[str, Any]:
        return {
            "categories": [
                {
                    "category": c,
                    "n": self.counts.get(c, 0),
                    "mean": str(round_half_up(m)),
                    "mean_exact": float(m),
                    "mean_fraction": str(m),
                }
                for c, m in self.category_means.items()
            ],
            "overall": str(self.overall_rounded),
            "overall_exact": float(self.overall),
            "overall_fraction": str(self.overall),
        }


def mean_of_means(category_means: Mapping[str, Fraction | float | int | str]) -> Fraction:
    """Overall metric: unweighted mean of the per-category means."""
    if not category_means:
        raise ValueError("no categories to average")
    values = [v if isinstance(v, Fraction) else Fraction(str(v)) for v in category_means.values()]
    return sum(values, Fraction(0)) / len(values)


def aggregate_scores(
    results: Iterable[EvalResult],
    cases: Benchmark | Sequence[EvalCase],
    categories: Sequence[str] | None = None,
) -> ScoreSummary:
    """Per-category mean score and the mean of those means.

    Categories without any result are left out of both. Every result must
    name a known case, otherwise MissingCase.
    """
    case_list = list(cases)
    if categories is None:
        categories = cases.categories if isinstance(cases, Benchmark) else None
    by_id = {c.case_id: c for c in case_list}
    sums: dict[str, int] = {}
    counts: dict[str, int] = {}
    for r in results:
        case = by_id.get(r.case_id)
        if case is None:
            raise MissingCase(f"result for unknown case {r.case_id!r}")
        sums[case.category] = sums.get(case.category, 0) + r.score
        counts[case.category] = counts.get(case.category, 0) + 1
    order = list(categories) if categories else list(dict.fromkeys(c.category for c in case_list))
    order += [c for c in counts if c not in order]
    means = {c: Fraction(sums[c], counts[c]) for c in order if counts.get(c)}
    if not means:
        raise MissingCase("no results to aggregate")
    return ScoreSummary(means, counts, mean_of_means(means))


def summary_table(summary: ScoreSummary) -> str:
    """Plain-text table, one row per category plus the overall mean."""
    rows = [(c, str(summary.counts.get(c, 0)), str(v)) for c, v in summary.rounded.items()]
    rows.append(("overall", str(sum(summary.counts.values())), str(summary.overall_rounded)))
    w0 = max(len("category"), *(len(r[0]) for r in rows))
    w1 = max(len("n"), *(len(r[1]) for r in rows))
    lines = [f"{'category':<{w0}}  {'n':>{w1}}  score", f"{'-' * w0}  {'-' * w1}  -----"]
    for name, n, score in rows:
        lines.append(f"{name:<{w0}}  {n:>{w1}}  {score:>5}")
    return "\n".join(lines) + "\n"


def summary_csv(summary: ScoreSummary) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["category", "n", "mean"])
    for c, v in summary.rounded.items():
        writer.writerow([c, summary.counts.get(c, 0), str(v)])
    writer.writerow(["overall", sum(summary.counts.values()), str(summary.overall_rounded)])
    return buf.getvalue()


@dataclass
class EvalReport:
    summary: ScoreSummary
    results: list[EvalResult] = field(default_factory=list)
    judge_model: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "judge_model": self.judge_model,
            "judge_temperature": JUDGE_TEMPERATURE,
            **self.summary.to_dict(),
            "results": [r.to_dict() for r in self.results],
        }


def write_eval_report(
    report: EvalReport,
    out_dir: str | Path,
    *,
    plot: Callable[[ScoreSummary, Path], Any] | None = None,
) -> dict[str, Path]:
    """Write report.json, scores.csv, scores.txt and (optionally) a chart into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / "eval_report.json",
        "csv": out_dir / "eval_scores.csv",
        "table": out_dir / "eval_scores.txt",
    }
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    paths["csv"].write_text(summary_csv(report.summary), encoding="utf-8")
    paths["table"].write_text(summary_table(report.summary), encoding="utf-8")
    if plot is not None:
        paths["figure"] = out_dir / "eval_scores.png"
        plot(report.summary, paths["figure"])
    return paths


def load_eval_report(path: str | Path) -> tuple[ScoreSummary, list[EvalResult]]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    results = [EvalResult.from_dict(r) for r in d.get("results", [])]
    means = {c["category"]: Fraction(c["mean_fraction"]) for c in d["categories"]}
    counts = {c["category"]: int(c["n"]) for c in d["categories"]}
    return ScoreSummary(means, counts, Fraction(d["overall_fraction"])), results
