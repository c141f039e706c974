"""Job configuration: one YAML file, defaults filled in, unknown keys refused.

Relative input paths (``abilities_dir``, ``templates_dir``,
``mock.scenario``) are resolved against the directory of the config file.
``output_dir`` is resolved against the working directory, so the same
config can write to different places.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .assembler import ImageSettings
from .backends import BackendPolicy
from .dialogues import QUESTION_FORMS, DialogueLimits, RelationKind
from .errors import ConfigError
from .prompts import DEFAULT_BLOCKLIST, FilterConfig
from .templates import DEFAULT_ROTATION_FRACTION, DEFAULT_ROTATION_INTERVAL

CONFIG_VERSION = 1

# Every accepted key with its default. A nested dict means a nested section;
# ``None`` leaves the value unset.
DEFAULTS: dict[str, Any] = {
    "job_id": "job",
    "seed": 0,
    "abilities_dir": None,  # packaged abilities
    "templates_dir": None,  # packaged templates
    "output_dir": "out",
    "abilities": None,  # subset of ability ids; all loaded abilities when unset
    "backends": {
        "chat": {"url": "http://localhost:8000/v1", "model": "gpt-3.5-turbo", "api_key_env": "CHAT_API_KEY"},
        "t2i": {"url": "http://localhost:7860/sdapi/v1/txt2img", "api_key_env": "T2I_API_KEY"},
        "judge": {"url": "http://localhost:8000/v1", "model": "gpt-4", "api_key_env": "JUDGE_API_KEY"},
    },
    "policies": {
        "chat": {"max_concurrent": 4, "requests_per_minute": 60, "max_retries": 3, "backoff_base": 1.0},
        "t2i": {"max_concurrent": 2, "requests_per_minute": 30, "max_retries": 3, "backoff_base": 1.0},
        "judge": {"max_concurrent": 4, "requests_per_minute": 60, "max_retries": 3, "backoff_base": 1.0},
    },
    "filter": {
        "max_keywords": 10,
        "duplicate_threshold": 0.7,
        "non_visual_blocklist": list(DEFAULT_BLOCKLIST),
        "max_prompt_chars": 400,
    },
    "limits": {"max_answer_chars": 500, "allowed_question_forms": list(QUESTION_FORMS)},
    "pool": {
        "capacity": 8,
        "rotation_interval": DEFAULT_ROTATION_INTERVAL,
        "rotation_fraction": DEFAULT_ROTATION_FRACTION,
    },
    "generation": {
        "prompts_per_call": 20,
        "pairs_per_call": 5,
        "new_keywords": 10,
        "new_questions": 5,
        "max_batches": 50,
        "multi_image_rounds": 2,
        "phases": 4,
        "domains": ["recipes", "everyday objects"],
        "workers": 4,
    },
    "images": {"width": 512, "height": 512, "steps": 30, "negative_prompt": "blurry, low quality, text, watermark"},
    "stage_plan": {
        "stage1": {"per_ability": 10, "targets": None, "from_specs": False, "output": "stage1.json"},
        "stage2": {
            "multi_image": {"similarity": 2, "difference": 2, "logical_relation": 1},
            "interleaved": 3,
            "output": "stage2.json",
        },
    },
    "mock": {"scenario": None},
}

# sections whose keys are user-chosen names rather than fixed fields
_FREE_KEYS = {"stage_plan.stage1.targets", "stage_plan.stage2.multi_image"}


def _merge(defaults: Any, given: Any, path: str) -> Any:
    if isinstance(defaults, dict) and path not in _FREE_KEYS:
        if given is None:
            return copy.deepcopy(defaults)
        if not isinstance(given, Mapping):
            raise ConfigError(path, "expected a mapping")
        for key in given:
            if key not in defaults:
                raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")
        return {k: _merge(v, given.get(k), f"{path}.{k}" if path else k) for k, v in defaults.items()}
    return copy.deepcopy(defaults) if given is None else given


def _number(d: Mapping[str, Any], key: str, path: str, *, lo: float | None = None, hi: float | None = None,
            integer: bool = False) -> None:
    v = d[key]
    full = f"{path}.{key}" if path else key
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
        raise ConfigError(full, f"expected {'an integer' if integer else 'a number'}, got {v!r}")
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ConfigError(full, f"{v} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str = ""
    api_key_env: str = ""


@dataclass(frozen=True)
class PoolConfig:
    capacity: int = 8
    rotation_interval: int = DEFAULT_ROTATION_INTERVAL
    rotation_fraction: float = DEFAULT_ROTATION_FRACTION


@dataclass(frozen=True)
class GenerationConfig:
    prompts_per_call: int = 20
    pairs_per_call: int = 5
    new_keywords: int = 10
    new_questions: int = 5
    max_batches: int = 50
    multi_image_rounds: int = 2
    phases: int = 4
    domains: tuple[str, ...] = ("recipes", "everyday objects")
    workers: int = 4


@dataclass(frozen=True)
class StagePlanConfig:
    stage1_per_ability: int = 10
    stage1_targets: dict[str, int] | None = None
    stage1_from_specs: bool = False
    stage1_output: str = "stage1.json"
    multi_image: dict[str, int] = field(default_factory=dict)
    interleaved: int = 0
    stage2_output: str = "stage2.json"

    def stage1_plan(self, ability_ids: list[str], spec_targets: Mapping[str, int] | None = None) -> dict[str, int]:
        """Targets in ability order: explicit ``targets``, else the specs' own
        ``target_count`` when ``from_specs`` is set, else ``per_ability``."""
        if self.stage1_targets is not None:
            return {a: self.stage1_targets[a] for a in ability_ids if a in self.stage1_targets}
        if self.stage1_from_specs and spec_targets is not None:
            return {a: spec_targets[a] for a in ability_ids}
        return {a: self.stage1_per_ability for a in ability_ids}

    def stage2_plan(self) -> dict[str, int]:
        plan = {f"multi_image_{r}": n for r, n in self.multi_image.items() if n > 0}
        if self.interleaved > 0:
            plan["interleaved"] = self.interleaved
        return plan


@dataclass(frozen=True)
class JobConfig:
    job_id: str
    seed: int
    abilities_dir: Path | None
    templates_dir: Path | None
    output_dir: Path
    abilities: tuple[str, ...] | None
    backends: dict[str, EndpointConfig]
    policies: dict[str, BackendPolicy]
    filter: FilterConfig
    limits: DialogueLimits
    pool: PoolConfig
    generation: GenerationConfig
    images: ImageSettings
    stage_plan: StagePlanConfig
    mock_scenario: Path | None = None
    raw: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)
    source: Path | None = field(default=None, compare=False)

    def config_hash(self, *, mock: bool = False) -> str:
        """Hash of every setting that shapes the output; output_dir is left out."""
        payload = {k: v for k, v in self.raw.items() if k != "output_dir"}
        payload["_mock"] = bool(mock)
        payload["_version"] = CONFIG_VERSION
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_overrides(self, *, seed: int | None = None, output_dir: str | Path | None = None) -> JobConfig:
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = seed
        if output_dir is not None:
            raw["output_dir"] = str(output_dir)
        base = self.source.parent if self.source else Path.cwd()
        return build_config(raw, base_dir=base, source=self.source)

    @property
    def manifest_path(self) -> Path:
        return self.output_dir / "manifest.jsonl"


def _resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value).expanduser()
    return p if p.is_absolute() else (base / p)


def build_config(given: Mapping[str, Any] | None, *, base_dir: Path | None = None, source: Path | None = None) -> JobConfig:
    """Merge ``given`` over the defaults, validate, and resolve paths."""
    base_dir = base_dir or Path.cwd()
    raw = _merge(DEFAULTS, dict(given or {}), "")

    if not isinstance(raw["job_id"], str) or not raw["job_id"].strip():
        raise ConfigError("job_id", "must be a non-empty string")
    _number(raw, "seed", "", lo=0, integer=True)

    f = raw["filter"]
    _number(f, "max_keywords", "filter", lo=1, integer=True)
    _number(f, "duplicate_threshold", "filter", lo=0, hi=1)
    _number(f, "max_prompt_chars", "filter", lo=1, integer=True)
    if not isinstance(f["non_visual_blocklist"], list):
        raise ConfigError("filter.non_visual_blocklist", "expected a list")
    lim = raw["limits"]
    _number(lim, "max_answer_chars", "limits", lo=1, integer=True)
    bad_forms = set(lim["allowed_question_forms"] or []) - set(QUESTION_FORMS)
    if bad_forms:
        raise ConfigError("limits.allowed_question_forms", f"unknown forms {sorted(bad_forms)}")
    pool = raw["pool"]
    _number(pool, "capacity", "pool", lo=1, integer=True)
    _number(pool, "rotation_interval", "pool", lo=1, integer=True)
    _number(pool, "rotation_fraction", "pool", lo=0, hi=1)
    gen = raw["generation"]
    for key in ("prompts_per_call", "pairs_per_call", "max_batches", "multi_image_rounds", "phases", "workers"):
        _number(gen, key, "generation", lo=1, integer=True)
    for key in ("new_keywords", "new_questions"):
        _number(gen, key, "generation", lo=0, integer=True)
    if not gen["domains"] or not all(isinstance(d, str) and d.strip() for d in gen["domains"]):
        raise ConfigError("generation.domains", "expected a non-empty list of strings")
    img = raw["images"]
    for key in ("width", "height", "steps"):
        _number(img, key, "images", lo=1, integer=True)

    s1 = raw["stage_plan"]["stage1"]
    _number(s1, "per_ability", "stage_plan.stage1", lo=0, integer=True)
    if s1["targets"] is not None:
        if not isinstance(s1["targets"], Mapping):
            raise ConfigError("stage_plan.stage1.targets", "expected a mapping of ability id to count")
        for k in s1["targets"]:
            _number(s1["targets"], k, "stage_plan.stage1.targets", lo=0, integer=True)
    s2 = raw["stage_plan"]["stage2"]
    if not isinstance(s2["multi_image"], Mapping):
        raise ConfigError("stage_plan.stage2.multi_image", "expected a mapping of relation to count")
    relations = {r.value for r in RelationKind}
    for k in s2["multi_image"]:
        if k not in relations:
            raise ConfigError(f"stage_plan.stage2.multi_image.{k}", f"unknown relation, expected one of {sorted(relations)}")
        _number(s2["multi_image"], k, "stage_plan.stage2.multi_image", lo=0, integer=True)
    _number(s2, "interleaved", "stage_plan.stage2", lo=0, integer=True)

    policies = {}
    for name, p in raw["policies"].items():
        for key in ("max_concurrent", "requests_per_minute"):
            _number(p, key, f"policies.{name}", lo=1, integer=True)
        _number(p, "max_retries", f"policies.{name}", lo=0, integer=True)
        _number(p, "backoff_base", f"policies.{name}", lo=0)
        if p["backoff_base"] <= 0:
            raise ConfigError(f"policies.{name}.backoff_base", "must be > 0")
        policies[name] = BackendPolicy(p["max_concurrent"], p["requests_per_minute"], p["max_retries"], p["backoff_base"])

    abilities_dir = _resolve(base_dir, raw["abilities_dir"])
    templates_dir = _resolve(base_dir, raw["templates_dir"])
    scenario = _resolve(base_dir, raw["mock"]["scenario"])
    for key, path in (("abilities_dir", abilities_dir), ("templates_dir", templates_dir), ("mock.scenario", scenario)):
        if path is not None and not path.exists():
            raise ConfigError(key, f"path does not exist: {path}")

    abilities = raw["abilities"]
    if abilities is not None and (not isinstance(abilities, list) or not all(isinstance(a, str) for a in abilities)):
        raise ConfigError("abilities", "expected a list of ability ids")

    return JobConfig(
        job_id=raw["job_id"],
        seed=raw["seed"],
        abilities_dir=abilities_dir,
        templates_dir=templates_dir,
        output_dir=Path(raw["output_dir"]),
        abilities=tuple(abilities) if abilities is not None else None,
        backends={k: EndpointConfig(**v) for k, v in raw["backends"].items()},
        policies=policies,
        filter=FilterConfig(f["max_keywords"], float(f["duplicate_threshold"]), tuple(f["non_visual_blocklist"]),
                            f["max_prompt_chars"]),
        limits=DialogueLimits(lim["max_answer_chars"], frozenset(lim["allowed_question_forms"] or QUESTION_FORMS)),
        pool=PoolConfig(pool["capacity"], pool["rotation_interval"], float(pool["rotation_fraction"])),
        generation=GenerationConfig(**{**gen, "domains": tuple(gen["domains"])}),
        images=ImageSettings(img["width"], img["height"], img["steps"], img["negative_prompt"]),
        stage_plan=StagePlanConfig(
            stage1_per_ability=s1["per_ability"],
            stage1_targets=dict(s1["targets"]) if s1["targets"] is not None else None,
            stage1_from_specs=bool(s1["from_specs"]),
            stage1_output=s1["output"],
            multi_image={RelationKind(k).value: v for k, v in s2["multi_image"].items()},
            interleaved=s2["interleaved"],
            stage2_output=s2["output"],
        ),
        mock_scenario=scenario,
        raw=raw,
        source=source,
    )


def validate_config(path: str | Path) -> JobConfig:
    path = Path(path)
    try:
        given = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError("$", f"{path}: not valid YAML: {exc}") from exc
    if given is not None and not isinstance(given, Mapping):
        raise ConfigError("$", f"{path}: top level must be a mapping")
    return build_config(given, base_dir=path.parent, source=path)
