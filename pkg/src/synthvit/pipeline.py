"""End-to-end job execution: pools, prompts, images, dialogues, assembly.

A job owns one output directory::

    manifest.jsonl            commit record for every sample of the job
    stage1.json, stage2.json  datasets (plus ``*.partial.jsonl`` staging files)
    images/                   content-addressed PNGs and index.jsonl
    pools/                    expanded keyword/question pools and rotation state
    report.json               JobReport of the latest run

Every random choice is seeded through ``derive_seed`` from the job seed and
the position in the job (ability, samples committed so far, stalled
batches), so a mock run is reproducible byte for byte. On resume that
position is recovered from the manifest, the per-ability duplicate corpus is
rebuilt from the committed samples' prompts, and pool state is reloaded from
``pools/``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

from .assembler import (
    AssemblyPlan,
    DatasetWriter,
    ImageStore,
    materialize_images,
    open_manifest,
    substitute_placeholders,
)
from .backends import BackendPolicy, ChatBackend, HttpChatClient, HttpT2IClient, T2IBackend
from .config import JobConfig
from .dialogues import (
    RelationKind,
    generate_interleaved_dialogue,
    generate_multi_image_dialogue,
    generate_pair_prompts,
    generate_phase_list,
    generate_question_pool,
    generate_stage1_dialogue,
)
from .errors import (
    BackendError,
    EmptyList,
    EmptyPrompt,
    Exhausted,
    InsufficientPhases,
    SynthError,
    TooLong,
    Unparseable,
)
from .mock import MockChatBackend, MockT2IBackend, Scenario
from .prompts import PromptCorpus, generate_keyword_pool, generate_prompt_batch, parse_sd_prompt
from .schema import Dialogue, Manifest, atomic_write_text, sample_id
from .templates import (
    AbilitySpec,
    InContextPool,
    TemplateSet,
    data_path,
    load_ability_specs,
    rotate_pool,
)

log = logging.getLogger(__name__)

# failures of a single item that are logged and counted, never fatal
_ITEM_ERRORS = (TooLong, Unparseable, EmptyList, EmptyPrompt, InsufficientPhases, ValueError)


def derive_seed(*parts: Any) -> int:
    """Stable 31-bit seed from any sequence of printable parts."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class AbilityStats:
    samples: int = 0
    prompts_accepted: int = 0
    rejected: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict[str, Any]:
        return {
            "samples": self.samples,
            "prompts_accepted": self.prompts_accepted,
            "rejected": dict(sorted(self.rejected.items())),
        }


@dataclass
class JobReport:
    """Outcome of one ``run_job`` call.

    ``samples`` per ability is read back from the manifest, so it counts
    samples committed by earlier runs of a resumed job too. Prompt and
    rejection counts cover this run only.
    """

    job_id: str
    config_hash: str
    status: str = "incomplete"  # complete | incomplete | halted
    error: str = ""
    wall_time_s: float = 0.0
    abilities: dict[str, AbilityStats] = field(default_factory=dict)
    targets: dict[str, int] = field(default_factory=dict)
    backend_calls: dict[str, dict[str, int]] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)

    def stats(self, ability_id: str) -> AbilityStats:
        return self.abilities.setdefault(ability_id, AbilityStats())

    @property
    def remaining(self) -> dict[str, int]:
        return {a: max(0, t - self.stats(a).samples) for a, t in self.targets.items()}

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "config_hash": self.config_hash,
            "status": self.status,
            "error": self.error,
            "wall_time_s": round(self.wall_time_s, 3),
            "targets": dict(self.targets),
            "remaining": self.remaining,
            "abilities": {a: s.to_dict() for a, s in self.abilities.items()},
            "backend_calls": self.backend_calls,
            "outputs": self.outputs,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> JobReport:
        report = cls(d["job_id"], d["config_hash"], d["status"], d.get("error", ""), d.get("wall_time_s", 0.0))
        report.targets = dict(d.get("targets", {}))
        for a, s in d.get("abilities", {}).items():
            report.abilities[a] = AbilityStats(s["samples"], s["prompts_accepted"], Counter(s["rejected"]))
        report.backend_calls = d.get("backend_calls", {})
        report.outputs = d.get("outputs", {})
        return report

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> JobReport:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Backends and context
# ---------------------------------------------------------------------------


@dataclass
class Backends:
    chat: ChatBackend
    t2i: T2IBackend
    judge: ChatBackend | None = None


def default_scenario_path() -> Path:
    return data_path("scenarios", "default.yaml")


def build_backends(cfg: JobConfig, *, mock: bool) -> Backends:
    if mock:
        scenario = Scenario.load(cfg.mock_scenario or default_scenario_path())
        chat = MockChatBackend(scenario)
        return Backends(chat, MockT2IBackend(scenario.unsafe_terms), chat)
    b, p = cfg.backends, cfg.policies
    return Backends(
        HttpChatClient(b["chat"].url, b["chat"].model, p["chat"], api_key_env=b["chat"].api_key_env or None),
        HttpT2IClient(b["t2i"].url, p["t2i"], api_key_env=b["t2i"].api_key_env or None),
        HttpChatClient(b["judge"].url, b["judge"].model, p["judge"], api_key_env=b["judge"].api_key_env or None),
    )


def build_judge(cfg: JobConfig, *, mock: bool) -> ChatBackend:
    if mock:
        return MockChatBackend(Scenario.load(cfg.mock_scenario or default_scenario_path()))
    j = cfg.backends["judge"]
    return HttpChatClient(j.url, j.model, cfg.policies.get("judge", BackendPolicy()), api_key_env=j.api_key_env or None)


def load_abilities(cfg: JobConfig) -> list[AbilitySpec]:
    """Abilities of the job, in plan order (config order when a subset is given)."""
    specs = load_ability_specs(cfg.abilities_dir or data_path("abilities"))
    if cfg.abilities is None:
        return specs
    by_id = {s.ability_id: s for s in specs}
    missing = [a for a in cfg.abilities if a not in by_id]
    if missing:
        raise SynthError(f"abilities not found: {', '.join(missing)}")
    return [by_id[a] for a in cfg.abilities]


class JobContext:
    def __init__(self, cfg: JobConfig, backends: Backends, *, mock: bool = False):
        self.cfg = cfg
        self.backends = backends
        self.mock = mock
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.templates = TemplateSet.load(cfg.templates_dir)
        self.store = ImageStore(self.out)
        self.pools_dir = self.out / "pools"
        self.config_hash = cfg.config_hash(mock=mock)
        self.workers = cfg.generation.workers

    # -- pool state ----------------------------------------------------------

    def _pool_file(self, key: str) -> Path:
        return self.pools_dir / f"{key}.json"

    def load_state(self, key: str) -> dict[str, Any]:
        path = self._pool_file(key)
        return json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}

    def save_state(self, key: str, state: dict[str, Any]) -> None:
        self.pools_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self._pool_file(key), json.dumps(state, indent=2, ensure_ascii=False) + "\n")

    def make_pool(self, examples: Sequence[str], ability: AbilitySpec | None = None) -> InContextPool:
        pc = self.cfg.pool
        interval = (ability.rotation_interval if ability else None) or pc.rotation_interval
        fraction = pc.rotation_fraction
        if ability is not None and ability.rotation_fraction is not None:
            fraction = ability.rotation_fraction
        return InContextPool.from_examples(examples, pc.capacity, interval, fraction)

    def map(self, fn: Callable, items: Sequence) -> list:
        if len(items) <= 1 or self.workers <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as ex:
            return list(ex.map(fn, items))


def pool_to_dict(pool: InContextPool) -> dict[str, Any]:
    return {"examples": list(pool.examples), "batches_since_rotation": pool.batches_since_rotation}


def pool_from_dict(d: dict[str, Any] | None, default: InContextPool) -> InContextPool:
    if not d:
        return default
    examples = tuple(d["examples"])[-default.capacity:]
    return replace(default, examples=examples, batches_since_rotation=int(d.get("batches_since_rotation", 0)))


def ensure_pools(ctx: JobContext, ability: AbilitySpec) -> AbilitySpec:
    """Expand the ability's keyword and question pools once per job and persist them."""
    state = ctx.load_state(ability.ability_id)
    if "keyword_pool" in state and "question_pool" in state:
        return ability.with_pools(state["keyword_pool"], state["question_pool"])
    gen = ctx.cfg.generation
    seed = derive_seed(ctx.cfg.seed, "pools", ability.ability_id)
    keywords = list(ability.keyword_pool)
    questions = list(ability.question_pool)
    try:
        keywords += generate_keyword_pool(ability, gen.new_keywords, ctx.backends.chat, templates=ctx.templates, seed=seed)
    except EmptyList as exc:
        log.warning("%s", exc)
    try:
        questions += generate_question_pool(
            ability, gen.new_questions, ctx.backends.chat, templates=ctx.templates, seed=seed + 1
        )
    except EmptyList as exc:
        log.warning("%s", exc)
    state.update({"keyword_pool": keywords, "question_pool": questions})
    ctx.save_state(ability.ability_id, state)
    return ability.with_pools(keywords, questions)


# ---------------------------------------------------------------------------
# Recovery helpers
# ---------------------------------------------------------------------------


_COUNTER = re.compile(r"-(\d+)$")


def next_counter(manifest: Manifest, ability_id: str) -> int:
    nums = [
        int(m.group(1))
        for sid, a in manifest.entries.items()
        if a == ability_id and (m := _COUNTER.search(sid))
    ]
    return max(nums, default=0) + 1


def committed_corpus(writer: DatasetWriter, ability_id: str) -> PromptCorpus:
    corpus = PromptCorpus()
    for rec in writer.records:
        prov = rec.get("provenance", {})
        if prov.get("ability_id") != ability_id:
            continue
        for raw in prov.get("prompts", []):
            try:
                corpus.add(parse_sd_prompt(raw, ability_id))
            except (EmptyPrompt, Unparseable):
                continue
    return corpus


def _format_exchange(d: Dialogue) -> str:
    lines = []
    for t in d.turns:
        label = "Question" if t.speaker == "human" else "Answer"
        if d.kind in ("multi_image", "interleaved"):
            label = "Human" if t.speaker == "human" else "Assistant"
        lines.append(f"{label}: {t.text}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


def run_stage1_ability(ctx: JobContext, ability: AbilitySpec, writer: DatasetWriter, report: JobReport) -> None:
    aid = ability.ability_id
    stats = report.stats(aid)
    if writer.remaining().get(aid, 0) == 0:
        return
    cfg, gen = ctx.cfg, ctx.cfg.generation
    ability = ensure_pools(ctx, ability)
    state = ctx.load_state(aid)
    prompt_pool = pool_from_dict(state.get("prompt_pool"), ctx.make_pool(ability.in_context_examples, ability))
    dialogue_pool = pool_from_dict(
        state.get("dialogue_pool"), ctx.make_pool(ctx.templates.seed_examples("stage1_dialogue"), ability)
    )
    corpus = committed_corpus(writer, aid)
    counter = next_counter(writer.manifest, aid)
    stall = 0

    for _ in range(gen.max_batches):
        need = writer.remaining()[aid]
        if need == 0:
            break
        committed = writer.manifest.count(aid)
        seed = derive_seed(cfg.seed, "stage1", aid, committed, stall)
        try:
            batch = generate_prompt_batch(
                ability, gen.prompts_per_call, prompt_pool, cfg.filter, ctx.backends.chat, corpus,
                templates=ctx.templates, seed=seed,
            )
        except (EmptyList, BackendError) as exc:
            if isinstance(exc, Exhausted):
                raise
            stats.rejected[f"Batch:{type(exc).__name__}"] += 1
            stall += 1
            continue
        stats.prompts_accepted += len(batch.accepted)
        stats.rejected.update(batch.reject_counts())
        accepted = batch.accepted[:need]

        images = materialize_images(
            accepted, derive_seed(seed, "images"), ctx.backends.t2i, ctx.store,
            settings=cfg.images, max_workers=ctx.workers,
        )
        for _, reason in images.failures:
            stats.rejected["Image:" + reason.split(":", 1)[0]] += 1

        def make_dialogue(i: int) -> Dialogue | str:
            try:
                return generate_stage1_dialogue(
                    accepted[i], ability, cfg.limits, ctx.backends.chat,
                    pool=dialogue_pool, templates=ctx.templates, seed=derive_seed(seed, "dialogue", i),
                )
            except _ITEM_ERRORS as exc:
                return type(exc).__name__
            except BackendError as exc:
                if isinstance(exc, Exhausted):
                    raise
                return type(exc).__name__

        todo = [i for i, e in enumerate(images.by_index) if e is not None]
        dialogues = dict(zip(todo, ctx.map(make_dialogue, todo)))

        fresh_dialogues = []
        progress = False
        for i in todo:
            d = dialogues[i]
            if isinstance(d, str):
                stats.rejected["Dialogue:" + d] += 1
                continue
            sample = substitute_placeholders(
                d, [images.by_index[i]], sample_id=sample_id(aid, counter), ability_id=aid,
                seed=derive_seed(seed, "images") + i,
            )
            counter += 1
            if writer.add(sample):
                progress = True
                fresh_dialogues.append(_format_exchange(d))

        prompt_pool = rotate_pool(prompt_pool, [p.text for p in batch.accepted])
        dialogue_pool = rotate_pool(dialogue_pool, fresh_dialogues)
        state.update({"prompt_pool": pool_to_dict(prompt_pool), "dialogue_pool": pool_to_dict(dialogue_pool)})
        ctx.save_state(aid, state)
        stall = 0 if progress else stall + 1

    if writer.remaining()[aid]:
        log.warning("%s: %d samples short after %d batches", aid, writer.remaining()[aid], gen.max_batches)


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


def run_multi_image(ctx: JobContext, relation: RelationKind, writer: DatasetWriter, report: JobReport) -> None:
    aid = f"multi_image_{relation.value}"
    stats = report.stats(aid)
    if writer.remaining().get(aid, 0) == 0:
        return
    cfg, gen = ctx.cfg, ctx.cfg.generation
    state = ctx.load_state(aid)
    pair_pool = pool_from_dict(
        state.get("prompt_pool"), ctx.make_pool(ctx.templates.seed_examples(f"pairs_{relation.value}"))
    )
    dialogue_pool = pool_from_dict(
        state.get("dialogue_pool"), ctx.make_pool(ctx.templates.seed_examples("multi_image_dialogue"))
    )
    corpus = committed_corpus(writer, aid)
    counter = next_counter(writer.manifest, aid)
    stall = 0

    def on_reject(raw: str, reason) -> None:
        stats.rejected[reason.code] += 1

    for _ in range(gen.max_batches):
        need = writer.remaining()[aid]
        if need == 0:
            break
        seed = derive_seed(cfg.seed, "stage2", aid, writer.manifest.count(aid), stall)
        try:
            pairs = generate_pair_prompts(
                relation, gen.pairs_per_call, pair_pool, cfg.filter, ctx.backends.chat, corpus,
                templates=ctx.templates, seed=seed, on_reject=on_reject,
            )
        except (EmptyList, BackendError) as exc:
            if isinstance(exc, Exhausted):
                raise
            stats.rejected[f"Batch:{type(exc).__name__}"] += 1
            stall += 1
            continue
        stats.prompts_accepted += len(pairs)
        pairs = pairs[:need]
        flat = [p for pair in pairs for p in (pair.first, pair.second)]
        image_seed = derive_seed(seed, "images")
        images = materialize_images(
            flat, image_seed, ctx.backends.t2i, ctx.store, settings=cfg.images, max_workers=ctx.workers
        )
        for _, reason in images.failures:
            stats.rejected["Image:" + reason.split(":", 1)[0]] += 1
        ok = [i for i in range(len(pairs)) if images.by_index[2 * i] and images.by_index[2 * i + 1]]

        def make_dialogue(i: int) -> Dialogue | str:
            try:
                return generate_multi_image_dialogue(
                    pairs[i], cfg.limits, ctx.backends.chat, pool=dialogue_pool, templates=ctx.templates,
                    seed=derive_seed(seed, "dialogue", i), n_rounds=gen.multi_image_rounds,
                )
            except _ITEM_ERRORS as exc:
                return type(exc).__name__
            except BackendError as exc:
                if isinstance(exc, Exhausted):
                    raise
                return type(exc).__name__

        dialogues = dict(zip(ok, ctx.map(make_dialogue, ok)))
        fresh = []
        progress = False
        for i in ok:
            d = dialogues[i]
            if isinstance(d, str):
                stats.rejected["Dialogue:" + d] += 1
                continue
            sample = substitute_placeholders(
                d, [images.by_index[2 * i], images.by_index[2 * i + 1]],
                sample_id=sample_id(aid, counter), ability_id=aid, seed=image_seed + 2 * i,
            )
            counter += 1
            if writer.add(sample):
                progress = True
                fresh.append(_format_exchange(d))
        pair_pool = rotate_pool(pair_pool, [f"{p.first.text} || {p.second.text}" for p in pairs])
        dialogue_pool = rotate_pool(dialogue_pool, fresh)
        state.update({"prompt_pool": pool_to_dict(pair_pool), "dialogue_pool": pool_to_dict(dialogue_pool)})
        ctx.save_state(aid, state)
        stall = 0 if progress else stall + 1


def run_interleaved(ctx: JobContext, writer: DatasetWriter, report: JobReport) -> None:
    aid = "interleaved"
    stats = report.stats(aid)
    if writer.remaining().get(aid, 0) == 0:
        return
    cfg, gen = ctx.cfg, ctx.cfg.generation
    state = ctx.load_state(aid)
    dialogue_pool = pool_from_dict(
        state.get("dialogue_pool"), ctx.make_pool(ctx.templates.seed_examples("interleaved_dialogue"))
    )
    counter = next_counter(writer.manifest, aid)
    stall = 0

    for _ in range(gen.max_batches):
        need = writer.remaining()[aid]
        if need == 0:
            break
        committed = writer.manifest.count(aid)
        base = derive_seed(cfg.seed, "interleaved", committed, stall)
        slots = list(range(min(need, ctx.workers)))

        def make_dialogue(j: int) -> tuple[str, Dialogue | str]:
            domain = gen.domains[(committed + j + stall) % len(gen.domains)]
            seed = derive_seed(base, j)
            try:
                phases = generate_phase_list(domain, gen.phases, ctx.backends.chat, templates=ctx.templates, seed=seed)
                d = generate_interleaved_dialogue(
                    phases, cfg.limits, ctx.backends.chat, domain=domain, cfg=cfg.filter, pool=dialogue_pool,
                    templates=ctx.templates, seed=seed + 1,
                )
            except _ITEM_ERRORS as exc:
                return domain, type(exc).__name__
            except BackendError as exc:
                if isinstance(exc, Exhausted):
                    raise
                return domain, type(exc).__name__
            return domain, d

        results = ctx.map(make_dialogue, slots)
        fresh = []
        progress = False
        for j, (domain, d) in zip(slots, results):
            if isinstance(d, str):
                stats.rejected["Dialogue:" + d] += 1
                continue
            prompts = d.image_prompts()
            stats.prompts_accepted += len(prompts)
            image_seed = derive_seed(base, j, "images")
            images = materialize_images(
                prompts, image_seed, ctx.backends.t2i, ctx.store, settings=cfg.images, max_workers=ctx.workers
            )
            if images.failures:
                for _, reason in images.failures:
                    stats.rejected["Image:" + reason.split(":", 1)[0]] += 1
                continue
            sample = substitute_placeholders(
                d, images.by_index, sample_id=sample_id(aid, counter), ability_id=aid, seed=image_seed
            )
            counter += 1
            if writer.add(sample):
                progress = True
                fresh.append(_format_exchange(d))
        dialogue_pool = rotate_pool(dialogue_pool, fresh)
        state.update({"dialogue_pool": pool_to_dict(dialogue_pool)})
        ctx.save_state(aid, state)
        stall = 0 if progress else stall + 1


# ---------------------------------------------------------------------------
# Job
# ---------------------------------------------------------------------------


def stage_plans(cfg: JobConfig, abilities: Sequence[AbilitySpec]) -> tuple[AssemblyPlan, AssemblyPlan]:
    out = Path(cfg.output_dir)
    sp = cfg.stage_plan
    ids = [a.ability_id for a in abilities]
    spec_targets = {a.ability_id: a.target_count for a in abilities}
    p1 = AssemblyPlan(1, sp.stage1_plan(ids, spec_targets), out / sp.stage1_output)
    p2 = AssemblyPlan(2, sp.stage2_plan(), out / sp.stage2_output)
    return p1, p2


def _backend_calls(backends: Backends) -> dict[str, dict[str, int]]:
    out = {}
    for name in ("chat", "t2i"):
        stats = getattr(getattr(backends, name), "stats", None)
        if stats is not None:
            out[name] = stats.to_dict()
    return out


def run_job(
    cfg: JobConfig,
    *,
    mock: bool = False,
    backends: Backends | None = None,
    resume: bool = False,
    durable: bool = True,
    after_commit: Callable[[str], None] | None = None,
) -> JobReport:
    """Run (or resume) a job until every stage target is met or batches run out.

    Backend exhaustion halts the job: partial datasets are written, the
    manifest stays valid, and the returned report has status ``halted``.
    Any other exception propagates after the manifest is flushed, exactly
    as after a crash; rerun with ``resume=True``.
    """
    started = time.monotonic()
    backends = backends or build_backends(cfg, mock=mock)
    out = Path(cfg.output_dir)
    manifest_path = cfg.manifest_path
    if manifest_path.exists() and not resume:
        raise SynthError(f"{out} already holds a job; resume it or choose another output directory")
    abilities = load_abilities(cfg)
    ctx = JobContext(cfg, backends, mock=mock)
    manifest = open_manifest(manifest_path, cfg.job_id, ctx.config_hash)
    plan1, plan2 = stage_plans(cfg, abilities)

    report = JobReport(cfg.job_id, ctx.config_hash)
    report.targets = {**plan1.target_counts, **plan2.target_counts}
    report.outputs = {"manifest": str(manifest_path), "report": str(out / "report.json")}

    writer: DatasetWriter | None = None
    try:
        for plan, stage in ((plan1, 1), (plan2, 2)):
            if not plan.target_counts:
                continue
            writer = DatasetWriter(plan, manifest, manifest_path, durable=durable, after_commit=after_commit)
            if stage == 1:
                for ability in abilities:
                    run_stage1_ability(ctx, ability, writer, report)
            else:
                for relation in RelationKind:
                    if f"multi_image_{relation.value}" in plan.target_counts:
                        run_multi_image(ctx, relation, writer, report)
                if "interleaved" in plan.target_counts:
                    run_interleaved(ctx, writer, report)
            result = writer.finalize()
            writer = None
            report.outputs[f"stage{stage}"] = str(result.path)
        report.status = "complete"
    except Exhausted as exc:
        log.error("halting: %s", exc)
        report.status = "halted"
        report.error = str(exc)
        if writer is not None:
            writer.finalize()
            report.outputs[f"stage{writer.plan.stage}"] = str(writer.plan.output_path)
    except BaseException:
        if writer is not None:
            writer.close()
        raise

    for aid in report.targets:
        report.stats(aid).samples = manifest.count(aid)
    if report.status == "complete" and any(report.remaining.values()):
        report.status = "incomplete"
    report.backend_calls = _backend_calls(backends)
    report.wall_time_s = time.monotonic() - started
    report.save(out / "report.json")
    return report
