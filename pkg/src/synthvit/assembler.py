"""Image materialization, placeholder binding, and crash-safe dataset writing.

Durability protocol for one dataset file ``X.json``:

1. each accepted sample is appended as one line to ``X.json.partial.jsonl``
   and fsynced;
2. then one entry line is appended to the job manifest and fsynced;
3. when the stream ends (or targets are met) ``X.json`` is rewritten from
   the staging file through a temp file + rename.

The manifest is the commit record. On reopen, staging lines whose id is not
in the manifest are discarded, so a crash between steps 1 and 2 loses only
the uncommitted sample and never duplicates it.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .backends import ImageArtifact, T2IBackend, T2IRequest
from .dialogues import bracket_segments
from .errors import ArityMismatch, BackendError, ConfigMismatch, InvariantViolation
from .schema import (
    PLACEHOLDER,
    Dialogue,
    Manifest,
    Provenance,
    SDPrompt,
    TrainingSample,
    Turn,
    atomic_write_text,
    count_placeholders,
    dump_dataset,
    encode_sample,
    entry_line,
    sample_problems,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageStoreEntry:
    path: str  # relative to the store's base directory
    prompt_raw: str
    seed: int
    bytes_hash: str
    ability_id: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "path": self.path,
            "prompt_raw": self.prompt_raw,
            "seed": self.seed,
            "bytes_hash": self.bytes_hash,
            "ability_id": self.ability_id,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ImageStoreEntry:
        return cls(d["path"], d["prompt_raw"], d["seed"], d["bytes_hash"], d.get("ability_id", ""))


class ImageStore:
    """Content-addressed PNG store: ``images/{ability}/{hash[:2]}/{hash}.png``.

    ``index.jsonl`` maps (prompt text, seed) to the stored file so reruns
    reuse images instead of calling the backend again.
    """

    def __init__(self, base_dir: str | Path, subdir: str = "images"):
        self.base_dir = Path(base_dir)
        self.root = self.base_dir / subdir
        self.subdir = subdir
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.jsonl"
        self._entries: dict[tuple[str, int], ImageStoreEntry] = {}
        self.files_written = 0
        if self.index_path.exists():
            for line in self.index_path.read_text(encoding="utf-8").splitlines():
                try:
                    entry = ImageStoreEntry.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError):
                    continue  # torn trailing line
                self._entries[(entry.prompt_raw, entry.seed)] = entry

    def lookup(self, prompt_raw: str, seed: int) -> ImageStoreEntry | None:
        entry = self._entries.get((prompt_raw, seed))
        if entry is not None and (self.base_dir / entry.path).is_file():
            return entry
        return None

    def put(self, artifact: ImageArtifact, ability_id: str) -> ImageStoreEntry:
        digest = artifact.sha256
        rel = f"{self.subdir}/{ability_id or 'misc'}/{digest[:2]}/{digest}.png"
        path = self.base_dir / rel
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(artifact.data)
            os.replace(tmp, path)
            self.files_written += 1
        entry = ImageStoreEntry(rel, artifact.prompt, artifact.seed, digest, ability_id)
        self._entries[(entry.prompt_raw, entry.seed)] = entry
        with open(self.index_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")
        return entry


@dataclass(frozen=True)
class ImageSettings:
    width: int = 512
    height: int = 512
    steps: int = 30
    negative_prompt: str | None = "blurry, low quality, text, watermark"


@dataclass
class ImageBatch:
    """Results keyed by prompt, plus ``by_index`` aligned with the input order
    (``None`` where rendering failed) for callers whose prompts may repeat."""

    entries: dict[SDPrompt, ImageStoreEntry] = field(default_factory=dict)
    failures: list[tuple[SDPrompt, str]] = field(default_factory=list)
    by_index: list[ImageStoreEntry | None] = field(default_factory=list)

    def __getitem__(self, p: SDPrompt) -> ImageStoreEntry:
        return self.entries[p]

    def __contains__(self, p: SDPrompt) -> bool:
        return p in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def materialize_images(
    prompts: Sequence[SDPrompt],
    seed_base: int,
    t2i: T2IBackend,
    store: ImageStore,
    *,
    settings: ImageSettings | None = None,
    max_workers: int = 4,
) -> ImageBatch:
    """Render one image per prompt with seed ``seed_base + index``; already-stored images are reused."""
    settings = settings or ImageSettings()
    slots: list[ImageStoreEntry | None] = [None] * len(prompts)
    jobs = []
    for i, p in enumerate(prompts):
        found = store.lookup(p.text, seed_base + i)
        if found is not None:
            slots[i] = found
        else:
            jobs.append(i)

    def render(i: int) -> ImageArtifact | BackendError:
        p = prompts[i]
        req = T2IRequest(
            p.text, seed_base + i, settings.width, settings.height, settings.steps, settings.negative_prompt
        )
        try:
            return t2i.txt2img(req)
        except BackendError as exc:
            return exc

    batch = ImageBatch()
    if jobs:
        with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
            results = list(pool.map(render, jobs))
        # store writes happen here, in input order, so the index file is deterministic
        for i, result in zip(jobs, results):
            if isinstance(result, BackendError):
                log.warning("image failed for %r: %s", prompts[i].text, result)
                batch.failures.append((prompts[i], f"{type(result).__name__}: {result}"))
            else:
                slots[i] = store.put(result, prompts[i].ability_id)
    batch.by_index = slots
    for p, entry in zip(prompts, slots):
        if entry is not None:
            batch.entries.setdefault(p, entry)
    return batch


# ---------------------------------------------------------------------------
# Placeholders
# ---------------------------------------------------------------------------


def _replace_segments(text: str) -> tuple[str, int]:
    segments = bracket_segments(text)
    out, last = [], 0
    for start, end, _ in segments:
        out.append(text[last:start])
        out.append(PLACEHOLDER)
        last = end
    out.append(text[last:])
    return "".join(out), len(segments)


def substitute_placeholders(
    d: Dialogue,
    images: Sequence[ImageStoreEntry],
    *,
    sample_id: str,
    ability_id: str,
    seed: int,
) -> TrainingSample:
    """Bind a dialogue to its images and produce a training sample.

    Interleaved dialogues get one ``<image>`` per bracketed prompt, in text
    order. Single- and two-image dialogues get the tokens prepended to the
    first human turn, one per line.
    """
    if any(PLACEHOLDER in t.text for t in d.turns):
        raise ArityMismatch(f"{sample_id}: dialogue text already contains {PLACEHOLDER}")
    turns: list[Turn] = []
    if d.kind == "interleaved":
        total = 0
        for t in d.turns:
            text, n = _replace_segments(t.text)
            total += n
            turns.append(Turn(t.speaker, text))
        if total != len(images):
            raise ArityMismatch(f"{sample_id}: {total} bracketed prompts but {len(images)} images")
        prompts = tuple(p.text for p in d.image_prompts())
    else:
        expected = 2 if d.kind == "multi_image" else 1
        if len(images) != expected:
            raise ArityMismatch(f"{sample_id}: {d.kind} needs {expected} image(s), got {len(images)}")
        prefix = (PLACEHOLDER + "\n") * expected
        done = False
        for t in d.turns:
            if t.speaker == "human" and not done:
                turns.append(Turn(t.speaker, prefix + t.text))
                done = True
            else:
                turns.append(Turn(t.speaker, t.text))
        if not done:
            raise ArityMismatch(f"{sample_id}: no human turn to carry the image")
        prompts = tuple(e.prompt_raw for e in images)

    sample = TrainingSample(
        id=sample_id,
        stage=d.stage,
        image_refs=tuple(e.path for e in images),
        conversations=tuple(turns),
        provenance=Provenance(ability_id, prompts, seed),
    )
    if count_placeholders(sample.conversations) != len(sample.image_refs):
        raise ArityMismatch(f"{sample_id}: placeholder count does not match images")
    return sample


# ---------------------------------------------------------------------------
# Dataset writing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssemblyPlan:
    stage: int
    target_counts: dict[str, int]
    output_path: Path

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if any(v < 0 for v in self.target_counts.values()):
            raise ValueError("target counts must be >= 0")

    @property
    def total(self) -> int:
        return sum(self.target_counts.values())


@dataclass
class AssemblyResult:
    path: Path
    manifest: Manifest
    status: str  # "complete" | "incomplete"
    written: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)


def open_manifest(path: str | Path, job_id: str, config_hash: str) -> Manifest:
    """Load the manifest at ``path`` or create it; a different config hash is refused."""
    path = Path(path)
    if path.exists():
        text = path.read_text(encoding="utf-8")
        manifest = Manifest.from_text(text)
        if manifest.config_hash != config_hash:
            raise ConfigMismatch(
                f"{path}: written with config {manifest.config_hash[:12]}, current is {config_hash[:12]}"
            )
        if not text.endswith("\n"):
            # drop a torn trailing line before anything is appended after it
            manifest.save(path)
        return manifest
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(job_id, config_hash)
    manifest.save(path)
    return manifest


def staging_path(output_path: Path) -> Path:
    return output_path.with_name(output_path.name + ".partial.jsonl")


class DatasetWriter:
    """Single writer for one dataset file and its share of the job manifest."""

    def __init__(
        self,
        plan: AssemblyPlan,
        manifest: Manifest,
        manifest_path: str | Path,
        *,
        durable: bool = True,
        after_commit: Callable[[str], None] | None = None,
    ):
        self.plan = plan
        self.after_commit = after_commit
        self.manifest = manifest
        self.manifest_path = Path(manifest_path)
        self.durable = durable
        self.staging = staging_path(Path(plan.output_path))
        self.records: list[dict[str, Any]] = []
        self.skipped: list[tuple[str, str]] = []
        self.written = 0
        Path(plan.output_path).parent.mkdir(parents=True, exist_ok=True)
        self._recover()
        self._staging_fh = open(self.staging, "a", encoding="utf-8")
        self._manifest_fh = open(self.manifest_path, "a", encoding="utf-8")

    def _recover(self) -> None:
        kept: list[dict[str, Any]] = []
        seen: set[str] = set()
        dropped = 0
        if self.staging.exists():
            for line in self.staging.read_text(encoding="utf-8").splitlines():
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    dropped += 1
                    continue
                sid = rec.get("id")
                if sid in self.manifest and sid not in seen:
                    seen.add(sid)
                    kept.append(rec)
                else:
                    dropped += 1
        mine = {sid for sid, a in self.manifest.entries.items() if a in self.plan.target_counts}
        missing = mine - seen
        if missing:
            raise InvariantViolation(
                f"{self.staging}: {len(missing)} committed samples are missing from the staging file"
            )
        if dropped:
            log.warning("%s: discarded %d uncommitted staging line(s)", self.staging, dropped)
            atomic_write_text(self.staging, "".join(_compact(r) + "\n" for r in kept))
        self.records = kept

    def remaining(self) -> dict[str, int]:
        return {a: max(0, t - self.manifest.count(a)) for a, t in self.plan.target_counts.items()}

    def done(self) -> bool:
        return all(v == 0 for v in self.remaining().values())

    def _sync(self, fh) -> None:
        fh.flush()
        if self.durable:
            os.fsync(fh.fileno())

    def add(self, sample: TrainingSample) -> bool:
        ability = sample.provenance.ability_id
        if sample.id in self.manifest:
            reason = "duplicate id"
        elif ability not in self.plan.target_counts:
            reason = f"ability {ability!r} not in plan"
        elif self.manifest.count(ability) >= self.plan.target_counts[ability]:
            reason = "target already reached"
        elif sample.stage != self.plan.stage:
            reason = f"stage {sample.stage} sample in stage {self.plan.stage} plan"
        elif sample_problems(sample):
            reason = "; ".join(sample_problems(sample))
        else:
            reason = ""
        if reason:
            log.info("skipped %s: %s", sample.id, reason)
            self.skipped.append((sample.id, reason))
            return False
        record = encode_sample(sample)
        self._staging_fh.write(_compact(record) + "\n")
        self._sync(self._staging_fh)
        self._commit(sample.id, ability)
        self.records.append(record)
        self.written += 1
        if self.after_commit is not None:
            self.after_commit(sample.id)
        return True

    def _commit(self, sid: str, ability: str) -> None:
        self._manifest_fh.write(entry_line(sid, ability))
        self._sync(self._manifest_fh)
        self.manifest.record(sid, ability)

    def finalize(self) -> AssemblyResult:
        self.close()
        atomic_write_text(self.plan.output_path, dump_dataset(self.records))
        status = "complete" if self.done() else "incomplete"
        counts = {a: self.manifest.count(a) for a in self.plan.target_counts}
        return AssemblyResult(Path(self.plan.output_path), self.manifest, status, self.written, self.skipped, counts)

    def close(self) -> None:
        for fh in (self._staging_fh, self._manifest_fh):
            if not fh.closed:
                fh.close()


def _compact(record: dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def assemble_dataset(
    plan: AssemblyPlan,
    samples: Iterable[TrainingSample],
    manifest: Manifest,
    manifest_path: str | Path,
    *,
    durable: bool = True,
) -> AssemblyResult:
    """Append samples in arrival order until every target is met or the stream ends.

    A backend failure inside the stream still writes the partial dataset
    file before re-raising; any other exception leaves only the staging file
    and manifest behind, exactly as a hard crash would.
    """
    writer = DatasetWriter(plan, manifest, manifest_path, durable=durable)
    it = iter(samples)
    try:
        while not writer.done():
            try:
                sample = next(it)
            except StopIteration:
                break
            writer.add(sample)
    except BackendError:
        writer.finalize()
        raise
    except BaseException:
        writer.close()
        raise
    return writer.finalize()


def resume_job(manifest_path: str | Path, plan: AssemblyPlan, config_hash: str) -> dict[str, int]:
    """Samples still needed per ability: target minus committed, floored at 0."""
    manifest = Manifest.load(manifest_path)
    if manifest.config_hash != config_hash:
        raise ConfigMismatch(f"{manifest_path}: config hash differs from the current configuration")
    return {a: max(0, t - manifest.count(a)) for a, t in plan.target_counts.items()}


def load_staged_samples(output_path: Path) -> list[dict[str, Any]]:
    path = staging_path(Path(output_path))
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            continue
    return out
