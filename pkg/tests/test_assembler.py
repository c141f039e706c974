from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthvit.assembler import (
    AssemblyPlan,
    DatasetWriter,
    ImageStore,
    ImageStoreEntry,
    assemble_dataset,
    load_staged_samples,
    materialize_images,
    open_manifest,
    resume_job,
    staging_path,
    substitute_placeholders,
)
from synthvit.errors import ArityMismatch, ConfigMismatch, InvariantViolation
from synthvit.mock import MockT2IBackend
from synthvit.prompts import parse_sd_prompt
from synthvit.schema import (
    PLACEHOLDER,
    Dialogue,
    Manifest,
    Provenance,
    TrainingSample,
    Turn,
    count_placeholders,
    sample_id,
    validate_dataset_file,
)


def _entry(i=0):
    return ImageStoreEntry(f"images/x/{i}.png", f"prompt {i}", i, f"h{i}")


def _sample(aid: str, n: int, stage: int = 1) -> TrainingSample:
    return TrainingSample(
        id=sample_id(aid, n),
        stage=stage,
        image_refs=(f"images/{aid}/{n}.png",),
        conversations=(Turn("human", "<image>\nWhat is it?"), Turn("assistant", "A thing.")),
        provenance=Provenance(aid, (f"thing {n}",), n),
    )


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def test_materialize_is_idempotent(tmp_path):
    prompts = [parse_sd_prompt(f"cat {i}, sofa", "color") for i in range(5)]
    store = ImageStore(tmp_path)
    t2i = MockT2IBackend()
    first = materialize_images(prompts, 100, t2i, store)
    assert store.files_written == 5 and t2i.stats.calls == 5
    store2 = ImageStore(tmp_path)
    second = materialize_images(prompts, 100, t2i, store2)
    assert store2.files_written == 0 and t2i.stats.calls == 5
    assert first.by_index == second.by_index
    for e in first.by_index:
        assert e.path.startswith("images/color/")
        assert (tmp_path / e.path).is_file()


def test_materialize_reports_safety_failures(tmp_path):
    prompts = [parse_sd_prompt(f"cat {i}") for i in range(9)] + [parse_sd_prompt("forbidden thing")]
    batch = materialize_images(prompts, 0, MockT2IBackend(["forbidden"]), ImageStore(tmp_path))
    assert len(batch) == 9
    assert len(batch.failures) == 1 and batch.failures[0][1].startswith("SafetyRejected")
    assert batch.by_index[-1] is None


def test_repeated_prompt_gets_one_image_per_position(tmp_path):
    p = parse_sd_prompt("cat")
    batch = materialize_images([p, p], 0, MockT2IBackend(), ImageStore(tmp_path))
    assert batch.by_index[0].seed == 0 and batch.by_index[1].seed == 1


# ---------------------------------------------------------------------------
# Placeholder substitution
# ---------------------------------------------------------------------------


def test_substitute_stage1():
    d = Dialogue((Turn("human", "What is it?"), Turn("assistant", "A cat.")), "stage1_description")
    s = substitute_placeholders(d, [_entry()], sample_id="c-000001", ability_id="c", seed=1)
    assert s.conversations[0].text == "<image>\nWhat is it?"
    assert s.image_refs == ("images/x/0.png",)
    assert s.provenance.prompts == ("prompt 0",)
    with pytest.raises(ArityMismatch):
        substitute_placeholders(d, [_entry(), _entry(1)], sample_id="c", ability_id="c", seed=1)


def test_substitute_multi_image():
    d = Dialogue((Turn("human", "Difference?"), Turn("assistant", "Color.")), "multi_image")
    s = substitute_placeholders(d, [_entry(0), _entry(1)], sample_id="m", ability_id="m", seed=1)
    assert s.conversations[0].text == "<image>\n<image>\nDifference?"
    assert s.stage == 2


def test_substitute_interleaved_replaces_in_place():
    p1, p2 = parse_sd_prompt("eggs, bowl"), parse_sd_prompt("pan")
    d = Dialogue(
        (
            Turn("human", "How?"),
            Turn("assistant", "Crack (two) eggs. [eggs, bowl] Done.", (p1,)),
            Turn("human", "Next?"),
            Turn("assistant", "Heat the pan. [pan]", (p2,)),
        ),
        "interleaved",
    )
    s = substitute_placeholders(d, [_entry(0), _entry(1)], sample_id="i", ability_id="interleaved", seed=1)
    assert s.conversations[1].text == "Crack (two) eggs. <image> Done."
    assert s.conversations[3].text == "Heat the pan. <image>"
    assert s.provenance.prompts == ("eggs, bowl", "pan")
    with pytest.raises(ArityMismatch):
        substitute_placeholders(d, [_entry(0)], sample_id="i", ability_id="interleaved", seed=1)


def test_substitute_refuses_existing_token():
    d = Dialogue((Turn("human", "<image> hi"), Turn("assistant", "x")), "stage1_description")
    with pytest.raises(ArityMismatch):
        substitute_placeholders(d, [_entry()], sample_id="c", ability_id="c", seed=1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.text(alphabet="abc .()", max_size=8), st.integers(0, 2)), min_size=1, max_size=5))
def test_interleaved_placeholder_count_property(turn_specs):
    turns = [Turn("human", "Go?")]
    n = 0
    for prose, k in turn_specs:
        text = prose + "".join(f" [kw{n + j}]" for j in range(k))
        prompts = tuple(parse_sd_prompt(f"kw{n + j}") for j in range(k))
        n += k
        turns += [Turn("assistant", text, prompts), Turn("human", "More?")]
    turns.append(Turn("assistant", "Done."))
    d = Dialogue(tuple(turns), "interleaved")
    s = substitute_placeholders(d, [_entry(i) for i in range(n)], sample_id="i", ability_id="i", seed=0)
    assert count_placeholders(s.conversations) == n == len(s.image_refs)
    assert not any("[" in t.text or "]" in t.text for t in s.conversations)


# ---------------------------------------------------------------------------
# Dataset writing
# ---------------------------------------------------------------------------


def _setup(tmp_path, targets):
    plan = AssemblyPlan(1, targets, tmp_path / "stage1.json")
    mpath = tmp_path / "manifest.jsonl"
    return plan, open_manifest(mpath, "job", "h"), mpath


def test_assemble_short_stream_is_incomplete(tmp_path):
    plan, manifest, mpath = _setup(tmp_path, {"a": 30})
    result = assemble_dataset(plan, (_sample("a", i) for i in range(1, 26)), manifest, mpath)
    assert result.status == "incomplete" and result.counts == {"a": 25}
    data = json.loads(plan.output_path.read_text())
    assert len(data) == 25
    assert resume_job(mpath, plan, "h") == {"a": 5}


def test_assemble_stops_at_target_and_skips(tmp_path):
    plan, manifest, mpath = _setup(tmp_path, {"a": 3, "b": 1})
    stream = [_sample("a", 1), _sample("a", 1), _sample("zzz", 1), _sample("b", 1, stage=2),
              _sample("a", 2), _sample("b", 1), _sample("a", 3), _sample("a", 4)]
    result = assemble_dataset(plan, stream, manifest, mpath)
    assert result.status == "complete"
    assert [r for _, r in result.skipped] == ["duplicate id", "ability 'zzz' not in plan", "stage 2 sample in stage 1 plan"]
    assert validate_dataset_file(plan.output_path).ok
    assert Manifest.load(mpath).counters == {"a": 3, "b": 1}


def test_resume_job_examples(tmp_path):
    plan, manifest, mpath = _setup(tmp_path, {"a": 2, "b": 4})
    assemble_dataset(plan, [_sample("a", 1), _sample("a", 2), _sample("b", 1)], manifest, mpath)
    assert resume_job(mpath, plan, "h") == {"a": 0, "b": 3}
    with pytest.raises(ConfigMismatch):
        resume_job(mpath, plan, "other")
    over = AssemblyPlan(1, {"a": 1}, plan.output_path)
    assert resume_job(mpath, over, "h") == {"a": 0}


def test_uncommitted_staging_line_is_dropped(tmp_path):
    plan, manifest, mpath = _setup(tmp_path, {"a": 3})
    w = DatasetWriter(plan, manifest, mpath)
    w.add(_sample("a", 1))
    w.close()
    # simulate a crash between the staging append and the manifest append
    with open(staging_path(plan.output_path), "a") as fh:
        fh.write(json.dumps({"id": "a-000002"}) + "\n")
    w2 = DatasetWriter(plan, Manifest.load(mpath), mpath)
    assert [r["id"] for r in w2.records] == ["a-000001"]
    assert [r["id"] for r in load_staged_samples(plan.output_path)] == ["a-000001"]
    w2.close()


def test_missing_committed_sample_is_an_invariant_violation(tmp_path):
    plan, manifest, mpath = _setup(tmp_path, {"a": 3})
    assemble_dataset(plan, [_sample("a", 1)], manifest, mpath)
    staging_path(plan.output_path).write_text("")
    with pytest.raises(InvariantViolation):
        DatasetWriter(plan, Manifest.load(mpath), mpath)


def test_torn_manifest_is_repaired_before_append(tmp_path):
    plan, manifest, mpath = _setup(tmp_path, {"a": 3})
    assemble_dataset(plan, [_sample("a", 1)], manifest, mpath)
    with open(mpath, "a") as fh:
        fh.write('{"type":"sample","id":"a-0000')
    m = open_manifest(mpath, "job", "h")
    assemble_dataset(plan, [_sample("a", 2), _sample("a", 3)], m, mpath)
    final = Manifest.load(mpath)
    assert final.counters == {"a": 3}
    assert mpath.read_text().endswith("\n")


def test_open_manifest_config_mismatch(tmp_path):
    open_manifest(tmp_path / "m.jsonl", "job", "h1")
    with pytest.raises(ConfigMismatch):
        open_manifest(tmp_path / "m.jsonl", "job", "h2")


def test_crash_inside_stream_leaves_committed_prefix(tmp_path):
    plan, manifest, mpath = _setup(tmp_path, {"a": 5})

    def stream():
        yield _sample("a", 1)
        yield _sample("a", 2)
        raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        assemble_dataset(plan, stream(), manifest, mpath)
    m = Manifest.load(mpath)
    assert m.count("a") == 2
    result = assemble_dataset(plan, (_sample("a", i) for i in range(3, 6)), m, mpath)
    assert result.status == "complete"
    ids = [r["id"] for r in json.loads(plan.output_path.read_text())]
    assert ids == [sample_id("a", i) for i in range(1, 6)]
    assert PLACEHOLDER in json.loads(plan.output_path.read_text())[0]["conversations"][0]["value"]
