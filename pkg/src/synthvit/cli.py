"""Command-line interface.

Exit codes: 0 job complete, 2 job incomplete but resumable, 1 error.
Secrets are read from CHAT_API_KEY, T2I_API_KEY and JUDGE_API_KEY.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .assembler import DatasetWriter, ImageStoreEntry, materialize_images, open_manifest, substitute_placeholders
from .config import JobConfig, validate_config
from .dialogues import generate_stage1_dialogue
from .errors import BackendError, Exhausted, SynthError
from .evaluation import (
    EvalReport,
    aggregate_scores,
    load_answers,
    load_benchmark,
    load_eval_report,
    load_rubric,
    score_benchmark,
    write_eval_report,
)
from .pipeline import (
    JobContext,
    JobReport,
    build_backends,
    build_judge,
    derive_seed,
    ensure_pools,
    load_abilities,
    next_counter,
    run_job,
    stage_plans,
)
from .prompts import PromptCorpus, generate_prompt_batch
from .schema import Dialogue, SDPrompt, sample_id, validate_dataset_file
from .templates import TemplateSet, data_path, load_ability_specs

log = logging.getLogger("synthvit")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INCOMPLETE = 2


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _load_config(args: argparse.Namespace) -> JobConfig:
    cfg = validate_config(args.config)
    output_dir = getattr(args, "output_dir", None)
    resume = getattr(args, "resume", None)
    if resume and not output_dir:
        output_dir = str(Path(resume).parent)
    if getattr(args, "seed", None) is not None or output_dir:
        cfg = cfg.with_overrides(seed=getattr(args, "seed", None), output_dir=output_dir)
    return cfg


def _context(cfg: JobConfig, mock: bool) -> JobContext:
    return JobContext(cfg, build_backends(cfg, mock=mock), mock=mock)


def _write_jsonl(path: Path, rows: Sequence[dict[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_specs_validate(args: argparse.Namespace) -> int:
    specs = load_ability_specs(args.dir or data_path("abilities"))
    TemplateSet.load(args.templates)
    total = 0
    for s in specs:
        total += s.target_count
        print(
            f"{s.ability_id:<18} keywords={len(s.keyword_pool):<3} questions={len(s.question_pool):<3} "
            f"rules={len(s.attribute_rules)} target={s.target_count}"
        )
    print(f"{len(specs)} abilities, total target {total}; templates ok")
    return EXIT_OK


def cmd_pools_gen(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    ctx = _context(cfg, args.mock)
    for ability in load_abilities(cfg):
        a = ensure_pools(ctx, ability)
        print(f"{a.ability_id}: {len(a.keyword_pool)} keywords, {len(a.question_pool)} questions")
    print(f"pools written to {ctx.pools_dir}")
    return EXIT_OK


def cmd_prompts_gen(args: argparse.Namespace) -> int:
    """One prompt batch per ability; accepted prompts and rejects go to ``prompts/``."""
    cfg = _load_config(args)
    ctx = _context(cfg, args.mock)
    out_dir = ctx.out / "prompts"
    n = args.n or cfg.generation.prompts_per_call
    for ability in load_abilities(cfg):
        if args.ability and ability.ability_id not in args.ability:
            continue
        ability = ensure_pools(ctx, ability)
        pool = ctx.make_pool(ability.in_context_examples, ability)
        batch = generate_prompt_batch(
            ability, n, pool, cfg.filter, ctx.backends.chat, PromptCorpus(),
            templates=ctx.templates, seed=derive_seed(cfg.seed, "prompts-cli", ability.ability_id),
        )
        _write_jsonl(out_dir / f"{ability.ability_id}.jsonl", [p.to_dict() for p in batch.accepted])
        _write_jsonl(out_dir / f"{ability.ability_id}.rejects.jsonl", batch.reject_log())
        print(f"{ability.ability_id}: {len(batch.accepted)} accepted, rejected {batch.reject_counts()}")
    return EXIT_OK


def cmd_images_gen(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    ctx = _context(cfg, args.mock)
    status = EXIT_OK
    for path in args.prompts:
        prompts = [SDPrompt.from_dict(row) for row in _read_jsonl(path)]
        seed_base = derive_seed(cfg.seed, "images-cli", Path(path).name)
        batch = materialize_images(
            prompts, seed_base, ctx.backends.t2i, ctx.store, settings=cfg.images, max_workers=ctx.workers
        )
        rows = [
            {"prompt": p.to_dict(), "image": e.to_dict()}
            for p, e in zip(prompts, batch.by_index)
            if e is not None
        ]
        target = Path(path).with_suffix(".images.jsonl")
        _write_jsonl(target, rows)
        print(f"{path}: {len(rows)} images, {len(batch.failures)} failures -> {target}")
        if batch.failures:
            status = EXIT_INCOMPLETE
    return status


def cmd_dialogues_gen(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    ctx = _context(cfg, args.mock)
    abilities = {a.ability_id: a for a in load_abilities(cfg)}
    for path in args.images:
        rows = _read_jsonl(path)
        out_rows = []
        for i, row in enumerate(rows):
            p = SDPrompt.from_dict(row["prompt"])
            ability = ensure_pools(ctx, abilities[p.ability_id])
            try:
                d = generate_stage1_dialogue(
                    p, ability, cfg.limits, ctx.backends.chat, templates=ctx.templates,
                    pool=ctx.make_pool(ctx.templates.seed_examples("stage1_dialogue"), ability),
                    seed=derive_seed(cfg.seed, "dialogues-cli", p.text, i),
                )
            except (SynthError, ValueError) as exc:
                if isinstance(exc, Exhausted):
                    raise
                log.warning("no dialogue for %r: %s", p.text, exc)
                continue
            out_rows.append({"ability_id": p.ability_id, "dialogue": d.to_dict(), "images": [row["image"]]})
        target = Path(str(path).replace(".images.jsonl", "") + ".dialogues.jsonl")
        _write_jsonl(target, out_rows)
        print(f"{path}: {len(out_rows)} dialogues -> {target}")
    return EXIT_OK


def cmd_assemble(args: argparse.Namespace) -> int:
    """Bind stage-1 dialogue files into the job's stage-1 dataset."""
    cfg = _load_config(args)
    abilities = load_abilities(cfg)
    plan, _ = stage_plans(cfg, abilities)
    manifest = open_manifest(cfg.manifest_path, cfg.job_id, cfg.config_hash(mock=args.mock))
    writer = DatasetWriter(plan, manifest, cfg.manifest_path)
    try:
        for path in args.dialogues:
            for row in _read_jsonl(path):
                aid = row["ability_id"]
                d = Dialogue.from_dict(row["dialogue"])
                images = [ImageStoreEntry.from_dict(e) for e in row["images"]]
                sample = substitute_placeholders(
                    d, images, sample_id=sample_id(aid, next_counter(manifest, aid)), ability_id=aid,
                    seed=images[0].seed if images else 0,
                )
                writer.add(sample)
    finally:
        result = writer.finalize()
    print(f"{result.path}: {result.written} new samples, status {result.status}, counts {result.counts}")
    return EXIT_OK if result.status == "complete" else EXIT_INCOMPLETE


def _dry_run(cfg: JobConfig, mock: bool) -> int:
    abilities = load_abilities(cfg)
    TemplateSet.load(cfg.templates_dir)
    p1, p2 = stage_plans(cfg, abilities)
    print(f"job {cfg.job_id}: seed {cfg.seed}, output {cfg.output_dir}, mock={mock}")
    print(f"config hash {cfg.config_hash(mock=mock)}")
    for plan in (p1, p2):
        print(f"stage {plan.stage} -> {plan.output_path} ({plan.total} samples)")
        for a, n in plan.target_counts.items():
            print(f"  {a:<30} {n}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        return _dry_run(cfg, args.mock)
    if args.resume and not Path(args.resume).exists():
        raise SynthError(f"{args.resume}: manifest not found")
    report = run_job(cfg, mock=args.mock, resume=bool(args.resume) or args.force_resume)
    for path_key in ("stage1", "stage2"):
        path = report.outputs.get(path_key)
        if path:
            check = validate_dataset_file(path)
            print(f"{path}: {check.count} samples, {len(check.violations)} violations")
    print(f"status {report.status} in {report.wall_time_s:.2f}s; report {report.outputs['report']}")
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
    return EXIT_OK if report.status == "complete" else EXIT_INCOMPLETE


def cmd_eval(args: argparse.Namespace) -> int:
    bench = load_benchmark(args.benchmark)
    answers = load_answers(args.answers)
    rubric = load_rubric(args.rubric)
    if args.config:
        cfg = validate_config(args.config)
        judge = build_judge(cfg, mock=args.mock)
        model = "mock" if args.mock else cfg.backends["judge"].model
    elif args.mock:
        from .mock import MockChatBackend

        judge, model = MockChatBackend(), "mock"
    else:
        raise SynthError("eval needs --config for a real judge endpoint, or --mock")
    results = score_benchmark(bench, answers, rubric, judge, max_workers=args.workers)
    summary = aggregate_scores(results, bench)
    plot = None
    if not args.no_plot:
        from .plotting import plot_category_scores

        plot = plot_category_scores
    paths = write_eval_report(EvalReport(summary, results, model), args.out, plot=plot)
    print(paths["table"].read_text(encoding="utf-8"), end="")
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return EXIT_OK


def rejection_rows(report: JobReport) -> list[list[Any]]:
    rows = []
    for aid, stats in report.abilities.items():
        rows.append([aid, "accepted_prompts", stats.prompts_accepted])
        for reason, n in sorted(stats.rejected.items()):
            rows.append([aid, reason, n])
        rows.append([aid, "samples", stats.samples])
    return rows


def cmd_report(args: argparse.Namespace) -> int:
    from .plotting import plot_category_scores, plot_rejections

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.job:
        report = JobReport.load(Path(args.job) / "report.json")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ability_id", "item", "count"])
        w.writerows(rejection_rows(report))
        (out / "job_counts.csv").write_text(buf.getvalue(), encoding="utf-8")
        fig = plot_rejections(
            {a: s.prompts_accepted for a, s in report.abilities.items()},
            {a: dict(s.rejected) for a, s in report.abilities.items()},
            out / "job_rejections.png",
        )
        print(f"wrote {out / 'job_counts.csv'} and {fig}")
    if args.eval:
        summary, results = load_eval_report(args.eval)
        paths = write_eval_report(EvalReport(summary, results), out, plot=plot_category_scores)
        print(f"wrote {', '.join(str(p) for p in paths.values())}")
    if not args.job and not args.eval:
        raise SynthError("report needs --job and/or --eval")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthvit", description="Synthetic visual instruction data toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    job = argparse.ArgumentParser(add_help=False)
    job.add_argument("--config", required=True, help="job config YAML")
    job.add_argument("--mock", action="store_true", help="use offline mock backends")
    job.add_argument("--seed", type=int, default=None, help="override the config seed")
    job.add_argument("--output-dir", default=None, help="override the config output_dir")

    specs = sub.add_parser("specs", help="ability spec tools").add_subparsers(dest="action", required=True)
    p = specs.add_parser("validate", help="load and check ability specs and templates")
    p.add_argument("--dir", default=None, help="abilities directory (default: packaged)")
    p.add_argument("--templates", default=None, help="templates directory (default: packaged)")
    p.set_defaults(func=cmd_specs_validate)

    pools = sub.add_parser("pools", help="keyword and question pools").add_subparsers(dest="action", required=True)
    pools.add_parser("gen", parents=[job], help="expand and persist pools").set_defaults(func=cmd_pools_gen)

    prompts = sub.add_parser("prompts", help="prompt generation").add_subparsers(dest="action", required=True)
    p = prompts.add_parser("gen", parents=[job], help="one filtered prompt batch per ability")
    p.add_argument("--ability", action="append", help="restrict to this ability (repeatable)")
    p.add_argument("--n", type=int, default=None, help="prompts to request per ability")
    p.set_defaults(func=cmd_prompts_gen)

    images = sub.add_parser("images", help="image rendering").add_subparsers(dest="action", required=True)
    p = images.add_parser("gen", parents=[job], help="render images for prompt files")
    p.add_argument("--prompts", nargs="+", required=True, help="prompt JSON-lines files")
    p.set_defaults(func=cmd_images_gen)

    dialogues = sub.add_parser("dialogues", help="dialogue generation").add_subparsers(dest="action", required=True)
    p = dialogues.add_parser("gen", parents=[job], help="stage-1 dialogues for rendered images")
    p.add_argument("--images", nargs="+", required=True, help="*.images.jsonl files from `images gen`")
    p.set_defaults(func=cmd_dialogues_gen)

    p = sub.add_parser("assemble", parents=[job], help="write dialogue files into the stage-1 dataset")
    p.add_argument("--dialogues", nargs="+", required=True, help="*.dialogues.jsonl files")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("run", parents=[job], help="run a whole job")
    p.add_argument("--resume", default=None, metavar="MANIFEST", help="resume the job recorded in this manifest")
    p.add_argument("--force-resume", action="store_true", help="resume the job in output_dir if one exists")
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score model answers with the judge")
    p.add_argument("--benchmark", required=True, help="benchmark JSON-lines")
    p.add_argument("--answers", required=True, help="model answers JSON-lines {case_id, answer}")
    p.add_argument("--rubric", default=None, help="rubric YAML (default: packaged)")
    p.add_argument("--config", default=None, help="job config with the judge endpoint")
    p.add_argument("--mock", action="store_true", help="use the offline mock judge")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render charts and CSV tables")
    p.add_argument("--job", default=None, help="job output directory (reads report.json)")
    p.add_argument("--eval", default=None, help="eval_report.json from `eval`")
    p.add_argument("--out", required=True, help="directory for figures and CSV files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except Exhausted as exc:
        print(f"error: backend exhausted: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except (SynthError, BackendError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
