"""``dpiqa`` command line: train-teacher, distill, predict, eval, saliency.

Exit codes: 0 success, 1 invalid configuration or input, 2 failure while
running. Every report is JSON with sorted keys, so runs with the same seed
produce byte-identical files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import build_condition
from .config import ConfigError, RunConfig, build_config, validate
from .dataset import IQADataset, ManifestError, SplitPlan, load_image, load_manifest, make_splits, subset
from .distill import StudentModel, TeacherMapCache, train_student
from .evaluation import (
    EvalReport,
    SplitResult,
    cross_dataset_eval,
    evaluate_split,
    saliency_map,
    save_saliency_png,
)
from .model import TeacherModel, make_text_encoder, predict
from .training import train_teacher

log = logging.getLogger("dpiqa")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    """Bad input detected before any work starts (exit code 1)."""


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(obj) + "\n", encoding="utf-8")


def _parse_sets(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(pair, "--set expects key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_config(args, **extra: Optional[str]) -> RunConfig:
    overrides = _parse_sets(args.set or [])
    for key, value in extra.items():
        if value is not None:
            overrides[key.replace("__", ".")] = str(value)
    return build_config(args.config, overrides)


def _splits(cfg: RunConfig, n_records: int, n_splits: Optional[int]) -> list[SplitPlan]:
    seeds = cfg.run.split_seeds
    if n_splits is not None:
        if not 1 <= n_splits <= len(seeds):
            raise ConfigError("--splits", f"must lie in [1, {len(seeds)}]")
        seeds = seeds[:n_splits]
    return make_splits(n_records, seeds)


def _combined_hash(hashes: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(hashes).encode()).hexdigest()


def _teacher_config_mismatch(checkpoint_cfg, wanted) -> list[str]:
    problems = []
    for name in ("cond_width", "timestep", "schedule_steps"):
        a, b = getattr(checkpoint_cfg, name), getattr(wanted, name)
        if a != b:
            problems.append(f"model.{name}: checkpoint has {a}, config has {b}")
    if checkpoint_cfg.resolved_template() != wanted.resolved_template():
        problems.append("data.template: checkpoint was trained with a different prompt template")
    return problems


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args, data__train_manifest=args.manifest, run__seed=args.seed, run__output_dir=args.output)
    validate(cfg, need=("data.train_manifest",))
    records = load_manifest(cfg.data.train_manifest)
    model_cfg = cfg.model_config()
    splits = _splits(cfg, len(records), args.splits)

    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.cfg")
    dataset = IQADataset(records, model_cfg.image_size)
    condition = build_condition(make_text_encoder(model_cfg), model_cfg.resolved_template())
    dataset_id = records[0].dataset_id

    results = []
    with (out / "train_log.jsonl").open("w", encoding="utf-8") as log_fh:
        for split in splits:
            def on_record(rec, _i=split.repeat_index):
                log_fh.write(json.dumps({"split": _i, **rec}, sort_keys=True) + "\n")

            model = TeacherModel(model_cfg, condition=condition)
            train_teacher(model, subset(dataset, split.train_refs), cfg.teacher, cfg.loss, seed=cfg.run.seed, on_record=on_record)
            digest = save_checkpoint(
                model,
                out / f"teacher_split{split.repeat_index}.pt",
                extra={"dataset_id": dataset_id, "split": split.to_dict(), "seed": cfg.run.seed},
            )
            p, s = evaluate_split(model, split, dataset)
            results.append(SplitResult(split.seed, split.repeat_index, p, s, len(split.test_refs), digest))
            log.info("split %d: PLCC %.4f SRCC %.4f", split.repeat_index, p, s)

    report = EvalReport.from_splits(dataset_id, _combined_hash([r.checkpoint_hash for r in results]), results)
    report.write(out / "report.json")
    print(report.to_json())
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _load_config(args, data__train_manifest=args.manifest, run__seed=args.seed, run__output_dir=args.output)
    validate(cfg, need=("data.train_manifest",))
    teacher, meta = load_checkpoint(args.teacher)
    if meta["kind"] != "teacher":
        raise UsageError(f"{args.teacher} holds a {meta['kind']} checkpoint, not a teacher")
    problems = _teacher_config_mismatch(teacher.cfg, cfg.model_config())
    if problems:
        raise UsageError("teacher checkpoint does not match the config:\n  " + "\n  ".join(problems))

    records = load_manifest(cfg.data.train_manifest)
    if teacher.cfg.image_size != cfg.student_model.image_size:
        raise UsageError(
            f"student_model.image_size {cfg.student_model.image_size} differs from the teacher's {teacher.cfg.image_size}"
        )
    saved = meta.get("extra", {}).get("split")
    if saved is not None and max(saved["train"] + saved["test"]) < len(records):
        split = SplitPlan(saved["seed"], tuple(saved["train"]), tuple(saved["test"]), saved["repeat_index"])
    else:
        split = _splits(cfg, len(records), 1)[0]

    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.cfg")
    dataset = IQADataset(records, cfg.student_model.image_size)
    student = StudentModel(cfg.student_model)
    cache = TeacherMapCache(teacher, meta["hash"], out / "teacher_maps")
    with (out / "distill_log.jsonl").open("w", encoding="utf-8") as log_fh:
        train_student(
            student,
            teacher,
            subset(dataset, split.train_refs),
            cfg.student,
            cfg.loss,
            distill_weight=cfg.run.distill_weight,
            seed=cfg.run.seed,
            cache=cache,
            on_record=lambda rec: log_fh.write(json.dumps(rec, sort_keys=True) + "\n"),
        )
    digest = save_checkpoint(student, out / "student.pt", extra={"dataset_id": records[0].dataset_id, "split": split.to_dict(), "teacher": meta["hash"]})

    tp, ts = evaluate_split(teacher, split, dataset)
    sp, ss = evaluate_split(student, split, dataset)
    report = {
        "dataset_id": records[0].dataset_id,
        "split": {"seed": split.seed, "repeat_index": split.repeat_index, "n_test": len(split.test_refs)},
        "teacher": {"checkpoint_hash": meta["hash"], "plcc": tp, "srcc": ts},
        "student": {"checkpoint_hash": digest, "plcc": sp, "srcc": ss},
    }
    _write_json(out / "report.json", report)
    print(_dump(report))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    size = model.cfg.image_size
    output = Path(args.output)
    entries: list[dict] = []
    pixels = {}
    for i, path in enumerate(args.images):
        try:
            pixels[i] = load_image(path, size)
            entries.append({"image": str(path)})
        except (OSError, ValueError) as exc:
            entries.append({"image": str(path), "error": f"{type(exc).__name__}: {exc}"})
    if pixels:
        order = sorted(pixels)
        scores = predict(model, torch.stack([pixels[i] for i in order]))
        for i, s in zip(order, scores):
            entries[i]["score"] = s
    if args.saliency:
        output.parent.mkdir(parents=True, exist_ok=True)
        for i in sorted(pixels):
            png = output.parent / f"{Path(args.images[i]).stem}_saliency.png"
            save_saliency_png(saliency_map(model, pixels[i]), png)
            entries[i]["saliency"] = png.name

    for e in entries:
        print(f"{e['image']}\t{e['score']:.6f}" if "score" in e else f"{e['image']}\terror: {e['error']}")
    _write_json(output, {"checkpoint_hash": meta["hash"], "results": entries})
    if not pixels:
        log.error("none of the %d images could be read", len(entries))
        return EXIT_FAILED
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model, meta = load_checkpoint(args.checkpoint)
    size = model.cfg.image_size
    records = load_manifest(args.manifest)
    dataset_id = records[0].dataset_id
    if args.cross is None:
        splits = _splits(cfg, len(records), args.splits)
        dataset = IQADataset(records, size)
        results = []
        for split in splits:
            p, s = evaluate_split(model, split, dataset)
            results.append(SplitResult(split.seed, split.repeat_index, p, s, len(split.test_refs)))
        report = EvalReport.from_splits(dataset_id, meta["hash"], results)
    else:
        target_records = load_manifest(args.cross)
        target_id = target_records[0].dataset_id
        source_id = meta.get("extra", {}).get("dataset_id", dataset_id)
        p, s = cross_dataset_eval(model, source_id, IQADataset(target_records, size), target_id)
        result = SplitResult(seed=-1, repeat_index=0, plcc=p, srcc=s, n_test=len(target_records))
        report = EvalReport.from_splits(target_id, meta["hash"], [result], mode="cross_dataset", source_dataset_id=source_id)
    if args.output:
        report.write(args.output)
    print(report.to_json())
    return EXIT_OK


def cmd_saliency(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for path in args.images:
        try:
            x = load_image(path, model.cfg.image_size)
        except (OSError, ValueError) as exc:
            print(f"{path}\terror: {exc}")
            failed += 1
            continue
        png = out / f"{Path(path).stem}_saliency.png"
        save_saliency_png(saliency_map(model, x), png)
        print(f"{path}\t{png}")
    return EXIT_FAILED if failed == len(args.images) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpiqa", description="Diffusion-prior blind image quality assessment.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    p = sub.add_parser("train-teacher", help="train the teacher under the split protocol")
    add_config(p)
    p.add_argument("--manifest", help="training manifest (overrides data.train_manifest)")
    p.add_argument("--splits", type=int, help="number of seeded splits to run (default: all)")
    p.add_argument("--seed", type=int, help="training seed (overrides run.seed)")
    p.add_argument("--output", help="output directory (overrides run.output_dir)")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    add_config(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--manifest", help="training manifest (overrides data.train_manifest)")
    p.add_argument("--seed", type=int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("predict", help="score images with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--output", default="predictions.json", help="JSON output path")
    p.add_argument("--saliency", action="store_true", help="also write one saliency PNG per image next to the JSON")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    add_config(p)
    p.add_argument("checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cross", help="second manifest: zero-shot cross-dataset evaluation on it")
    p.add_argument("--splits", type=int)
    p.add_argument("--output", help="report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="write input-gradient saliency maps")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--output-dir", default=".")
    p.set_defaults(func=cmd_saliency)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError, UsageError, FileNotFoundError) as exc:
        print(f"dpiqa: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and map to the failure exit code
        log.debug("command failed", exc_info=True)
        print(f"dpiqa: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
