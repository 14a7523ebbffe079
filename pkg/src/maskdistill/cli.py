"""Command-line front end. Every artifact lives under the workspace root (see ``Workspace``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import pipeline
from .checkpoint import load_model, save_model
from .config import MODES, RunConfig, dump_config, load_config
from .errors import ConfigError, MaskDistillError, MissingArtifactError, NumericError
from .judge import ExternalJudge, rule_judge
from .masking import build_mask, masked_fraction, save_plan
from .rollout import RolloutStore, judge_store, pregenerate
from .schedule import write_plan_csv
from .tasks import TaskInstance, evaluate
from .trainer import Trainer, stage_shards, write_outputs

log = logging.getLogger("maskdistill")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("gen-tasks", "pretrain-teacher", "mask", "pregenerate", "judge", "train", "evaluate", "report")


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    paths: list[Path] = field(default_factory=list)
    summary: str = ""


class Workspace:
    """Fixed layout of pipeline artifacts below one root directory."""

    def __init__(self, root):
        self.root = Path(root)

    tasks = property(lambda self: self.root / "tasks.jsonl")
    store_dir = property(lambda self: self.root / "store")
    student_init = property(lambda self: self.root / "student" / "init.ckpt")
    report = property(lambda self: self.root / "report.csv")
    curves = property(lambda self: self.root / "curves.csv")

    def teacher_dir(self, teacher_id: str) -> Path:
        return self.root / "teachers" / teacher_id

    def teacher_base(self, teacher_id: str) -> Path:
        return self.teacher_dir(teacher_id) / "base.ckpt"

    def teacher_masked(self, teacher_id: str, ratio: float) -> Path:
        return self.teacher_dir(teacher_id) / f"ratio_{ratio:.2f}.ckpt"

    def mask_plan(self, teacher_id: str, ratio: float) -> Path:
        return self.teacher_dir(teacher_id) / f"mask_{ratio:.2f}.plan"

    def run_dir(self, mode: str) -> Path:
        return self.root / "runs" / mode


def _refuse_existing(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ConfigError(f"refusing to overwrite {', '.join(existing)} (pass --force)", "output")


def _load_tasks(ws: Workspace) -> tuple[list[TaskInstance], list[TaskInstance]]:
    if not ws.tasks.exists():
        raise MissingArtifactError(f"no task file at {ws.tasks}; run gen-tasks first")
    train, held_out = [], []
    with open(ws.tasks, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                (train if doc.get("split") == "train" else held_out).append(TaskInstance.from_dict(doc))
    return train, held_out


def _teacher_ids(cfg: RunConfig, args) -> list[str]:
    if getattr(args, "teacher", None):
        cfg.teacher(args.teacher)
        return [args.teacher]
    return cfg.curriculum


def _student(cfg: RunConfig, ws: Workspace, train) -> tuple:
    """Load the initial student, creating it (deterministically) on first use."""
    if ws.student_init.exists():
        return load_model(ws.student_init), None
    model = pipeline.init_student(cfg, train)
    save_model(ws.student_init, model, {"role": "student-init"})
    return model, ws.student_init


def _generation_config(cfg: RunConfig) -> RunConfig:
    # label-trained runs need no store; generate the masked sweep instead
    return pipeline.with_mode(cfg, "masters") if cfg.train.mode == "naive" else cfg


def _staged_loader(ws: Workspace):
    cache = {}

    def load(teacher_id: str, ratio: float):
        key = (teacher_id, ratio)
        if key not in cache:
            path = ws.teacher_base(teacher_id) if ratio == 0 else ws.teacher_masked(teacher_id, ratio)
            if not path.exists():
                raise ConfigError(f"teacher checkpoint {path} is missing (run pretrain-teacher and mask)",
                                  f"teacher {teacher_id}")
            cache[key] = load_model(path)
        return cache[key]

    return load


# --- subcommands ---------------------------------------------------------------

def cmd_gen_tasks(cfg, ws, args) -> CommandResult:
    _refuse_existing([ws.tasks], args.force)
    train, held_out = pipeline.make_tasks(cfg)
    ws.root.mkdir(parents=True, exist_ok=True)
    with open(ws.tasks, "w", encoding="utf-8") as fh:
        for split, items in (("train", train), ("eval", held_out)):
            for t in items:
                fh.write(json.dumps(t.to_dict(split), sort_keys=True, separators=(",", ":")) + "\n")
    return CommandResult(paths=[ws.tasks], summary=f"{len(train)} train / {len(held_out)} held-out tasks")


def cmd_pretrain_teacher(cfg, ws, args) -> CommandResult:
    train, held_out = _load_tasks(ws)
    ids = _teacher_ids(cfg, args)
    _refuse_existing([ws.teacher_base(t) for t in ids], args.force)
    paths, notes = [], []
    for tid in ids:
        model = pipeline.train_teacher(cfg, tid, train)
        acc = evaluate(model, held_out).overall if held_out else float("nan")
        save_model(ws.teacher_base(tid), model, {"role": "teacher", "teacher_id": tid, "eval_accuracy": acc})
        paths.append(ws.teacher_base(tid))
        notes.append(f"{tid}: held-out accuracy {acc:.3f}")
    return CommandResult(paths=paths, summary="; ".join(notes))


def cmd_mask(cfg, ws, args) -> CommandResult:
    paths, notes = [], []
    gen = _generation_config(cfg)
    for tid in _teacher_ids(cfg, args):
        base = load_model(ws.teacher_base(tid))
        staged = [(k, r) for k, r in pipeline.staged_ratios(gen, tid) if r > 0]
        _refuse_existing([ws.teacher_masked(tid, r) for _, r in staged], args.force)
        for _, ratio in staged:
            plan = build_mask(base.params, ratio)
            save_model(ws.teacher_masked(tid, ratio), pipeline.mask_teacher(base, ratio),
                       {"role": "teacher", "teacher_id": tid, "mask_ratio": ratio})
            save_plan(ws.mask_plan(tid, ratio), plan)
            paths += [ws.teacher_masked(tid, ratio), ws.mask_plan(tid, ratio)]
            notes.append(f"{tid}@{ratio:.2f}: {masked_fraction(plan)[1]:.4f} masked")
    return CommandResult(paths=paths, summary="; ".join(notes) or "nothing to mask")


def cmd_pregenerate(cfg, ws, args) -> CommandResult:
    train, _ = _load_tasks(ws)
    store = RolloutStore(Path(args.store) if args.store else ws.store_dir)
    _refuse_existing([store.path], args.force)
    if store.exists():
        store.path.unlink()
    gen = _generation_config(cfg)
    student, created = _student(gen, ws, train)
    load = _staged_loader(ws)
    ids = [t.question_id for t in train]
    staged, shards = {}, {}
    for tid in gen.curriculum:
        stages = []
        for k, ratio in pipeline.staged_ratios(gen, tid):
            try:
                stages.append((k, ratio, load(tid, ratio)))
            except ConfigError:
                stages.append((k, ratio, None))
        staged[tid] = stages
        shards[tid] = stage_shards(gen, tid, ids)
    n = pregenerate(train, staged, student, gen.rollout.sampling, store, mix=gen.rollout.mix,
                    student_refresh=gen.rollout.student_refresh, workers=args.workers,
                    questions=lambda tid, stage: shards[tid][stage])
    paths = [store.path] + ([created] if created else [])
    return CommandResult(paths=paths, summary=f"{n} responses written")


def cmd_judge(cfg, ws, args) -> CommandResult:
    train, _ = _load_tasks(ws)
    store = RolloutStore(Path(args.store) if args.store else ws.store_dir)
    kind = args.judge or cfg.judge.kind
    if kind == "external":
        command = args.judge_command or cfg.judge.command
        if not command:
            raise ConfigError("the external judge needs a command", "judge.command")
        judge = ExternalJudge.from_command(command)
    else:
        judge = rule_judge
    n = judge_store(store, {t.question_id: t for t in train}, judge, workers=args.workers, rejudge=args.rejudge)
    return CommandResult(paths=[store.path], summary=f"{n} responses judged ({kind})")


def cmd_train(cfg, ws, args) -> CommandResult:
    train, held_out = _load_tasks(ws)
    out = Path(args.out) if args.out else ws.run_dir(cfg.train.mode)
    _refuse_existing([out / "final.ckpt", out / "metrics.csv"], args.force)
    groups = None
    if cfg.data_source == "generated":
        store = RolloutStore(Path(args.store) if args.store else ws.store_dir)
        groups = store.groups() if store.exists() else {}
    student, _ = _student(cfg, ws, train)
    trainer = Trainer(cfg, train, held_out, student, _staged_loader(ws), groups)

    def progress(row):
        if row["iteration"] % 100 == 0:
            log.info("iteration %d ratio %.2f loss %.4f", row["iteration"], row["ratio"], row["loss_total"])

    state = trainer.run(progress)
    ckpt, metrics = write_outputs(out, state)
    write_plan_csv(out / "schedule.csv", trainer.plan)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    report = evaluate(state.student, held_out) if held_out else None
    paths = [ckpt, metrics, out / "schedule.csv", out / "config.yaml"]
    summary = f"{state.iteration} iterations ({cfg.train.mode})"
    if report is not None:
        (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
        paths.append(out / "eval.json")
        summary += f"; held-out accuracy {report.overall:.4f}"
    return CommandResult(paths=paths, summary=summary)


def cmd_evaluate(cfg, ws, args) -> CommandResult:
    train, held_out = _load_tasks(ws)
    path = Path(args.checkpoint) if args.checkpoint else ws.run_dir(cfg.train.mode) / "final.ckpt"
    model = load_model(path)
    report = evaluate(model, train if args.split == "train" else held_out)
    doc = report.to_dict()
    paths = []
    if args.out:
        _refuse_existing([args.out], args.force)
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths.append(Path(args.out))
    per = ", ".join(f"{k} {v:.3f}" for k, v in report.per_family.items())
    return CommandResult(paths=paths, summary=f"{path}: overall {report.overall:.4f} ({per})")


def _float(text: str) -> float:
    return float(text) if text not in ("", None) else float("nan")


def cmd_report(cfg, ws, args) -> CommandResult:
    out = Path(args.out) if args.out else ws.report
    curves = out.with_name("curves.csv")
    _refuse_existing([out, curves], args.force)
    rows, curve_rows, families = [], [], []
    for mode in MODES:
        run = ws.run_dir(mode)
        if not (run / "metrics.csv").exists():
            continue
        with open(run / "metrics.csv", encoding="utf-8") as fh:
            metrics = list(csv.DictReader(fh))
        ev = json.loads((run / "eval.json").read_text()) if (run / "eval.json").exists() else {}
        per = ev.get("per_family", {})
        families += [f for f in per if f not in families]
        tail = metrics[-max(1, len(metrics) // 10):]
        rows.append({
            "mode": mode, "iterations": len(metrics),
            "final_loss_total": _float(metrics[-1]["loss_total"]) if metrics else float("nan"),
            "tail_loss_jsd": sum(_float(r["loss_jsd"]) for r in tail) / len(tail) if metrics else float("nan"),
            "eval_accuracy": ev.get("overall", float("nan")), **{f"acc_{k}": v for k, v in per.items()},
        })
        curve_rows += [{"mode": mode, **r} for r in metrics]
    if not rows:
        raise MissingArtifactError(f"no run metrics under {ws.root / 'runs'}; run train first")
    columns = ["mode", "iterations", "final_loss_total", "tail_loss_jsd", "eval_accuracy"] + \
        [f"acc_{f}" for f in families]
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, columns, lineterminator="\n", restval="")
        writer.writeheader()
        writer.writerows(rows)
    with open(curves, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ["mode"] + list(curve_rows[0].keys())[1:], lineterminator="\n")
        writer.writeheader()
        writer.writerows(curve_rows)
    table = "; ".join(f"{r['mode']} {r['eval_accuracy']:.4f}" for r in rows)
    return CommandResult(paths=[out, curves], summary=f"held-out accuracy: {table}")


HANDLERS = {
    "gen-tasks": cmd_gen_tasks, "pretrain-teacher": cmd_pretrain_teacher, "mask": cmd_mask,
    "pregenerate": cmd_pregenerate, "judge": cmd_judge, "train": cmd_train,
    "evaluate": cmd_evaluate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file merged over the packaged defaults")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable), e.g. optimizer.learning_rate=1e-3")
    common.add_argument("--root", help="workspace root (else $MASKDISTILL_ROOT, else config 'root')")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="maskdistill",
        description="Mask-progressive distillation pipeline. Subcommands, in pipeline order: "
                    + ", ".join(COMMANDS) + ".")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    sub.add_parser("gen-tasks", parents=[common], help="write train and held-out task splits")
    p = sub.add_parser("pretrain-teacher", parents=[common], help="train teacher checkpoints on task labels")
    p.add_argument("--teacher", help="only this teacher id")
    p = sub.add_parser("mask", parents=[common], help="write masked teacher checkpoints for each stage")
    p.add_argument("--teacher", help="only this teacher id")
    p = sub.add_parser("pregenerate", parents=[common], help="sample response groups into the rollout store")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--store", help="store directory (default <root>/store)")
    p = sub.add_parser("judge", parents=[common], help="annotate stored responses with judge scores")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--store", help="store directory (default <root>/store)")
    p.add_argument("--judge", choices=["rule", "external"], help="override judge.kind")
    p.add_argument("--judge-command", help="override judge.command")
    p.add_argument("--rejudge", action="store_true", help="re-score records that already have a score")
    p = sub.add_parser("train", parents=[common], help="run the distillation loop")
    p.add_argument("--mode", choices=MODES, help="override train.mode")
    p.add_argument("--store", help="store directory (default <root>/store)")
    p.add_argument("--out", help="run directory (default <root>/runs/<mode>)")
    p = sub.add_parser("evaluate", parents=[common], help="greedy held-out accuracy of a checkpoint")
    p.add_argument("--checkpoint", help="default <root>/runs/<mode>/final.ckpt")
    p.add_argument("--mode", choices=MODES, help="override train.mode")
    p.add_argument("--split", choices=["eval", "train"], default="eval")
    p.add_argument("--out", help="also write the report as JSON")
    p = sub.add_parser("report", parents=[common], help="compare runs as CSV tables, one row per mode")
    p.add_argument("--out", help="default <root>/report.csv (curves.csv is written next to it)")
    return parser


def dispatch(argv=None) -> CommandResult:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if getattr(args, "mode", None):
            overrides.append(f"train.mode={args.mode}")
        cfg = load_config(args.config, overrides)
        ws = Workspace(args.root or cfg.root_path)
        return HANDLERS[args.command](cfg, ws, args)
    except ConfigError as exc:
        return CommandResult(EXIT_CONFIG, summary=f"configuration error: {exc}")
    except MissingArtifactError as exc:
        return CommandResult(EXIT_MISSING, summary=f"missing artifact: {exc}")
    except NumericError as exc:
        return CommandResult(EXIT_NUMERIC, summary=f"numeric failure: {exc}")
    except MaskDistillError as exc:
        return CommandResult(EXIT_CONFIG, summary=f"error: {exc}")


def main(argv=None) -> int:
    result = dispatch(argv)
    stream = sys.stdout if result.exit_code == EXIT_OK else sys.stderr
    print(result.summary, file=stream)
    for path in result.paths:
        print(f"  wrote {path}", file=stream)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
