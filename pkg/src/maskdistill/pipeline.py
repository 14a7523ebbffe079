"""In-memory glue for the full pipeline: tasks, teachers, masked stages, store, training.

The command-line front end persists each of these artifacts to disk; the functions here
are also used directly by experiments that keep everything in one process.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping, Sequence

from .config import RunConfig
from .judge import ExternalJudge, rule_judge
from .masking import apply_mask, build_mask
from .model import Model
from .pretrain import pretrain
from .rollout import RolloutStore, judge_store, pregenerate
from .schedule import StageSchedule
from .tasks import TaskInstance, make_splits
from .trainer import Trainer, TrainState, masked_teacher_loader, stage_shards


def make_tasks(cfg: RunConfig) -> tuple[list[TaskInstance], list[TaskInstance]]:
    t = cfg.tasks
    return make_splits(t.families, t.train_per_family, t.eval_per_family, t.difficulty,
                       cfg.derived_seed("tasks"))


def train_teacher(cfg: RunConfig, teacher_id: str, train_tasks: Sequence[TaskInstance]) -> Model:
    spec = cfg.teacher(teacher_id)
    model = Model(cfg.teacher_model_config(spec))
    p = spec.pretrain
    pretrain(model, train_tasks, p.steps, p.batch_size, p.learning_rate, p.weight_decay,
             seed=cfg.derived_seed("pretrain", teacher_id))
    return model


def init_student(cfg: RunConfig, train_tasks: Sequence[TaskInstance]) -> Model:
    """Random student, optionally warmed up with a short supervised phase."""
    model = Model(cfg.student_model_config())
    p = cfg.student.pretrain
    pretrain(model, train_tasks, p.steps, p.batch_size, p.learning_rate, p.weight_decay,
             seed=cfg.derived_seed("pretrain", "student"))
    return model


def staged_ratios(cfg: RunConfig, teacher_id: str) -> list[tuple[int, float]]:
    spec = cfg.teacher(teacher_id)
    sched = StageSchedule(cfg.effective_r_max(spec), cfg.s, spec.iterations)
    return [(k, sched.stage_ratio(k)) for k in range(sched.num_stages)]


def mask_teacher(teacher: Model, ratio: float) -> Model:
    return teacher.with_params(apply_mask(teacher.params, build_mask(teacher.params, ratio)))


def make_judge(cfg: RunConfig):
    if cfg.judge.kind == "external":
        return ExternalJudge.from_command(cfg.judge.command)
    return rule_judge


def generate_store(cfg: RunConfig, train_tasks: Sequence[TaskInstance], teachers: Mapping[str, Model],
                   student: Model, store: RolloutStore, workers: int = 1) -> int:
    """Pre-generate every scheduled group (each stage only for its own shard), then judge it."""
    ids = [t.question_id for t in train_tasks]
    shards = {tid: stage_shards(cfg, tid, ids) for tid in teachers}
    staged = {tid: [(k, r, mask_teacher(teachers[tid], r)) for k, r in staged_ratios(cfg, tid)]
              for tid in teachers}
    count = pregenerate(train_tasks, staged, student, cfg.rollout.sampling, store, mix=cfg.rollout.mix,
                        student_refresh=cfg.rollout.student_refresh, workers=workers,
                        questions=lambda tid, stage: shards[tid][stage])
    judge_store(store, {t.question_id: t for t in train_tasks}, make_judge(cfg), workers=workers)
    return count


def with_mode(cfg: RunConfig, mode: str, **train_fields) -> RunConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, mode=mode, **train_fields))


def train(cfg: RunConfig, train_tasks, eval_tasks, student: Model, teachers: Mapping[str, Model],
          store: RolloutStore | None = None, progress=None) -> TrainState:
    groups = store.groups() if (store is not None and cfg.data_source == "generated") else None
    trainer = Trainer(cfg, train_tasks, eval_tasks, student, masked_teacher_loader(teachers), groups)
    return trainer.run(progress)
